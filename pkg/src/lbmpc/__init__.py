"""Learning-based MPC toolkit.

Robust tube MPC whose constraints are enforced on a nominal linear model
with bounded additive uncertainty, while the cost is evaluated on a
statistically learned model.  Includes the Moore-Greitzer compressor
surge benchmark and a small command line front end.
"""

__version__ = "0.1.0"
