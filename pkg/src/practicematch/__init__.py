"""Meta-gradient learning of intrinsic practice rewards for policy-gradient agents."""

__version__ = "0.1.0"
