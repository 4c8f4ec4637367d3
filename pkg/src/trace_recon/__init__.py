"""TRACE: trajectory-constrained image reconstruction with untrained network priors."""

__version__ = "0.1.0"
