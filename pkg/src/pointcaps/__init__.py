"""3DCapsule point-cloud classification toolkit on a small numpy autodiff engine."""

__version__ = "0.1.0"
