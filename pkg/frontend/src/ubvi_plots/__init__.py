"""Figure rendering for boosting variational inference experiment outputs."""

from .figures import FigureSpec, SchemaError, mixture_density, render

__version__ = "0.1.0"
