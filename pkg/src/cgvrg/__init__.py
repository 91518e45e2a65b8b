"""Caption-guided relationship graph image captioning on a small numpy autodiff engine."""

__version__ = "0.1.0"
