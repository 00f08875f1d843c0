"""EfficientNetV2 toolkit: blocks, cost analysis, progressive learning and
training-aware architecture search on a small numpy autodiff engine."""

__version__ = "0.1.0"
