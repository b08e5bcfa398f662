"""Segmentation toolkit: offset-refined upsampling and serial channel/spatial
attention over a numpy autodiff core, with synthetic-scene training,
evaluation metrics, a FastAPI service, and a CLI."""

__version__ = "0.1.0"
