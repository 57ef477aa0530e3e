"""Cross-modal knowledge distillation for SAR flood segmentation at desk scale."""

__version__ = "0.1.0"
