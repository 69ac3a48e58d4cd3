"""Cross-attentive multiview fusion of vision-language descriptors."""

__version__ = "0.1.0"
