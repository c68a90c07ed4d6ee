"""Hardware-aware post-training quantization with DVFS scheduling."""

__version__ = "0.1.0"
