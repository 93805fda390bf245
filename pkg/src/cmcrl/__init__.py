"""Cross-modal supervised contrastive representation learning for audio-to-image generation."""

__version__ = "0.1.0"
