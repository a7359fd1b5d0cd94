"""Dense contrastive self-supervised pre-training at desk scale."""

__version__ = "0.1.0"
