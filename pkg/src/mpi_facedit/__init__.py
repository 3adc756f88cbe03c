"""Few-shot 3D-aware face attribute editing with a multi-plane-image GAN, at desk scale."""

__version__ = "0.1.0"
