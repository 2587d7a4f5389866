"""Prior sidecar: denoiser, embeddings, conditioning, and depth over HTTP."""

__version__ = "0.1.0"
