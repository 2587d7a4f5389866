"""Single-image-to-3D optimization engine.

Stage 1 fits a hash-grid radiance field to one reference image using
photometric, depth-correlation and diffusion-prior losses.  Stage 2 exports
the field into a textured point cloud and optimizes per-point neural
descriptors with a deferred renderer.  The diffusion prior is a pluggable
backend, so the whole pipeline runs and is testable without any pretrained
model.
"""

__version__ = "0.1.0"
