"""Subject-driven 3D content generation from a single image, at desk scale.

Two toy diffusion models (a single-image personalizer and a multi-view
color+normal model) fine-tune on each other's outputs, a cascade sampler
combines them into a consistent six-view batch, and a splat-based
reconstruction tail turns the views into a triangle mesh. An evaluation
harness covers turntable rendering, retrieval precision, and pairwise
vision-judge comparisons.
"""

__version__ = "0.1.0"
