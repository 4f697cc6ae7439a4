"""stainbench: desk-scale virtual-staining benchmark toolkit.

Dataset preparation (tiling, tissue masking, stratified splits, curation),
GAN and diffusion training objectives, image-quality metrics, mixed-effects
comparison statistics, and an HTTP curation service.
"""

__version__ = "0.1.0"

from .errors import StainbenchError

__all__ = ["StainbenchError", "__version__"]
