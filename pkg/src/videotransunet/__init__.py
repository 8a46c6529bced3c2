"""Video segmentation with temporal context blending and a transformer bottleneck.

Everything runs on a small numpy autodiff engine (``videotransunet.autodiff``).
"""

__version__ = "0.1.0"
