"""Unsupervised change detection between co-registered images from different sensors.

Submodules: ``raster``, ``affinity``, ``nn``, ``losses``, ``translators``,
``change_extraction``, ``metrics``, ``synthetic``, ``theory``, ``pipeline``, ``cli``.
"""

__version__ = "0.1.0"
