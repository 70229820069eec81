"""Stereo video view-time interpolation with coordinate-conditioned decoders.

The numeric substrate is :mod:`stereoxf.tensor`, a small reverse-mode
autodiff library on numpy. Scenes come from :mod:`stereoxf.scenegen`,
decoders are fitted by :mod:`stereoxf.training` and rendered by
:mod:`stereoxf.render`.
"""

__version__ = "0.1.0"
