"""Multimodal adversarial attacks, defenses and robustness metrics.

Thin bindings over the C++ core. Arrays are exchanged as float64 numpy
arrays: audio inputs are 1-D, visual inputs are (patches, patch_dim).
"""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401
