"""Python bindings for the magus music-editing library."""

import torch  # noqa: F401  loads libtorch before the extension

from ._magus import *  # noqa: F401,F403
from ._magus import MagusError, Model, __doc__  # noqa: F401
