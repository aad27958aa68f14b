"""Gradient-guided state-space network for RGB to hyperspectral reconstruction.

Pure numpy: a small reverse-mode autodiff core, the selective scan and its
four-route 2D wrapper, gradient attention, the full model, training, metrics
and file formats.
"""

__version__ = "0.1.0"

from .model import GmsrConfig, GmsrNet, load_checkpoint, param_count, save_checkpoint  # noqa: E402

__all__ = ["GmsrConfig", "GmsrNet", "load_checkpoint", "param_count", "save_checkpoint", "__version__"]
