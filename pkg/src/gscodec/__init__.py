"""Vector-quantized compression toolkit for Gaussian splat models."""

from .bitq import BitQuantChannel, BitQuantPolicy, absmax_dequantize, absmax_quantize, apply_policy
from .codec import container_size_report, decode, encode, pack_indices, predict_size, unpack_indices
from .model import GROUPS, GaussianCloud, ParamGroup, group_view, validate
from .ply_io import load_ply, read_ply, save_ply, write_ply
from .vq import Codebook, QatSchedule, VqConfig, assign, assign_frozen, init_codebook, lloyd, quantize_cloud

__version__ = "0.1.0"
