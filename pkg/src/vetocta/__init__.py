"""Single-scan OCTA toolkit: phantoms, classical SV/ED flow, the VET network and metrics."""

from .classical import ed_octa, eigh_hermitian, sv_octa
from .data import BFrameEnsemble, EnfaceImage, MultiRepeatVolume, PhantomConfig, load_volume, make_phantom, save_volume
from .metrics import MetricReport, evaluate_set, ms_ssim, psnr, ssim
from .model import VetConfig, VetModel, flops_estimate, param_count

__version__ = "0.1.0"

__all__ = [
    "BFrameEnsemble",
    "EnfaceImage",
    "MetricReport",
    "MultiRepeatVolume",
    "PhantomConfig",
    "VetConfig",
    "VetModel",
    "ed_octa",
    "eigh_hermitian",
    "evaluate_set",
    "flops_estimate",
    "load_volume",
    "make_phantom",
    "ms_ssim",
    "param_count",
    "psnr",
    "save_volume",
    "ssim",
    "sv_octa",
]
