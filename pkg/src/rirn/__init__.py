"""Recurrence-in-recurrence video deblurring on a small numpy autodiff core."""

from .cells import CellConfig, CellState
from .data import SequenceSample, gen_synthetic_sequence
from .estimator import RIRNDeblurrer
from .metrics import psnr, ssim
from .tensor import Tensor

__all__ = ["CellConfig", "CellState", "RIRNDeblurrer", "SequenceSample", "Tensor", "gen_synthetic_sequence", "psnr", "ssim"]

__version__ = "0.1.0"
