"""Lifting-inspired invertible network for image denoising, in plain numpy."""

from .denoiser import (
    L1Problem,
    LISTAHead,
    STHead,
    adapt_thresholds,
    ista_solve,
    lista_denoise,
    lista_from_ista,
    st_denoise,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import add_noise, load_images, read_image, sample_patches, write_image
from .linn import LinnScale, PUNet, linn_backward_memeff, linn_forward, linn_inverse, punet_apply
from .model import HParams, LinnModel, count_params, denoise_image, init_model
from .train import TrainConfig, load_config, mse_loss, psnr, train
from .wavelet import WaveletBands, dwt_forward, dwt_inverse

__version__ = "0.1.0"
