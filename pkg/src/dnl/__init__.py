"""Desk-scale laboratory for pair-free CT denoising: a residual CycleGAN
translator and a Noise2Score (AR-DAE + Tweedie) denoiser on a small numpy
autodiff engine."""

__version__ = "0.1.0"
