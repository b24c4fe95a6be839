"""Trainable ISP front-end blocks (tone mapping, scaler, denoiser tuning) on a
hand-written autodiff core, with a small grid-cell detector for evaluation."""

__version__ = "0.1.0"
