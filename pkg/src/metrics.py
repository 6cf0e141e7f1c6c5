"""
Reconstruction quality and attack outcome statistics.

Images are compared on clamped copies in [0, 1] (data range 1).
"""

from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.errors import MetricError
from src.utils import clamp_unit

SUCCESS_SSIM = 0.9
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_pair(a, b):
    left = clamp_unit(getattr(a, "data", a))
    right = clamp_unit(getattr(b, "data", b))
    if left.shape != right.shape:
        raise MetricError(f"image shapes differ: {left.shape} vs {right.shape}")
    return left, right


def mse(a, b) -> float:
    """Mean squared difference over every pixel and channel."""
    left, right = _as_pair(a, b)
    return float(np.mean((left - right) ** 2))


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    profile = np.exp(-(offsets**2) / (2.0 * sigma**2))
    window = np.outer(profile, profile)
    return window / window.sum()


def _filter_valid(channel: np.ndarray, window: np.ndarray) -> np.ndarray:
    patches = np.lib.stride_tricks.sliding_window_view(channel, window.shape)
    return np.tensordot(patches, window, axes=((2, 3), (0, 1)))


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> float:
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    var_a = _filter_valid(a * a, window) - mu_a * mu_a
    var_b = _filter_valid(b * b, window) - mu_b * mu_b
    cov = _filter_valid(a * b, window) - mu_a * mu_b
    numerator = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def ssim(a, b, window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid Gaussian windows, averaged over channels.

    Args:
        a, b: H x W or H x W x C images.
        window_size: Side of the Gaussian window (11 by default).
        sigma: Standard deviation of the window.

    Raises:
        MetricError: Shapes differ or the image is smaller than the window.
    """
    left, right = _as_pair(a, b)
    if left.ndim == 2:
        left, right = left[..., None], right[..., None]
    if left.ndim != 3:
        raise MetricError(f"expected an H x W or H x W x C image, got shape {left.shape}")
    height, width = left.shape[:2]
    if window_size < 1 or height < window_size or width < window_size:
        raise MetricError(f"image {height}x{width} is smaller than the {window_size}x{window_size} window")
    window = gaussian_window(window_size, sigma)
    scores = [_ssim_channel(left[..., c], right[..., c], window) for c in range(left.shape[2])]
    return float(np.mean(scores))


def attack_success(outcome_ssim: float) -> bool:
    return outcome_ssim > SUCCESS_SSIM


class SampleOutcome(BaseModel):
    """Score of one attacked sample.

    ``mse``/``ssim`` are None when the sample failed before producing an image.
    """

    sample_id: str
    success: bool
    mse: Optional[float] = Field(default=None, ge=0)
    ssim: Optional[float] = Field(default=None, ge=-1, le=1)
    iterations: int = Field(ge=0)
    seconds: float = Field(ge=0)
    cause: str

    @model_validator(mode="after")
    def _success_matches_ssim(self) -> "SampleOutcome":
        expected = self.ssim is not None and attack_success(self.ssim)
        if self.success != expected:
            raise ValueError(f"success={self.success} disagrees with ssim={self.ssim}")
        return self


class SummaryRow(BaseModel):
    """Aggregate over a set of outcomes. NaN marks a statistic with no successes to average."""

    asr: float = Field(ge=0, le=1)
    mse_avg: float
    ssim_avg: float
    recon_time_s: float = Field(ge=0)
    iter_max: float
    iter_min: float
    iter_avg: float
    iter_sd: float


def summarize(outcomes: Sequence[SampleOutcome]) -> SummaryRow:
    """ASR over every sample; quality and iteration statistics over successes only."""
    if not outcomes:
        raise MetricError("cannot summarize an empty set of outcomes")
    successes = [outcome for outcome in outcomes if outcome.success]
    total_time = float(sum(outcome.seconds for outcome in outcomes))
    asr = len(successes) / len(outcomes)
    if not successes:
        nan = float("nan")
        return SummaryRow(
            asr=asr, mse_avg=nan, ssim_avg=nan, recon_time_s=total_time,
            iter_max=nan, iter_min=nan, iter_avg=nan, iter_sd=nan,
        )
    iterations = np.array([outcome.iterations for outcome in successes], dtype=np.float64)
    return SummaryRow(
        asr=asr,
        mse_avg=float(np.mean([outcome.mse for outcome in successes])),
        ssim_avg=float(np.mean([outcome.ssim for outcome in successes])),
        recon_time_s=total_time,
        iter_max=float(iterations.max()),
        iter_min=float(iterations.min()),
        iter_avg=float(iterations.mean()),
        iter_sd=float(iterations.std(ddof=0)),
    )
