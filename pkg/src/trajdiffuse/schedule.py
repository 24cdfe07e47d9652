"""DDPM variance schedule and closed-form diffusion arithmetic.

A NoiseSchedule is immutable and shareable across threads. Steps are
1-indexed: t runs from 1 (least noisy) to T. All array-valued operations
work on numpy arrays and torch tensors alike, since the per-step
coefficients are plain floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseSchedule", "linear_betas", "cosine_betas"]

TERMINAL_ALPHA_BAR = 0.05


def linear_betas(T: int, beta_start: float = 1e-4, beta_end: float = 0.05) -> np.ndarray:
    """Linear schedule, rescaled so the terminal signal level is near zero.

    If the raw endpoints leave alpha_bar(T) >= TERMINAL_ALPHA_BAR, the whole
    vector is scaled up (betas stay < 1) until the chain actually destroys
    the signal by step T.
    """
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    for _ in range(8):
        abar_T = np.prod(1.0 - betas)
        if abar_T < TERMINAL_ALPHA_BAR:
            break
        scale = math.log(0.8 * TERMINAL_ALPHA_BAR) / math.log(abar_T)
        betas = np.minimum(betas * scale, 0.999)
    return betas


def cosine_betas(T: int, offset: float = 0.008) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64) / T
    abar = np.cos((steps + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    betas = 1.0 - abar[1:] / abar[:-1]
    return np.clip(betas, 1e-8, 0.999)


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule beta_1..beta_T with derived alpha products.

    gamma is the Min-SNR clamp used by the training loss weight.
    """

    beta: np.ndarray
    gamma: float = 5.0
    kind: str = "linear"
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if not ((beta > 0) & (beta < 1)).all():
            raise ValueError("betas must lie strictly inside (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if not (np.diff(alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @classmethod
    def create(cls, T: int = 100, kind: str = "linear", gamma: float = 5.0,
               beta_start: float = 1e-4, beta_end: float = 0.05) -> "NoiseSchedule":
        if T < 1:
            raise ValueError("T must be >= 1")
        if kind == "linear":
            betas = linear_betas(T, beta_start, beta_end)
        elif kind == "cosine":
            betas = cosine_betas(T)
        else:
            raise ValueError(f"unknown schedule kind: {kind!r}")
        return cls(beta=betas, gamma=gamma, kind=kind)

    @property
    def T(self) -> int:
        return self.beta.size

    def _check_step(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside [1, {self.T}]")
        return t

    def forward_noise(self, x0, t: int, eps):
        """x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps."""
        t = self._check_step(t)
        abar = self.alpha_bar[t - 1]
        return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps

    def reverse_step(self, x_t, t: int, eps_hat, eps):
        """One ancestral denoising step given the predicted noise.

        At t=1 the fresh-noise term is dropped so the final step is
        deterministic.
        """
        t = self._check_step(t)
        beta = self.beta[t - 1]
        alpha = self.alpha[t - 1]
        abar = self.alpha_bar[t - 1]
        mean = (x_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(alpha)
        if t == 1:
            return mean
        return mean + math.sqrt(beta) * eps

    def posterior_mean_x0(self, x_t, t: int, eps_hat):
        """Tweedie estimate of the clean sample from x_t and predicted noise."""
        t = self._check_step(t)
        abar = self.alpha_bar[t - 1]
        return (x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)

    def snr(self, t: int) -> float:
        t = self._check_step(t)
        abar = self.alpha_bar[t - 1]
        return abar / (1.0 - abar)

    def minsnr_weight(self, t: int) -> float:
        """Min-SNR loss weight: min(gamma, SNR(t)) / SNR(t), in (0, 1]."""
        snr = self.snr(t)
        return min(self.gamma, snr) / snr

    def serializable_params(self) -> dict:
        return {
            "T": self.T,
            "kind": self.kind,
            "gamma": self.gamma,
            "beta_start": float(self.beta[0]),
            "beta_end": float(self.beta[-1]),
        }
