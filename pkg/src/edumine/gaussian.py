"""Diagonal Gaussian distributions and their closed-form KL divergence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DiagGaussian",
    "standard_normal",
    "gaussian_kl",
    "kl_diag_batch",
    "kl_to_standard",
    "reparam_sample",
]


@dataclass(frozen=True)
class DiagGaussian:
    """Gaussian with diagonal covariance, stored as (mean, std)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if mean.ndim != 1 or mean.shape != std.shape:
            raise ValueError(
                f"mean/std must be equal-length vectors, got {mean.shape} and {std.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValueError("mean and std must be finite")
        if np.any(std <= 0.0):
            raise ValueError("std must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def standard_normal(dim: int) -> DiagGaussian:
    return DiagGaussian(np.zeros(dim), np.ones(dim))


def kl_diag_batch(
    mean_q: np.ndarray,
    std_q: np.ndarray,
    mean_p: np.ndarray,
    std_p: np.ndarray,
) -> np.ndarray:
    """KL(q || p) row-wise for batches of diagonal Gaussians."""
    var_q = std_q * std_q
    var_p = std_p * std_p
    d = mean_q - mean_p
    return np.sum(
        np.log(std_p / std_q) + (var_q + d * d) / (2.0 * var_p) - 0.5, axis=-1
    )


def kl_to_standard(mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """KL(q || N(0, I)) row-wise."""
    var = std * std
    return 0.5 * np.sum(mean * mean + var - 1.0 - np.log(var), axis=-1)


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> float:
    """Closed-form KL(q || p); exactly zero when q and p coincide."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    return float(kl_diag_batch(q.mean, q.std, p.mean, p.std))


def reparam_sample(g: DiagGaussian, noise: np.ndarray) -> np.ndarray:
    """mean + std * noise for a standard-normal noise vector."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != g.dim:
        raise ValueError(f"noise length {noise.shape[-1]} does not match dim {g.dim}")
    return g.mean + g.std * noise
