"""SINR, sum rate, power accounting, and the interference-coupling
diagnostics that justify sharing the downlink powers with the dual
uplink.

All functions are pure and accept either a single sample (K, M) or a
batch (..., K, M) of split channel/beam arrays.  Noise power is unity
throughout; the constant lives here so the symbol has one home.
"""

from dataclasses import dataclass

import numpy as np

from .complexops import hdot_batched

NOISE_POWER = 1.0


@dataclass
class RateReport:
    """Per-user SINRs and rates plus their sum and the spent power."""

    sinr: np.ndarray
    rates: np.ndarray
    sum_rate: float
    total_power: float


@dataclass
class OmegaMatrix:
    """SINR-target coupling matrix and the targets used on its diagonal."""

    matrix: np.ndarray
    gamma: np.ndarray


def _cross_gains(hr, hi, vr, vi):
    """|h_k^H v_j|^2 for all (k, j) pairs; shape (..., K, K)."""
    sr, si = hdot_batched(
        hr[..., :, None, :], hi[..., :, None, :], vr[..., None, :, :], vi[..., None, :, :]
    )
    return sr * sr + si * si


def sinr(hr, hi, vr, vi, noise_power=NOISE_POWER):
    """SINR_k = |h_k^H v_k|^2 / (sum_{j != k} |h_k^H v_j|^2 + noise)."""
    gains = _cross_gains(hr, hi, vr, vi)
    k = gains.shape[-1]
    idx = np.arange(k)
    signal = gains[..., idx, idx]
    interference = gains.sum(axis=-1) - signal
    return signal / (interference + noise_power)


def sum_rate(hr, hi, vr, vi, noise_power=NOISE_POWER):
    """sum_k log2(1 + SINR_k); batched inputs give one value per sample."""
    rates = np.log2(1.0 + sinr(hr, hi, vr, vi, noise_power))
    return rates.sum(axis=-1)


def rate_report(hr, hi, vr, vi, noise_power=NOISE_POWER):
    s = sinr(hr, hi, vr, vi, noise_power)
    rates = np.log2(1.0 + s)
    return RateReport(
        sinr=s,
        rates=rates,
        sum_rate=float(rates.sum()),
        total_power=float(np.sum(vr**2 + vi**2)),
    )


def omega(hr, hi, dr, di, gamma):
    """Coupling matrix of the SINR-target power-control system.

    Off-diagonal (k, j): |h_k^H d_j|^2, the normalized interference at
    user k caused by user j's unit direction.  Diagonal (k, k):
    -(1/gamma_k) |h_k^H d_k|^2.  With gamma set to the SINRs achieved by
    v_k = sqrt(p_k) d_k, the identity omega @ p == -noise * ones holds.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma <= 0):
        raise ValueError("gamma entries must be positive")
    gains = _cross_gains(hr, hi, dr, di)
    k = gains.shape[-1]
    idx = np.arange(k)
    mat = gains.copy()
    mat[..., idx, idx] = -gains[..., idx, idx] / gamma
    return OmegaMatrix(matrix=mat, gamma=gamma)


def omega_symmetry_gap(om):
    """max_{k != j} |O_kj - O_jk| normalized by the mean |diagonal|."""
    mat = om.matrix
    k = mat.shape[-1]
    if k < 2:
        raise ValueError("symmetry gap needs at least two users")
    asym = np.abs(mat - mat.T)
    return float(asym.max() / np.mean(np.abs(np.diagonal(mat))))
