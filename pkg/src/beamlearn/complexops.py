"""Complex vector/matrix arithmetic over paired real arrays.

Every complex quantity in this package is carried as two float64 arrays
(real and imaginary parts), so the learning stack can treat them as
ordinary real features.  This module owns the split-representation
containers, the Hermitian inner product, the regularized Gram matrix of
a channel set, and the Hermitian positive-definite solve used for beam
recovery.  Batched kernels (one leading batch axis) back the hot paths;
``CVec``/``CMat`` wrap single instances for the solver-facing API.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization fails (matrix not HPD)."""


def _as_f64(a, name):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass
class CVec:
    """Complex vector stored as split real/imaginary float64 arrays."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.re = _as_f64(self.re, "re")
        self.im = _as_f64(self.im, "im")
        if self.re.ndim != 1 or self.im.ndim != 1:
            raise ValueError("CVec parts must be 1-d arrays")
        if self.re.shape != self.im.shape:
            raise ValueError(
                f"re/im length mismatch: {self.re.shape} vs {self.im.shape}"
            )

    def __len__(self):
        return self.re.shape[0]

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z, dtype=np.complex128)
        return cls(z.real.copy(), z.imag.copy())

    def to_complex(self):
        return self.re + 1j * self.im


@dataclass
class CMat:
    """Square complex matrix as split parts; ``hermitian`` asserts A = A^H."""

    re: np.ndarray
    im: np.ndarray
    hermitian: bool = field(default=False)

    def __post_init__(self):
        self.re = _as_f64(self.re, "re")
        self.im = _as_f64(self.im, "im")
        if self.re.ndim != 2 or self.re.shape[0] != self.re.shape[1]:
            raise ValueError("CMat must be square")
        if self.re.shape != self.im.shape:
            raise ValueError("re/im shape mismatch")
        if self.hermitian and self.hermitian_defect() > 1e-12:
            raise ValueError("matrix flagged Hermitian but A != A^H within 1e-12")

    @property
    def n(self):
        return self.re.shape[0]

    def hermitian_defect(self):
        """Largest absolute deviation from A = A^H."""
        return max(
            float(np.max(np.abs(self.re - self.re.T), initial=0.0)),
            float(np.max(np.abs(self.im + self.im.T), initial=0.0)),
        )

    def to_complex(self):
        return self.re + 1j * self.im


def hdot(a, b):
    """Hermitian inner product a^H b (conjugate-linear in the first argument)."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    sr = float(a.re @ b.re + a.im @ b.im)
    si = float(a.re @ b.im - a.im @ b.re)
    return complex(sr, si)


def norm2(a):
    """Squared Euclidean norm sum(re^2 + im^2)."""
    return float(a.re @ a.re + a.im @ a.im)


def gram_matrix(h, q, sigma2):
    """Regularized Gram matrix sigma2*I + sum_j q_j h_j h_j^H.

    ``h`` is a sequence of K equal-length CVecs, ``q`` a nonnegative
    weight per vector.  The result is Hermitian positive definite with
    smallest eigenvalue at least sigma2.
    """
    q = _as_f64(q, "q")
    if q.ndim != 1 or len(q) != len(h):
        raise ValueError("q must be a 1-d vector with one entry per channel")
    if np.any(q < 0):
        raise ValueError("q entries must be nonnegative")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    hr = np.stack([v.re for v in h])
    hi = np.stack([v.im for v in h])
    ar, ai = gram_batched(q, hr, hi, sigma2)
    return CMat(ar, ai, hermitian=True)


def hpd_solve(A, b):
    """Solve A x = b for Hermitian positive-definite A via Cholesky."""
    if A.n != len(b):
        raise ValueError(f"dimension mismatch: {A.n}x{A.n} vs length {len(b)}")
    if A.hermitian_defect() > 1e-12:
        raise ValueError("hpd_solve requires a Hermitian matrix")
    try:
        factor = scipy.linalg.cho_factor(A.to_complex(), lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            "Cholesky factorization failed: matrix is not positive definite"
        ) from exc
    x = scipy.linalg.cho_solve(factor, b.to_complex())
    return CVec(x.real, x.imag)


# ---------------------------------------------------------------------------
# Batched kernels.  Shapes use one leading batch axis: channels (B, K, M),
# Gram matrices (B, M, M).  hdot/norm2 kernels broadcast over any leading
# axes and contract the last one.


def hdot_batched(ar, ai, br, bi):
    sr = np.sum(ar * br + ai * bi, axis=-1)
    si = np.sum(ar * bi - ai * br, axis=-1)
    return sr, si


def norm2_batched(ar, ai):
    return np.sum(ar * ar + ai * ai, axis=-1)


def gram_batched(q, hr, hi, sigma2):
    """Split-representation sigma2*I + sum_j q_j h_j h_j^H over a batch."""
    ar = np.einsum("...k,...km,...kn->...mn", q, hr, hr)
    ar += np.einsum("...k,...km,...kn->...mn", q, hi, hi)
    ai = np.einsum("...k,...km,...kn->...mn", q, hi, hr)
    ai -= np.einsum("...k,...km,...kn->...mn", q, hr, hi)
    m = hr.shape[-1]
    idx = np.arange(m)
    ar[..., idx, idx] += sigma2
    return ar, ai


def cholesky_batched(ar, ai):
    """Lower Cholesky factors of a batch of HPD matrices (complex dtype)."""
    try:
        return np.linalg.cholesky(ar + 1j * ai)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            "Cholesky factorization failed: matrix is not positive definite"
        ) from exc


def cholesky_solve_batched(chol, rhs):
    """Solve A X = rhs given chol = cholesky(A), batched.

    ``chol`` is (B, M, M) complex lower-triangular, ``rhs`` is (B, M, K)
    complex (K right-hand sides per batch entry).  Forward and backward
    substitution are vectorized over the batch; the row loop is over M,
    which stays small (M <= 64).
    """
    _, m, _ = chol.shape
    y = np.empty_like(rhs)
    for i in range(m):
        acc = rhs[:, i, :].copy()
        if i:
            acc -= np.einsum("bj,bjk->bk", chol[:, i, :i], y[:, :i, :])
        y[:, i, :] = acc / chol[:, i, i][:, None]
    x = np.empty_like(rhs)
    for i in range(m - 1, -1, -1):
        acc = y[:, i, :].copy()
        if i < m - 1:
            acc -= np.einsum(
                "bj,bjk->bk", np.conj(chol[:, i + 1 :, i]), x[:, i + 1 :, :]
            )
        x[:, i, :] = acc / np.conj(chol[:, i, i])[:, None]
    return x
