"""Classical beamformers: WMMSE, zero-forcing with water-filling, and
maximum-ratio transmission with an optimized power split.

All solvers work on one sample at a time and return a
:class:`~beamlearn.network.BeamStack`.  Unlike the learned heads, which
meet the sum-power equality by construction, these are allowed to spend
less than the budget when that is optimal.
"""

from dataclasses import dataclass

import numpy as np

from .metrics import NOISE_POWER, sum_rate
from .network import BeamStack


@dataclass(frozen=True)
class WmmseConfig:
    max_iters: int = 500
    rate_tol: float = 1e-5  # bps/Hz change that counts as converged
    bisection_tol: float = 1e-8  # on the spent power, relative to the budget
    zf_start: bool = True  # also ascend from a ZF water-filling start


@dataclass
class WmmseResult:
    beams: BeamStack
    trace: np.ndarray
    converged: bool
    iterations: int


def _rate_c(hc, vc):
    return float(sum_rate(hc.real, hc.imag, vc.real, vc.imag))


def _mrt_equal_power(hc, p_lin):
    k = hc.shape[0]
    norms = np.linalg.norm(hc, axis=1, keepdims=True)
    return np.sqrt(p_lin / k) * hc / norms


def wmmse(hr, hi, p_lin, cfg=WmmseConfig()):
    """Alternating WMMSE updates; returns the best of two deterministic
    ascents (MRT equal-power start, and a ZF water-filling start when
    K <= M).

    Each iteration recomputes the scalar MMSE receivers a_k, the MSE
    weights w_k, and the transmit beams
    v_k = w_k conj(a_k) (sum_j w_j |a_j|^2 h_j h_j^H + mu I)^{-1} h_k
    with mu >= 0 chosen by bisection so the spent power never exceeds
    the budget (mu = 0 when the unconstrained optimum is feasible).
    Block-coordinate ascent makes each sum-rate trace non-decreasing;
    that property is asserted at run time as the correctness anchor.
    The second start exists because the MRT basin occasionally ends
    below the plain ZF rate at high budgets; starting from ZF keeps the
    returned solution at least that good on every instance, while both
    starts stay deterministic for reproducible benchmarks.
    """
    hr = np.asarray(hr, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if not p_lin > 0:
        raise ValueError("power budget must be positive")
    hc = hr + 1j * hi
    k, m = hc.shape
    result = _wmmse_ascent(hc, _mrt_equal_power(hc, p_lin), p_lin, cfg)
    if cfg.zf_start and k <= m:
        try:
            zf = zf_waterfilling(hr, hi, p_lin)
        except ValueError:
            zf = None
        if zf is not None:
            alt = _wmmse_ascent(hc, zf.vr + 1j * zf.vi, p_lin, cfg)
            if alt.trace[-1] > result.trace[-1]:
                result = alt
    return result


def _wmmse_ascent(hc, vc, p_lin, cfg):
    trace = [_rate_c(hc, vc)]
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        cross = hc.conj() @ vc.T  # cross[k, j] = h_k^H v_j
        total = np.sum(np.abs(cross) ** 2, axis=1) + NOISE_POWER
        a = np.diagonal(cross) / total
        mse = 1.0 - np.real(np.conj(a) * np.diagonal(cross))
        w = 1.0 / mse
        coef = w * np.abs(a) ** 2
        gram = hc.T @ (coef[:, None] * hc.conj())
        lam, basis = np.linalg.eigh(gram)
        lam = np.clip(lam, 0.0, None)
        beam_coef = w * np.conj(a)
        proj = basis.conj().T @ hc.T  # (M, K): eigenbasis projections of each h_k
        weights2 = np.abs(proj) ** 2 * (np.abs(beam_coef) ** 2)[None, :]

        def spent_power(mu):
            return float(np.sum(weights2 / (lam[:, None] + mu) ** 2))

        mu = 0.0
        if lam[0] <= 1e-12 * max(lam[-1], 1.0) or spent_power(0.0) > p_lin:
            hi_mu = np.sqrt(weights2.sum() / p_lin)
            while spent_power(hi_mu) > p_lin:
                hi_mu *= 2.0
            lo_mu = 0.0
            for _ in range(200):
                if hi_mu - lo_mu <= 1e-15 * max(hi_mu, 1.0):
                    break
                mid = 0.5 * (lo_mu + hi_mu)
                if spent_power(mid) > p_lin:
                    lo_mu = mid
                else:
                    hi_mu = mid
            mu = hi_mu  # feasible side of the bracket
        solved = basis @ (proj / (lam + mu)[:, None])
        vc = beam_coef[:, None] * solved.T
        rate = _rate_c(hc, vc)
        if rate < trace[-1] - 1e-9:
            raise ArithmeticError(
                f"WMMSE trace decreased by {trace[-1] - rate:.3e} at iteration {iterations}"
            )
        trace.append(rate)
        if abs(trace[-1] - trace[-2]) < cfg.rate_tol:
            converged = True
            break
    beams = BeamStack(
        np.ascontiguousarray(vc.real), np.ascontiguousarray(vc.imag), float(p_lin)
    )
    return WmmseResult(
        beams=beams, trace=np.array(trace), converged=converged, iterations=iterations
    )


def _waterfill(gains, p_lin):
    """Powers max(0, level - 1/g) summing to the budget."""
    inv = 1.0 / gains
    order = np.argsort(inv)
    inv_sorted = inv[order]
    n_active = len(gains)
    for n in range(len(gains), 0, -1):
        level = (p_lin + inv_sorted[:n].sum()) / n
        if level > inv_sorted[n - 1]:
            n_active = n
            break
    powers = np.zeros_like(gains)
    level = (p_lin + inv_sorted[:n_active].sum()) / n_active
    powers[order[:n_active]] = level - inv_sorted[:n_active]
    return powers


def zf_waterfilling(hr, hi, p_lin):
    """Pseudo-inverse directions with water-filled powers.

    Requires K <= M and a full-row-rank channel; the result has zero
    inter-user interference, so the power split is exactly the single
    water-filling problem over the effective gains.
    """
    hr = np.asarray(hr, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    hc = hr + 1j * hi
    k, m = hc.shape
    if k > m:
        raise ValueError(f"zero-forcing needs K <= M, got K={k}, M={m}")
    hmat = hc.conj()  # rows are h_k^H
    gram = hmat @ hmat.conj().T
    try:
        pinv_cols = np.linalg.solve(gram, hmat).conj().T
    except np.linalg.LinAlgError as exc:
        raise ValueError("rank-deficient channel matrix") from exc
    if not np.all(np.isfinite(pinv_cols)):
        raise ValueError("rank-deficient channel matrix")
    d = pinv_cols / np.linalg.norm(pinv_cols, axis=0, keepdims=True)
    gains = np.abs(np.einsum("km,mk->k", hc.conj(), d)) ** 2
    powers = _waterfill(gains, p_lin)
    vc = (np.sqrt(powers)[None, :] * d).T
    return BeamStack(
        np.ascontiguousarray(vc.real), np.ascontiguousarray(vc.imag), float(p_lin)
    )


def _project_power_set(p, p_lin):
    """Euclidean projection onto {p >= 0, sum(p) <= budget}."""
    clipped = np.clip(p, 0.0, None)
    if clipped.sum() <= p_lin:
        return clipped
    u = np.sort(p)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, len(p) + 1)
    rho = np.max(j[u + (p_lin - css) / j > 0])
    tau = (css[rho - 1] - p_lin) / rho
    return np.clip(p - tau, 0.0, None)


def mrt_poweropt(hr, hi, p_lin, restarts=5, iters=200, seed=0):
    """Channel-aligned directions with a projected-gradient power split.

    The power objective is nonconvex, so the ascent restarts from an
    equal split, an interference-blind water-filling, and random points
    on the budget simplex; the best run wins.
    """
    hr = np.asarray(hr, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    hc = hr + 1j * hi
    k = hc.shape[0]
    d = hc / np.linalg.norm(hc, axis=1, keepdims=True)
    cross = np.abs(hc.conj() @ d.T) ** 2  # cross[k, j] = |h_k^H d_j|^2
    diag = np.diagonal(cross)

    def objective(p):
        total = cross @ p + NOISE_POWER
        interf = total - diag * p
        return float(np.sum(np.log2(total) - np.log2(interf)))

    def gradient(p):
        total = cross @ p + NOISE_POWER
        interf = total - diag * p
        g = cross.T @ (1.0 / total) - cross.T @ (1.0 / interf) + diag / interf
        return g / np.log(2.0)

    rng = np.random.default_rng(seed)
    starts = [np.full(k, p_lin / k), _waterfill(diag, p_lin)]
    while len(starts) < restarts:
        starts.append(rng.dirichlet(np.ones(k)) * p_lin)
    best_p, best_val = None, -np.inf
    for p in starts[:restarts]:
        p = _project_power_set(np.asarray(p, dtype=np.float64), p_lin)
        val = objective(p)
        step = p_lin
        for _ in range(iters):
            g = gradient(p)
            improved = False
            t = step
            while t > 1e-14 * p_lin:
                cand = _project_power_set(p + t * g, p_lin)
                cand_val = objective(cand)
                if cand_val > val:
                    p, val = cand, cand_val
                    step = t * 2.0
                    improved = True
                    break
                t *= 0.5
            if not improved:
                break
        if val > best_val:
            best_p, best_val = p, val
    vc = np.sqrt(best_p)[:, None] * d
    return BeamStack(
        np.ascontiguousarray(vc.real), np.ascontiguousarray(vc.imag), float(p_lin)
    )
