"""Trunk network and output heads mapping (h, P) to feasible beams.

The trunk is a fully-connected stack (affine, batch norm, ReLU per
hidden layer) fed with the split CSI plus the budget in dB.  Three
output activations turn the final pre-activation into a beam stack that
meets the sum-power equality by construction:

* ``dbl``  - predict all 2MK beam weights, rescale to the budget;
* ``fl``   - predict 2K logits, scaled-softmax them into downlink and
  dual uplink powers, recover directions through the regularized
  channel Gram solve;
* ``sfl``  - predict K logits and reuse the downlink powers as the dual
  uplink powers before the same recovery.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .autodiff import Tape, Var
from .channel import STREAM_INIT, derive_rng
from .complexops import norm2_batched
from .metrics import NOISE_POWER

HEADS = ("dbl", "fl", "sfl")
_HEAD_CODE = {name: i for i, name in enumerate(HEADS)}

PARAMS_MAGIC = b"UBFP"
PARAMS_VERSION = 1


class DegenerateBeamError(ValueError):
    """All-zero pre-activation leaves the beam direction undefined."""


class ZeroChannelError(ValueError):
    """A user channel vector is identically zero."""


class ParamsFormatError(ValueError):
    """Unreadable or inconsistent parameter file."""


class HeadMismatchError(ParamsFormatError):
    """Loaded parameter file belongs to a different head."""


@dataclass
class NetworkParams:
    """All trainable arrays plus batch-norm running statistics."""

    head: str
    m: int
    k: int
    hidden: tuple
    power_input: bool
    arrays: dict
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99
    fixed_p_db: float = None  # training budget of a non-universal model
    fingerprint: str = ""

    @property
    def input_dim(self):
        return 2 * self.m * self.k + (1 if self.power_input else 0)

    @property
    def output_dim(self):
        return head_output_dim(self.head, self.m, self.k)

    @property
    def n_layers(self):
        return len(self.hidden)

    def trainable_keys(self):
        keys = []
        for l in range(1, self.n_layers + 1):
            keys += [f"w{l}", f"b{l}", f"bn{l}_gain", f"bn{l}_shift"]
        keys += [f"w{self.n_layers + 1}", f"b{self.n_layers + 1}"]
        return keys

    def copy(self):
        return NetworkParams(
            head=self.head,
            m=self.m,
            k=self.k,
            hidden=self.hidden,
            power_input=self.power_input,
            arrays={k: v.copy() for k, v in self.arrays.items()},
            bn_eps=self.bn_eps,
            bn_momentum=self.bn_momentum,
            fixed_p_db=self.fixed_p_db,
            fingerprint=self.fingerprint,
        )


def head_output_dim(head, m, k):
    if head == "dbl":
        return 2 * m * k
    if head == "fl":
        return 2 * k
    if head == "sfl":
        return k
    raise ValueError(f"unknown head {head!r}, expected one of {HEADS}")


def init_params(m, k, head, seed, hidden=(320,) * 5, power_input=True):
    """Glorot-uniform weights, zero biases, unit batch-norm statistics."""
    head_output_dim(head, m, k)  # validates head
    hidden = tuple(int(w) for w in hidden)
    if not hidden:
        raise ValueError("at least one hidden layer is required")
    rng = derive_rng(seed, STREAM_INIT)
    dims = [2 * m * k + (1 if power_input else 0), *hidden, head_output_dim(head, m, k)]
    arrays = {}
    for l in range(1, len(dims)):
        fan_in, fan_out = dims[l - 1], dims[l]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"w{l}"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        arrays[f"b{l}"] = np.zeros(fan_out)
        if l <= len(hidden):
            arrays[f"bn{l}_gain"] = np.ones(fan_out)
            arrays[f"bn{l}_shift"] = np.zeros(fan_out)
            arrays[f"bn{l}_mean"] = np.zeros(fan_out)
            arrays[f"bn{l}_var"] = np.ones(fan_out)
    return NetworkParams(
        head=head,
        m=m,
        k=k,
        hidden=hidden,
        power_input=power_input,
        arrays=arrays,
    )


def build_input(hr, hi, p_db, power_input=True):
    """Feature layout: re of all users, im of all users, then P in dB.

    ``hr``/``hi`` are (B, K, M); the inverse is :func:`split_input`.
    """
    hr = np.asarray(hr, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    b = hr.shape[0]
    cols = [hr.reshape(b, -1), hi.reshape(b, -1)]
    if power_input:
        cols.append(np.asarray(p_db, dtype=np.float64).reshape(b, 1))
    x0 = np.concatenate(cols, axis=1)
    if not np.all(np.isfinite(x0)):
        raise ValueError("input feature contains non-finite entries")
    return x0


def split_input(x0, m, k):
    """Inverse of :func:`build_input` (CSI part plus dB column if present)."""
    x0 = np.asarray(x0, dtype=np.float64)
    mk = m * k
    hr = x0[:, :mk].reshape(-1, k, m)
    hi = x0[:, mk : 2 * mk].reshape(-1, k, m)
    p_db = x0[:, 2 * mk] if x0.shape[1] > 2 * mk else None
    return hr, hi, p_db


@dataclass
class BeamStack:
    """K beamforming rows of length M (split parts) under one budget."""

    vr: np.ndarray
    vi: np.ndarray
    power_budget: float

    def total_power(self):
        return float(np.sum(self.vr**2 + self.vi**2))

    def power_defect(self):
        """Relative deviation from the sum-power equality."""
        return abs(self.total_power() - self.power_budget) / self.power_budget


@dataclass
class DualityFeature:
    """Downlink powers p and dual uplink powers q on the scaled simplex."""

    p: np.ndarray
    q: np.ndarray


@dataclass
class BeamOutput:
    """Batched head output; entries are tape Vars (use ``.value``)."""

    vr: Var
    vi: Var
    p: Var = None
    q: Var = None
    dr: Var = None
    di: Var = None
    bn_stats: list = field(default_factory=list)


def _weight(weights, params, name):
    if weights is not None and name in weights:
        return weights[name]
    return params.arrays[name]


def _batchnorm_eval(tape, x, gain, shift, run_mean, run_var, eps):
    # Composed from scalar primitives so taped eval stays differentiable.
    inv = 1.0 / np.sqrt(run_var + eps)
    xhat = tape.mul(tape.sub(x, run_mean), inv)
    return tape.add(tape.mul(gain, xhat), shift)


def forward_trunk(params, x0, mode="eval", tape=None, weights=None):
    """Run the hidden stack and output affine; returns (u, bn_stats).

    ``bn_stats`` holds per-layer (batch_mean, batch_var) in train mode
    for the caller's running-stat update.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    tape = tape if tape is not None else Tape(record=False)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[1] != params.input_dim:
        raise ValueError(
            f"input must be (B, {params.input_dim}), got {x0.shape}"
        )
    if mode == "train" and x0.shape[0] < 2:
        raise ValueError("train mode needs a batch of at least 2 for batch norm")
    x = x0
    bn_stats = []
    for l in range(1, params.n_layers + 1):
        x = tape.affine(x, _weight(weights, params, f"w{l}"), _weight(weights, params, f"b{l}"))
        gain = _weight(weights, params, f"bn{l}_gain")
        shift = _weight(weights, params, f"bn{l}_shift")
        if mode == "train":
            x, mu, var = tape.batchnorm(x, gain, shift, params.bn_eps)
            bn_stats.append((mu, var))
        else:
            x = _batchnorm_eval(
                tape,
                x,
                gain,
                shift,
                params.arrays[f"bn{l}_mean"],
                params.arrays[f"bn{l}_var"],
                params.bn_eps,
            )
        x = tape.relu(x)
    out = params.n_layers + 1
    u = tape.affine(x, _weight(weights, params, f"w{out}"), _weight(weights, params, f"b{out}"))
    return u, bn_stats


def scaled_softmax(z, p):
    """Plain-array scaled softmax: positive entries summing to p."""
    return Tape(record=False).scaled_softmax(z, p).value


def _head_dbl(tape, u, p_lin, m, k):
    b = u.value.shape[0]
    mk = m * k
    ur = tape.reshape(tape.getitem(u, (slice(None), slice(0, mk))), (b, k, m))
    ui = tape.reshape(tape.getitem(u, (slice(None), slice(mk, 2 * mk))), (b, k, m))
    total = tape.sum(tape.norm2(ur, ui), axis=1)
    if np.any(total.value <= 0.0):
        raise DegenerateBeamError("all-zero pre-activation: beam direction undefined")
    scale = tape.reshape(tape.sqrt(tape.div(p_lin, total)), (b, 1, 1))
    return BeamOutput(vr=tape.mul(ur, scale), vi=tape.mul(ui, scale))


def _recover_beams(tape, p, q, hr, hi):
    """Duality recovery: directions from the Gram solve, scaled by sqrt(p)."""
    if np.any(norm2_batched(hr, hi) <= 0.0):
        raise ZeroChannelError("zero channel vector: beam recovery undefined")
    b, k, _ = hr.shape
    ar, ai = tape.gram(q, hr, hi, NOISE_POWER)
    xr, xi = tape.hpd_solve(ar, ai, hr, hi)
    inv_norm = tape.reshape(tape.div(1.0, tape.sqrt(tape.norm2(xr, xi))), (b, k, 1))
    dr = tape.mul(xr, inv_norm)
    di = tape.mul(xi, inv_norm)
    amp = tape.reshape(tape.sqrt(p), (b, k, 1))
    return tape.mul(dr, amp), tape.mul(di, amp), dr, di


def _head_fl(tape, u, hr, hi, p_lin, k):
    up = tape.getitem(u, (slice(None), slice(0, k)))
    uq = tape.getitem(u, (slice(None), slice(k, 2 * k)))
    p = tape.scaled_softmax(up, p_lin)
    q = tape.scaled_softmax(uq, p_lin)
    vr, vi, dr, di = _recover_beams(tape, p, q, hr, hi)
    return BeamOutput(vr=vr, vi=vi, p=p, q=q, dr=dr, di=di)


def _head_sfl(tape, u, hr, hi, p_lin):
    p = tape.scaled_softmax(u, p_lin)
    vr, vi, dr, di = _recover_beams(tape, p, p, hr, hi)
    return BeamOutput(vr=vr, vi=vi, p=p, q=p, dr=dr, di=di)


def forward_beams(params, hr, hi, p_db, mode="eval", tape=None, weights=None):
    """Full forward pass from channel arrays to a feasible beam batch."""
    tape = tape if tape is not None else Tape(record=False)
    hr = np.asarray(hr, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    p_db = np.asarray(p_db, dtype=np.float64)
    if hr.shape[1:] != (params.k, params.m):
        raise ValueError(
            f"channel shape {hr.shape[1:]} does not match model (K={params.k}, M={params.m})"
        )
    p_lin = 10.0 ** (p_db / 10.0)
    x0 = build_input(hr, hi, p_db, params.power_input)
    u, bn_stats = forward_trunk(params, x0, mode=mode, tape=tape, weights=weights)
    if params.head == "dbl":
        out = _head_dbl(tape, u, p_lin, params.m, params.k)
    elif params.head == "fl":
        out = _head_fl(tape, u, hr, hi, p_lin, params.k)
    else:
        out = _head_sfl(tape, u, hr, hi, p_lin)
    out.bn_stats = bn_stats
    return out


def predict_single(params, hr, hi, p_db):
    """Lean single-sample inference (plain numpy, no tape).

    This is the path timed by the benchmark harness; it mirrors the
    eval-mode batched forward bit for bit apart from matvec shapes.
    """
    a = params.arrays
    feats = [np.ravel(hr), np.ravel(hi)]
    if params.power_input:
        feats.append(np.array([p_db]))
    x = np.concatenate(feats)
    for l in range(1, params.n_layers + 1):
        x = a[f"w{l}"] @ x + a[f"b{l}"]
        inv = 1.0 / np.sqrt(a[f"bn{l}_var"] + params.bn_eps)
        x = a[f"bn{l}_gain"] * ((x - a[f"bn{l}_mean"]) * inv) + a[f"bn{l}_shift"]
        x = np.maximum(x, 0.0)
    out = params.n_layers + 1
    u = a[f"w{out}"] @ x + a[f"b{out}"]
    p_lin = 10.0 ** (p_db / 10.0)
    m, k = params.m, params.k
    if params.head == "dbl":
        ur = u[: m * k].reshape(k, m)
        ui = u[m * k :].reshape(k, m)
        total = np.sum(ur * ur + ui * ui)
        if total <= 0.0:
            raise DegenerateBeamError("all-zero pre-activation")
        s = np.sqrt(p_lin / total)
        return ur * s, ui * s
    if params.head == "fl":
        p = scaled_softmax(u[None, :k], np.array([p_lin]))[0]
        q = scaled_softmax(u[None, k:], np.array([p_lin]))[0]
    else:
        p = scaled_softmax(u[None, :], np.array([p_lin]))[0]
        q = p
    hc = hr + 1j * hi
    # sum_k q_k h_k h_k^H with h_k as rows of hc
    gram = NOISE_POWER * np.eye(m, dtype=np.complex128) + hc.T @ (q[:, None] * hc.conj())
    factor = scipy.linalg.cho_factor(gram, lower=True)
    x = scipy.linalg.cho_solve(factor, hc.T).T
    d = x / np.linalg.norm(x, axis=1, keepdims=True)
    v = np.sqrt(p)[:, None] * d
    return np.ascontiguousarray(v.real), np.ascontiguousarray(v.imag)


# -- single-sample head wrappers (contract-level API) ----------------------


def dbl_beams(ur, ui, p_lin):
    """Rescale predicted complex rows to meet the budget exactly."""
    out = _head_dbl(Tape(record=False), Var(np.concatenate([np.ravel(ur), np.ravel(ui)])[None, :]),
                    np.array([p_lin]), np.shape(ur)[1], np.shape(ur)[0])
    return BeamStack(out.vr.value[0], out.vi.value[0], float(p_lin))


def fl_beams(u, hr, hi, p_lin):
    """Duality head for one sample; returns (BeamStack, DualityFeature)."""
    k = np.shape(hr)[0]
    out = _head_fl(Tape(record=False), Var(np.asarray(u, dtype=np.float64)[None, :]),
                   np.asarray(hr, dtype=np.float64)[None], np.asarray(hi, dtype=np.float64)[None],
                   np.array([p_lin]), k)
    return (
        BeamStack(out.vr.value[0], out.vi.value[0], float(p_lin)),
        DualityFeature(out.p.value[0], out.q.value[0]),
    )


def sfl_beams(u, hr, hi, p_lin):
    """Simplified duality head (q = p) for one sample."""
    out = _head_sfl(Tape(record=False), Var(np.asarray(u, dtype=np.float64)[None, :]),
                    np.asarray(hr, dtype=np.float64)[None], np.asarray(hi, dtype=np.float64)[None],
                    np.array([p_lin]))
    return (
        BeamStack(out.vr.value[0], out.vi.value[0], float(p_lin)),
        DualityFeature(out.p.value[0], out.q.value[0]),
    )


# -- parameter persistence --------------------------------------------------
#
# Binary little-endian layout:
#   magic "UBFP" | u16 version | u8 head | u8 power_input | u32 m, k, L
#   | u32 widths[L] | f64 bn_eps | f64 bn_momentum | f64 fixed_p_db (NaN if universal)
#   | u32 fingerprint_len | fingerprint utf-8
#   | u32 n_arrays | per array: u16 name_len | name | u8 ndim
#     | u32 dims[ndim] | f64 data


def save_params(params, path):
    buf = io.BytesIO()
    buf.write(PARAMS_MAGIC)
    buf.write(struct.pack("<HBB", PARAMS_VERSION, _HEAD_CODE[params.head], int(params.power_input)))
    buf.write(struct.pack("<III", params.m, params.k, params.n_layers))
    buf.write(struct.pack(f"<{params.n_layers}I", *params.hidden))
    fixed = np.nan if params.fixed_p_db is None else float(params.fixed_p_db)
    buf.write(struct.pack("<ddd", params.bn_eps, params.bn_momentum, fixed))
    fp = params.fingerprint.encode("utf-8")
    buf.write(struct.pack("<I", len(fp)))
    buf.write(fp)
    buf.write(struct.pack("<I", len(params.arrays)))
    for name, arr in params.arrays.items():
        nm = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nm)))
        buf.write(nm)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.data):
            raise ParamsFormatError(
                f"{self.path}: truncated parameter file at offset {self.off}"
            )
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_params(path, expect_head=None):
    """Load a parameter file; optionally require a specific head kind."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    if rd.take(4) != PARAMS_MAGIC:
        raise ParamsFormatError(f"{path}: bad magic, not a parameter file")
    version, head_code, power_input = rd.unpack("<HBB")
    if version != PARAMS_VERSION:
        raise ParamsFormatError(f"{path}: unsupported version {version}")
    if head_code >= len(HEADS):
        raise ParamsFormatError(f"{path}: unknown head code {head_code}")
    head = HEADS[head_code]
    if expect_head is not None and head != expect_head:
        raise HeadMismatchError(
            f"{path}: file holds a {head!r} model, expected {expect_head!r}"
        )
    m, k, n_layers = rd.unpack("<III")
    hidden = rd.unpack(f"<{n_layers}I")
    bn_eps, bn_momentum, fixed = rd.unpack("<ddd")
    (fp_len,) = rd.unpack("<I")
    fingerprint = rd.take(fp_len).decode("utf-8")
    (n_arrays,) = rd.unpack("<I")
    arrays = {}
    for _ in range(n_arrays):
        (nm_len,) = rd.unpack("<H")
        name = rd.take(nm_len).decode("utf-8")
        (ndim,) = rd.unpack("<B")
        dims = rd.unpack(f"<{ndim}I")
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(rd.take(8 * count), dtype="<f8").reshape(dims)
        arrays[name] = np.array(data, dtype=np.float64)
    params = NetworkParams(
        head=head,
        m=m,
        k=k,
        hidden=hidden,
        power_input=bool(power_input),
        arrays=arrays,
        bn_eps=bn_eps,
        bn_momentum=bn_momentum,
        fixed_p_db=None if np.isnan(fixed) else fixed,
        fingerprint=fingerprint,
    )
    reference = init_params(m, k, head, seed=0, hidden=hidden, power_input=bool(power_input))
    if set(arrays) != set(reference.arrays):
        raise ParamsFormatError(f"{path}: parameter set does not match layer metadata")
    for name, ref in reference.arrays.items():
        if arrays[name].shape != ref.shape:
            raise ParamsFormatError(
                f"{path}: array {name!r} has shape {arrays[name].shape}, "
                f"expected {ref.shape}"
            )
    return params
