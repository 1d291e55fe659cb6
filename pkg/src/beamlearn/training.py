"""Unsupervised training: mini-batch Adam ascent on the average sum rate.

Each step draws a fresh (h, P) batch (or resamples a pinned dataset),
runs the taped train-mode forward, backpropagates the negative mean sum
rate, clips the global gradient norm, applies a bias-corrected Adam
update, and refreshes the batch-norm running statistics outside the
tape.  No labels are involved anywhere: the loop consumes only channel
draws and budgets.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .channel import (
    STREAM_TRAIN,
    STREAM_VAL,
    ChannelConfig,
    PowerGrid,
    derive_rng,
    draw_batch,
)
from .metrics import NOISE_POWER, sum_rate
from .network import forward_beams, init_params, save_params


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; message names the offending batch sample."""


@dataclass
class TrainConfig:
    head: str = "sfl"
    m: int = 4
    k: int = 4
    hidden: tuple = (320,) * 5
    batch_size: int = 256
    steps: int = 20000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    seed: int = 0
    grid: PowerGrid = field(default_factory=PowerGrid)
    channel: ChannelConfig = None
    fixed_p_db: float = None  # train a non-universal model at this budget
    eval_every: int = 1000
    val_per_level: int = 1000
    dataset: object = None  # pinned ChannelBatch instead of fresh draws
    checkpoint_path: str = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for batch norm")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.channel is None:
            self.channel = ChannelConfig(m=self.m, k=self.k)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def init_adam(params):
    keys = params.trainable_keys()
    return AdamState(
        m={k: np.zeros_like(params.arrays[k]) for k in keys},
        v={k: np.zeros_like(params.arrays[k]) for k in keys},
    )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place on ``params.arrays``."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for key, g in grads.items():
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params.arrays[key] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def batch_loss(tape, params, weights, hr, hi, p_db):
    """Negative mean sum rate of the head output, fully on the tape."""
    out = forward_beams(params, hr, hi, p_db, mode="train", tape=tape, weights=weights)
    b, k, m = hr.shape
    sig_r, sig_i = tape.hdot(hr, hi, out.vr, out.vi)
    signal = tape.add(tape.square(sig_r), tape.square(sig_i))
    vr4 = tape.reshape(out.vr, (b, 1, k, m))
    vi4 = tape.reshape(out.vi, (b, 1, k, m))
    cr, ci = tape.hdot(hr[:, :, None, :], hi[:, :, None, :], vr4, vi4)
    received = tape.sum(tape.add(tape.square(cr), tape.square(ci)), axis=2)
    denom = tape.add(tape.sub(received, signal), NOISE_POWER)
    rates = tape.log2(tape.add(tape.div(signal, denom), 1.0))
    per_sample = tape.sum(rates, axis=1)
    loss = tape.neg(tape.mean(per_sample))
    if not np.isfinite(loss.value):
        bad = np.flatnonzero(~np.isfinite(per_sample.value))
        idx = int(bad[0]) if bad.size else -1
        raise TrainingDivergedError(f"non-finite loss (first bad sample index {idx})")
    return loss, out, per_sample


def _check_power_equality(out, p_lin, n_check=4):
    vr = out.vr.value[:n_check]
    vi = out.vi.value[:n_check]
    spent = np.sum(vr * vr + vi * vi, axis=(1, 2))
    budget = p_lin[: vr.shape[0]]
    defect = np.abs(spent - budget) / budget
    if np.any(defect > 1e-9):
        raise RuntimeError(
            f"beam stack violates the sum-power equality (defect {defect.max():.3e})"
        )


def config_fingerprint(cfg):
    blob = json.dumps(
        {
            "head": cfg.head,
            "m": cfg.m,
            "k": cfg.k,
            "hidden": list(cfg.hidden),
            "batch_size": cfg.batch_size,
            "steps": cfg.steps,
            "learning_rate": cfg.learning_rate,
            "seed": cfg.seed,
            "grid": list(cfg.grid.levels_db),
            "fixed_p_db": cfg.fixed_p_db,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def make_validation_sets(cfg):
    """Frozen per-level channel sets from the validation seed namespace."""
    sets = []
    for i, level in enumerate(cfg.grid.levels_db):
        rng = derive_rng(cfg.seed, STREAM_VAL, i)
        sets.append(draw_batch(rng, cfg.channel, PowerGrid((level,)), cfg.val_per_level))
    return sets


def evaluate_params(params, batch, chunk=512):
    """Mean sum rate of a model over a batch, eval-mode forward."""
    vals = []
    for i in range(0, len(batch), chunk):
        out = forward_beams(
            params, batch.hr[i : i + chunk], batch.hi[i : i + chunk], batch.p_db[i : i + chunk]
        )
        vals.append(sum_rate(batch.hr[i : i + chunk], batch.hi[i : i + chunk],
                             out.vr.value, out.vi.value))
    return float(np.mean(np.concatenate(vals)))


def _log_header(grid):
    cols = ["step", "loss"] + [f"val_sr_p{lv:g}" for lv in grid.levels_db]
    return ",".join(cols)


def train_loop(cfg, log_path=None):
    """Run the full training schedule; returns (params, log rows).

    Log rows are emitted every ``eval_every`` steps and at the last
    step: (step, train loss, mean validation sum rate per grid level).
    The run is bit-reproducible from (cfg, seed).
    """
    power_input = cfg.fixed_p_db is None
    params = init_params(
        cfg.m, cfg.k, cfg.head, cfg.seed, hidden=cfg.hidden, power_input=power_input
    )
    params.fixed_p_db = cfg.fixed_p_db
    params.fingerprint = config_fingerprint(cfg)
    state = init_adam(params)
    data_rng = derive_rng(cfg.seed, STREAM_TRAIN)
    data_grid = cfg.grid if power_input else PowerGrid((cfg.fixed_p_db,))
    val_sets = make_validation_sets(cfg)
    trainable = params.trainable_keys()
    momentum = params.bn_momentum
    rows = []
    for step in range(1, cfg.steps + 1):
        if cfg.dataset is not None:
            idx = data_rng.integers(0, len(cfg.dataset), size=cfg.batch_size)
            batch = cfg.dataset.subset(idx)
        else:
            batch = draw_batch(data_rng, cfg.channel, data_grid, cfg.batch_size)
        tape = Tape()
        weights = {name: tape.param(params.arrays[name], name) for name in trainable}
        loss, out, _ = batch_loss(tape, params, weights, batch.hr, batch.hi, batch.p_db)
        _check_power_equality(out, batch.p_lin)
        grads = tape.backward(loss)
        clip_global_norm(grads, cfg.clip_norm)
        adam_step(
            params, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps
        )
        for l, (mu, var) in enumerate(out.bn_stats, start=1):
            params.arrays[f"bn{l}_mean"] *= momentum
            params.arrays[f"bn{l}_mean"] += (1.0 - momentum) * mu
            params.arrays[f"bn{l}_var"] *= momentum
            params.arrays[f"bn{l}_var"] += (1.0 - momentum) * var
        if step % cfg.eval_every == 0 or step == cfg.steps:
            vals = [evaluate_params(params, vs) for vs in val_sets]
            rows.append((step, float(loss.value), *vals))
    if log_path is not None:
        with open(log_path, "w", encoding="ascii") as fh:
            fh.write(_log_header(cfg.grid) + "\n")
            for row in rows:
                fh.write(",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in row) + "\n")
    if cfg.checkpoint_path is not None:
        save_params(params, cfg.checkpoint_path)
    return params, rows
