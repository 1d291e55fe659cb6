"""Channel and power-budget sampling, plus dataset persistence.

Users are dropped area-uniformly in a disc around the base station
(with a small exclusion radius), path loss follows
rho = 1 / (1 + (d/d0)^alpha), small-scale fading is unit-variance
circularly-symmetric complex Gaussian, and the power budget is drawn
uniformly from a dB grid.  Datasets round-trip losslessly through a
line-delimited text format with a JSON header.
"""

import json
from dataclasses import dataclass

import numpy as np

from .metrics import NOISE_POWER

# Sub-stream identifiers for seed derivation.  Test data lives in its own
# namespace so evaluation sets never collide with training streams.
STREAM_INIT = 0
STREAM_TRAIN = 1
STREAM_VAL = 2
STREAM_TEST = 3
STREAM_DATASET = 4

DATASET_VERSION = 1


def derive_rng(seed, stream, *sub):
    """Independent generator for (seed, stream, *sub)."""
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(stream)) + tuple(int(s) for s in sub)))


class DatasetFormatError(ValueError):
    """Malformed dataset file; message carries the offending line number."""


@dataclass(frozen=True)
class ChannelConfig:
    """Cell geometry and fading parameters (distances in meters)."""

    m: int
    k: int
    cell_radius: float = 100.0
    ref_distance: float = 30.0
    pathloss_exp: float = 3.0
    min_bs_distance: float = 1.0
    noise_power: float = NOISE_POWER  # sigma^2, unity in all experiments

    def __post_init__(self):
        if self.m < 1 or self.k < 1:
            raise ValueError("antenna and user counts must be positive")
        if self.pathloss_exp <= 0 or self.ref_distance <= 0:
            raise ValueError("path-loss parameters must be positive")
        if not 0 <= self.min_bs_distance < self.cell_radius:
            raise ValueError("exclusion radius must lie inside the cell")


@dataclass(frozen=True)
class PowerGrid:
    """Finite ascending set of candidate budgets, in dB."""

    levels_db: tuple = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels_db)
        if not levels:
            raise ValueError("power grid must be nonempty")
        if len(set(levels)) != len(levels):
            raise ValueError("power grid levels must be distinct")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("power grid levels must be ascending")
        object.__setattr__(self, "levels_db", levels)

    def __len__(self):
        return len(self.levels_db)

    def linear(self):
        return 10.0 ** (np.asarray(self.levels_db) / 10.0)


@dataclass
class ChannelSample:
    """One CSI draw: split channel rows (K, M) plus a budget in dB."""

    hr: np.ndarray
    hi: np.ndarray
    p_db: float

    @property
    def p_lin(self):
        return 10.0 ** (self.p_db / 10.0)


@dataclass
class ChannelBatch:
    """Stacked samples: hr/hi are (n, K, M), p_db is (n,)."""

    hr: np.ndarray
    hi: np.ndarray
    p_db: np.ndarray

    def __post_init__(self):
        self.hr = np.asarray(self.hr, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.p_db = np.asarray(self.p_db, dtype=np.float64)
        if self.hr.shape != self.hi.shape or self.hr.ndim != 3:
            raise ValueError("hr/hi must be matching (n, K, M) arrays")
        if self.p_db.shape != (self.hr.shape[0],):
            raise ValueError("p_db must have one entry per sample")

    def __len__(self):
        return self.hr.shape[0]

    @property
    def p_lin(self):
        return 10.0 ** (self.p_db / 10.0)

    def sample(self, i):
        return ChannelSample(self.hr[i], self.hi[i], float(self.p_db[i]))

    def subset(self, idx):
        return ChannelBatch(self.hr[idx], self.hi[idx], self.p_db[idx])


def path_loss(distance, cfg):
    """rho = 1 / (1 + (d/d0)^alpha); monotone decreasing, rho(0) = 1."""
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    rho = 1.0 / (1.0 + (d / cfg.ref_distance) ** cfg.pathloss_exp)
    return float(rho) if np.isscalar(distance) else rho


def draw_batch(rng, cfg, grid, n):
    """Draw ``n`` independent (h, P) samples from one generator stream.

    Draw order is fixed (distances, fading, power index) so a (seed,
    cfg, grid) triple fully determines the sequence.
    """
    lo2 = cfg.min_bs_distance**2
    hi2 = cfg.cell_radius**2
    # Area-uniform radius on the annulus [min_bs_distance, cell_radius].
    d = np.sqrt(lo2 + rng.random((n, cfg.k)) * (hi2 - lo2))
    rho = path_loss(d, cfg)
    fading = rng.standard_normal((n, cfg.k, cfg.m, 2)) * np.sqrt(0.5)
    amp = np.sqrt(rho)[:, :, None]
    hr = amp * fading[..., 0]
    hi = amp * fading[..., 1]
    levels = np.asarray(grid.levels_db)
    p_db = levels[rng.integers(0, len(levels), size=n)]
    return ChannelBatch(hr, hi, p_db)


def draw_sample(rng, cfg, grid):
    """Single draw; identical to a batch of one on the same stream."""
    return draw_batch(rng, cfg, grid, 1).sample(0)


def write_dataset(path, batch, grid):
    """Persist a batch as line-delimited text with a JSON header.

    Each record line holds the budget in dB followed by the K*M real
    parts then the K*M imaginary parts (row-major over users), printed
    with 17 significant digits for an exact float64 round-trip.
    """
    if len(batch) == 0:
        raise ValueError("refusing to write an empty dataset")
    n, k, m = batch.hr.shape
    header = {
        "version": DATASET_VERSION,
        "m": m,
        "k": k,
        "grid_db": list(grid.levels_db),
    }
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(n):
            row = [batch.p_db[i]]
            row.extend(batch.hr[i].reshape(-1))
            row.extend(batch.hi[i].reshape(-1))
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_dataset(path):
    """Read a dataset file; returns (ChannelBatch, PowerGrid)."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line 1: bad header: {exc}") from exc
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(
            f"{path}: line 1: unsupported dataset version {header.get('version')!r}"
        )
    try:
        m, k = int(header["m"]), int(header["k"])
        grid = PowerGrid(tuple(header["grid_db"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: line 1: bad header fields: {exc}") from exc
    records = lines[1:]
    if not records:
        raise DatasetFormatError(f"{path}: no records after header")
    want = 1 + 2 * k * m
    hr = np.empty((len(records), k, m))
    hi = np.empty((len(records), k, m))
    p_db = np.empty(len(records))
    for i, line in enumerate(records):
        fields = line.split()
        if len(fields) != want:
            raise DatasetFormatError(
                f"{path}: line {i + 2}: record {i} has {len(fields)} fields, "
                f"expected {want} for K={k}, M={m}"
            )
        try:
            vals = np.array(fields, dtype=np.float64)
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {i + 2}: {exc}") from exc
        p_db[i] = vals[0]
        hr[i] = vals[1 : 1 + k * m].reshape(k, m)
        hi[i] = vals[1 + k * m :].reshape(k, m)
    return ChannelBatch(hr, hi, p_db), grid
