"""Scikit-learn style estimators wrapping the trainer and the classical
solvers, so the beamformers compose with pipelines and model selection.

``fit`` is unsupervised: the universal model trains against fresh
channel draws (or a pinned dataset passed as ``X``); the classical
solvers need no fitting at all.  ``predict`` returns complex beam
stacks of shape (n, K, M); ``score`` is the mean achieved sum rate.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .baselines import WmmseConfig, mrt_poweropt, wmmse, zf_waterfilling
from .channel import PowerGrid
from .metrics import sum_rate
from .network import forward_beams
from .training import TrainConfig, train_loop
from .validation import as_channel_batch


class _ChannelPredictor(BaseEstimator):
    """Shared predict/score plumbing over (h, P) inputs."""

    def _beams(self, batch):
        raise NotImplementedError

    def predict(self, X):
        """Beamforming vectors for each sample, complex (n, K, M)."""
        batch = as_channel_batch(X, self.m, self.k)
        vr, vi = self._beams(batch)
        return vr + 1j * vi

    def score(self, X, y=None):
        """Mean sum rate (bps/Hz) achieved on the given samples."""
        batch = as_channel_batch(X, self.m, self.k)
        vr, vi = self._beams(batch)
        return float(np.mean(sum_rate(batch.hr, batch.hi, vr, vi)))


class UniversalBeamformer(_ChannelPredictor):
    """Deep beamformer trained once for every budget on the power grid.

    Parameters mirror the training configuration; ``fixed_power_db``
    switches to the non-universal variant that drops the power input
    feature and trains at a single budget.
    """

    def __init__(
        self,
        head="sfl",
        m=4,
        k=4,
        hidden_width=320,
        hidden_layers=5,
        steps=20000,
        batch_size=256,
        learning_rate=1e-3,
        power_grid_db=(0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0),
        fixed_power_db=None,
        eval_every=1000,
        val_per_level=1000,
        seed=0,
    ):
        self.head = head
        self.m = m
        self.k = k
        self.hidden_width = hidden_width
        self.hidden_layers = hidden_layers
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.power_grid_db = power_grid_db
        self.fixed_power_db = fixed_power_db
        self.eval_every = eval_every
        self.val_per_level = val_per_level
        self.seed = seed

    def _train_config(self, dataset=None):
        return TrainConfig(
            head=self.head,
            m=self.m,
            k=self.k,
            hidden=(self.hidden_width,) * self.hidden_layers,
            batch_size=self.batch_size,
            steps=self.steps,
            learning_rate=self.learning_rate,
            seed=self.seed,
            grid=PowerGrid(tuple(self.power_grid_db)),
            fixed_p_db=self.fixed_power_db,
            eval_every=self.eval_every,
            val_per_level=self.val_per_level,
            dataset=dataset,
        )

    def fit(self, X=None, y=None):
        """Train the network; ``X`` optionally pins a training dataset."""
        dataset = None
        if X is not None:
            dataset = as_channel_batch(X, self.m, self.k)
        self.params_, self.log_ = train_loop(self._train_config(dataset))
        return self

    def _beams(self, batch):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit() before predict()/score()")
        out = forward_beams(self.params_, batch.hr, batch.hi, batch.p_db)
        return out.vr.value, out.vi.value


class _SolverBeamformer(_ChannelPredictor):
    """Base for the per-sample classical solvers (fitting is a no-op)."""

    def fit(self, X=None, y=None):
        return self

    def _solve_one(self, hr, hi, p_lin):
        raise NotImplementedError

    def _beams(self, batch):
        n, k, m = batch.hr.shape
        vr = np.empty((n, k, m))
        vi = np.empty((n, k, m))
        p_lin = batch.p_lin
        for i in range(n):
            stack = self._solve_one(batch.hr[i], batch.hi[i], p_lin[i])
            vr[i] = stack.vr
            vi[i] = stack.vi
        return vr, vi


class WmmseBeamformer(_SolverBeamformer):
    """Locally optimal alternating solver (the benchmark ceiling)."""

    def __init__(self, m=4, k=4, max_iters=500, rate_tol=1e-5, bisection_tol=1e-8):
        self.m = m
        self.k = k
        self.max_iters = max_iters
        self.rate_tol = rate_tol
        self.bisection_tol = bisection_tol

    def _solve_one(self, hr, hi, p_lin):
        cfg = WmmseConfig(
            max_iters=self.max_iters,
            rate_tol=self.rate_tol,
            bisection_tol=self.bisection_tol,
        )
        return wmmse(hr, hi, p_lin, cfg).beams


class ZfBeamformer(_SolverBeamformer):
    """Zero-forcing directions with water-filled powers."""

    def __init__(self, m=4, k=4):
        self.m = m
        self.k = k

    def _solve_one(self, hr, hi, p_lin):
        return zf_waterfilling(hr, hi, p_lin)


class MrtBeamformer(_SolverBeamformer):
    """Channel-aligned directions with an optimized power split."""

    def __init__(self, m=4, k=4, restarts=5, iters=200, seed=0):
        self.m = m
        self.k = k
        self.restarts = restarts
        self.iters = iters
        self.seed = seed

    def _solve_one(self, hr, hi, p_lin):
        return mrt_poweropt(
            hr, hi, p_lin, restarts=self.restarts, iters=self.iters, seed=self.seed
        )
