"""Input coercion and validation helpers for the estimator API.

Estimators accept channel data in three interchangeable forms: a
:class:`~beamlearn.channel.ChannelBatch`, a ``(hr, hi, p_db)`` tuple of
arrays, or the flat real feature matrix produced by
:func:`~beamlearn.network.build_input` (n, 2*M*K + 1).
"""

import numpy as np

from .channel import ChannelBatch
from .network import split_input


def check_finite(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_channel_batch(X, m, k):
    """Coerce supported input forms into a ChannelBatch for (M, K) dims."""
    if isinstance(X, ChannelBatch):
        batch = X
    elif isinstance(X, tuple) and len(X) == 3:
        batch = ChannelBatch(*X)
    else:
        X = check_finite("X", X)
        if X.ndim != 2 or X.shape[1] != 2 * m * k + 1:
            raise ValueError(
                f"feature matrix must be (n, {2 * m * k + 1}) for M={m}, K={k}; "
                f"got {X.shape}"
            )
        hr, hi, p_db = split_input(X, m, k)
        batch = ChannelBatch(hr, hi, p_db)
    if batch.hr.shape[1:] != (k, m):
        raise ValueError(
            f"channel dims {batch.hr.shape[1:]} do not match estimator (K={k}, M={m})"
        )
    check_finite("hr", batch.hr)
    check_finite("hi", batch.hi)
    check_finite("p_db", batch.p_db)
    return batch
