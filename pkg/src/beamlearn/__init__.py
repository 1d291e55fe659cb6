"""Universal deep-learning beamformers for the multi-user MISO downlink.

A single network, fed the channel and the power budget, emits a
feasible beam stack for any budget on the grid.  Three output heads
(direct weights, duality feature learning, simplified feature learning)
share a fully-connected trunk; classical WMMSE / zero-forcing / MRT
solvers provide the reference curves.
"""

from .autodiff import Tape, Var, finite_diff_grad
from .baselines import (
    WmmseConfig,
    WmmseResult,
    mrt_poweropt,
    wmmse,
    zf_waterfilling,
)
from .channel import (
    ChannelBatch,
    ChannelConfig,
    ChannelSample,
    PowerGrid,
    derive_rng,
    draw_batch,
    draw_sample,
    path_loss,
    read_dataset,
    write_dataset,
)
from .complexops import CMat, CVec, gram_matrix, hdot, hpd_solve, norm2
from .estimators import (
    MrtBeamformer,
    UniversalBeamformer,
    WmmseBeamformer,
    ZfBeamformer,
)
from .metrics import (
    NOISE_POWER,
    OmegaMatrix,
    RateReport,
    omega,
    omega_symmetry_gap,
    rate_report,
    sinr,
    sum_rate,
)
from .network import (
    BeamStack,
    DualityFeature,
    NetworkParams,
    build_input,
    forward_beams,
    init_params,
    load_params,
    predict_single,
    save_params,
    scaled_softmax,
)
from .training import (
    AdamState,
    TrainConfig,
    adam_step,
    batch_loss,
    init_adam,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BeamStack",
    "ChannelBatch",
    "ChannelConfig",
    "ChannelSample",
    "CMat",
    "CVec",
    "DualityFeature",
    "MrtBeamformer",
    "NetworkParams",
    "NOISE_POWER",
    "OmegaMatrix",
    "PowerGrid",
    "RateReport",
    "Tape",
    "TrainConfig",
    "UniversalBeamformer",
    "Var",
    "WmmseBeamformer",
    "WmmseConfig",
    "WmmseResult",
    "ZfBeamformer",
    "adam_step",
    "batch_loss",
    "build_input",
    "derive_rng",
    "draw_batch",
    "draw_sample",
    "finite_diff_grad",
    "forward_beams",
    "gram_matrix",
    "hdot",
    "hpd_solve",
    "init_adam",
    "init_params",
    "load_params",
    "mrt_poweropt",
    "norm2",
    "omega",
    "omega_symmetry_gap",
    "path_loss",
    "predict_single",
    "rate_report",
    "read_dataset",
    "save_params",
    "scaled_softmax",
    "sinr",
    "sum_rate",
    "train_loop",
    "wmmse",
    "write_dataset",
    "zf_waterfilling",
]
