"""Command-line harness: train models, evaluate against baselines over
the power grid, time per-sample inference, and run the universality
ablation.  Every output artifact gets a JSON run manifest next to it.

Subcommands: gen-data, train, eval, bench, ablate.  Results are CSV;
plotting happens elsewhere.  Identical flags and seeds give
byte-identical CSVs (timing output excepted, the clock is real).
"""

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import channel as ch
from .baselines import mrt_poweropt, wmmse, zf_waterfilling
from .metrics import sum_rate
from .network import load_params, predict_single
from .training import TrainConfig, evaluate_params, train_loop

BASELINE_NAMES = ("wmmse", "zf", "mrt")
OUTPUT_DIR_ENV = "BEAMLEARN_OUT"


@dataclass
class RunManifest:
    """Provenance record emitted alongside every output artifact."""

    command: str
    argv: list
    config: dict
    seed: int
    code_fingerprint: str
    created: str = ""
    outputs: list = field(default_factory=list)


def code_fingerprint():
    """Digest of the package sources producing this run."""
    digest = hashlib.sha256()
    pkg = Path(__file__).parent
    for src in sorted(pkg.glob("*.py")):
        digest.update(src.name.encode())
        digest.update(src.read_bytes())
    return digest.hexdigest()[:16]


def _resolve_out(path):
    path = Path(path)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not path.is_absolute():
        path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out_path, args, extra_outputs=()):
    manifest = RunManifest(
        command=args.command,
        argv=sys.argv[1:],
        config={k: v for k, v in vars(args).items() if k not in ("command", "func")},
        seed=getattr(args, "seed", 0),
        code_fingerprint=code_fingerprint(),
        created=datetime.now(timezone.utc).isoformat(),
        outputs=[str(out_path), *map(str, extra_outputs)],
    )
    with open(f"{out_path}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(manifest), fh, indent=2, default=str)
        fh.write("\n")


def parse_grid(text):
    """Power grid spec: 'lo:hi:step' or a comma list of dB values."""
    try:
        if ":" in text:
            lo, hi, step = (float(v) for v in text.split(":"))
            levels = tuple(np.arange(lo, hi + 0.5 * step, step))
        else:
            levels = tuple(float(v) for v in text.split(","))
        return ch.PowerGrid(levels)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad power grid {text!r}: {exc}") from exc


def _write_csv(path, header, rows):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(
                ",".join(
                    f"{v:.17g}" if isinstance(v, float) else str(v) for v in row
                )
                + "\n"
            )


# -- method table -----------------------------------------------------------


def _load_models(paths):
    models = []
    names = set()
    for p in paths or ():
        params = load_params(p)
        name = Path(p).stem
        while name in names:
            name += "_2"
        names.add(name)
        models.append((name, params))
    return models


def _solve_baseline(name, hr, hi, p_lin):
    if name == "wmmse":
        return wmmse(hr, hi, p_lin).beams
    if name == "zf":
        return zf_waterfilling(hr, hi, p_lin)
    if name == "mrt":
        return mrt_poweropt(hr, hi, p_lin)
    raise ValueError(f"unknown baseline {name!r}, expected one of {BASELINE_NAMES}")


def _baseline_mean_rate(name, batch, threads=1):
    n = len(batch)
    p_lin = batch.p_lin
    rates = np.empty(n)

    def solve(i):
        stack = _solve_baseline(name, batch.hr[i], batch.hi[i], p_lin[i])
        rates[i] = sum_rate(batch.hr[i], batch.hi[i], stack.vr, stack.vi)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(solve, range(n)))
    else:
        for i in range(n):
            solve(i)
    return float(rates.mean())


def _test_sets(args, grid):
    """Per-level frozen test batches from the dedicated test namespace."""
    if getattr(args, "test_set", None):
        batch, file_grid = ch.read_dataset(args.test_set)
        levels = sorted(set(batch.p_db.tolist()))
        return [
            (lvl, batch.subset(np.flatnonzero(batch.p_db == lvl))) for lvl in levels
        ]
    cfg = ch.ChannelConfig(m=args.m, k=args.k)
    sets = []
    for i, lvl in enumerate(grid.levels_db):
        rng = ch.derive_rng(args.seed, ch.STREAM_TEST, i)
        sets.append((lvl, ch.draw_batch(rng, cfg, ch.PowerGrid((lvl,)), args.n_per_level)))
    return sets


def _check_model_dims(models, m, k):
    for name, params in models:
        if (params.m, params.k) != (m, k):
            raise ValueError(
                f"model {name!r} is for M={params.m}, K={params.k}; "
                f"the test set uses M={m}, K={k}"
            )


# -- subcommands ------------------------------------------------------------


def cmd_gen_data(args):
    cfg = ch.ChannelConfig(m=args.m, k=args.k)
    rng = ch.derive_rng(args.seed, ch.STREAM_DATASET)
    batch = ch.draw_batch(rng, cfg, args.pgrid, args.n)
    out = _resolve_out(args.out)
    ch.write_dataset(out, batch, args.pgrid)
    write_manifest(out, args)
    print(f"wrote {args.n} samples to {out}")


def cmd_train(args):
    out = _resolve_out(args.out)
    log_path = _resolve_out(args.log) if args.log else Path(f"{out}.log.csv")
    dataset = None
    if args.train_set:
        dataset, _ = ch.read_dataset(args.train_set)
    cfg = TrainConfig(
        head=args.head,
        m=args.m,
        k=args.k,
        hidden=(args.hidden_width,) * args.hidden_layers,
        batch_size=args.batch,
        steps=args.steps,
        learning_rate=args.lr,
        seed=args.seed,
        grid=args.pgrid,
        fixed_p_db=args.fixed_p,
        eval_every=args.eval_every,
        val_per_level=args.val_per_level,
        dataset=dataset,
        checkpoint_path=str(out),
    )
    _, rows = train_loop(cfg, log_path=log_path)
    write_manifest(out, args, extra_outputs=[log_path])
    final = rows[-1] if rows else None
    if final:
        print(f"trained {args.head} for {args.steps} steps; final loss {final[1]:.4f}")
    print(f"params -> {out}")


def cmd_eval(args):
    models = _load_models(args.models)
    if not models and not args.baselines:
        raise ValueError("nothing to evaluate: pass --models and/or --baselines")
    sets = _test_sets(args, args.pgrid)
    if models:
        _check_model_dims(models, args.m, args.k)
    header = ["p_db"] + [name for name, _ in models] + list(args.baselines or ())
    rows = []
    for lvl, batch in sets:
        row = [float(lvl)]
        for _, params in models:
            row.append(evaluate_params(params, batch))
        for base in args.baselines or ():
            row.append(_baseline_mean_rate(base, batch, threads=args.threads))
        rows.append(row)
    out = _resolve_out(args.out)
    _write_csv(out, header, rows)
    write_manifest(out, args)
    print(f"eval table -> {out}")


def _time_per_sample(fn, batch, warmup, reps):
    """Per-sample wall-clock times, warmup excluded, single-threaded."""
    n = len(batch)
    p_lin = batch.p_lin
    for i in range(min(warmup, n)):
        fn(batch.hr[i % n], batch.hi[i % n], batch.p_db[i % n], p_lin[i % n])
    times = np.empty(reps)
    for r in range(reps):
        i = r % n
        t0 = time.perf_counter()
        fn(batch.hr[i], batch.hi[i], batch.p_db[i], p_lin[i])
        times[r] = time.perf_counter() - t0
    return times


def median_of_means(times, groups=10):
    groups = max(1, min(groups, len(times)))
    return float(np.median([g.mean() for g in np.array_split(times, groups)]))


def cmd_bench(args):
    models = _load_models(args.models)
    methods = [(name, ("model", params)) for name, params in models]
    methods += [(name, ("baseline", name)) for name in args.baselines or ()]
    if not methods:
        raise ValueError("nothing to benchmark: pass --models and/or --baselines")
    cfg = ch.ChannelConfig(m=args.m, k=args.k)
    rows = []
    with threadpool_limits(limits=1):
        for name, (kind, obj) in methods:
            for i, lvl in enumerate(args.pgrid.levels_db):
                rng = ch.derive_rng(args.seed, ch.STREAM_TEST, i)
                batch = ch.draw_batch(rng, cfg, ch.PowerGrid((lvl,)), min(args.n, 256))
                if kind == "model":
                    fn = lambda hr, hi, pdb, plin: predict_single(obj, hr, hi, pdb)
                else:
                    fn = lambda hr, hi, pdb, plin: _solve_baseline(obj, hr, hi, plin)
                times = _time_per_sample(fn, batch, args.warmup, args.n)
                rows.append(
                    [name, float(lvl), median_of_means(times), float(times.std()), args.n]
                )
    out = _resolve_out(args.out)
    _write_csv(out, ["method", "p_db", "mean_s", "std_s", "n"], rows)
    write_manifest(out, args)
    print(f"timing table -> {out}")


def cmd_ablate(args):
    universal = load_params(args.universal)
    fixed = _load_models(args.fixed)
    models = [("universal", universal)] + fixed
    _check_model_dims(models, args.m, args.k)
    by_level = {}
    for name, params in fixed:
        if params.fixed_p_db is None:
            raise ValueError(f"model {name!r} is universal; pass it as --universal")
        by_level[float(params.fixed_p_db)] = params
    sets = _test_sets(args, args.pgrid)
    header = ["p_db", "universal", "per_p_reference"] + [name for name, _ in fixed]
    rows = []
    for lvl, batch in sets:
        row = [float(lvl), evaluate_params(universal, batch)]
        ref = by_level.get(float(lvl))
        row.append(evaluate_params(ref, batch) if ref is not None else "")
        for _, params in fixed:
            row.append(evaluate_params(params, batch))
        rows.append(row)
    out = _resolve_out(args.out)
    _write_csv(out, header, rows)
    write_manifest(out, args)
    print(f"ablation table -> {out}")


# -- argument parsing ---------------------------------------------------------


def _add_common_eval_args(sp):
    sp.add_argument("--m", type=int, default=4, help="transmit antennas")
    sp.add_argument("--k", type=int, default=4, help="users")
    sp.add_argument("--pgrid", type=parse_grid, default=ch.PowerGrid(), help="dB grid, e.g. 0:30:5")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output CSV path")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="beamlearn",
        description="Universal deep-learning beamformers for the MISO downlink",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="write a channel/budget dataset file")
    sp.add_argument("--m", type=int, default=4)
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--pgrid", type=parse_grid, default=ch.PowerGrid())
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a beamforming network")
    sp.add_argument("--head", choices=("dbl", "fl", "sfl"), required=True)
    sp.add_argument("--m", type=int, default=4)
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--hidden-width", type=int, default=320)
    sp.add_argument("--hidden-layers", type=int, default=5)
    sp.add_argument("--steps", type=int, default=20000)
    sp.add_argument("--batch", type=int, default=256)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--pgrid", type=parse_grid, default=ch.PowerGrid())
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument(
        "--fixed-p",
        type=float,
        default=None,
        metavar="DB",
        help="train a non-universal model at this budget (drops the power feature)",
    )
    sp.add_argument("--eval-every", type=int, default=1000)
    sp.add_argument("--val-per-level", type=int, default=1000)
    sp.add_argument("--train-set", default=None, help="pin training to a dataset file")
    sp.add_argument("--out", required=True, help="parameter file path")
    sp.add_argument("--log", default=None, help="training log CSV (default <out>.log.csv)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="average sum rate vs P per method")
    _add_common_eval_args(sp)
    sp.add_argument("--models", nargs="*", default=[], help="parameter files")
    sp.add_argument("--baselines", nargs="*", default=[], choices=BASELINE_NAMES)
    sp.add_argument("--n-per-level", type=int, default=1000)
    sp.add_argument("--test-set", default=None, help="dataset file instead of generated test set")
    sp.add_argument("--threads", type=int, default=1, help="parallel baseline solves")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="per-sample wall-clock times")
    _add_common_eval_args(sp)
    sp.add_argument("--models", nargs="*", default=[])
    sp.add_argument("--baselines", nargs="*", default=[], choices=BASELINE_NAMES)
    sp.add_argument("--n", type=int, default=1000, help="timed repetitions per method/level")
    sp.add_argument("--warmup", type=int, default=10)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("ablate", help="universal model vs fixed-P models")
    _add_common_eval_args(sp)
    sp.add_argument("--universal", required=True, help="universal model parameter file")
    sp.add_argument("--fixed", nargs="*", default=[], help="fixed-P model parameter files")
    sp.add_argument("--n-per-level", type=int, default=1000)
    sp.add_argument("--test-set", default=None)
    sp.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
