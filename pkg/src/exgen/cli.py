"""``exgen`` command line: synth, ingest, train, sample, baseline, eval, bench.

Exit codes: 0 success, 2 argument/validation error, 3 training failure,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import evt
from .config import ConfigError, RunConfig, load_config
from .dataset import (
    Dataset,
    DatasetError,
    FileFormatError,
    load_dataset,
    normalize_resize,
    save_dataset,
    split_train_test,
    synth_raw,
)
from .gan import GanModel, TrainingDivergedError, load_gan, save_gan
from .metrics import (
    MetricsReport,
    bottleneck_activations,
    exgan_comparison_set,
    fair_selection,
    fid,
    format_timing,
    mape,
    reconstruction_loss,
    train_autoencoder,
)
from .pipeline import (
    SampleRequest,
    ShiftPreconditionError,
    bench_sampling,
    distribution_shift,
    evt_conditional_generation,
    exgan_sample,
    rejection_sample,
    train_no_shift,
)

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_USAGE", "EXIT_TRAINING", "EXIT_MISSING"]

EXIT_OK, EXIT_USAGE, EXIT_TRAINING, EXIT_MISSING = 0, 2, 3, 4

EXGAN_CKPT = "exgan.ckpt"
BASELINE_CKPT = "baseline.ckpt"
NOSHIFT_CKPT = "noshift.ckpt"
SHIFTED_DATA = "shifted.exg"

log = logging.getLogger("exgen")


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    pass


# --- helpers ----------------------------------------------------------------------------


def _overrides(args) -> dict:
    out = {}
    for key in ("seed", "c", "k", "size", "tau", "count", "tolerance", "budget", "arch", "n"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    if getattr(args, "epochs", None) is not None:
        # per shift iteration; the conditional stage keeps the default 2:1 ratio
        out.update(initial_epochs=args.epochs, epochs=args.epochs, cond_epochs=2 * args.epochs)
    if getattr(args, "no_shift", False):
        out["no_shift"] = True
    if getattr(args, "taus", None) is not None:
        try:
            out["taus"] = [float(t) for t in args.taus.split(",") if t.strip()]
        except ValueError as exc:
            raise ConfigError("taus", f"not a comma-separated list of numbers: {args.taus!r}") from exc
    return out


def _config(args) -> RunConfig:
    if args.config is not None and not Path(args.config).exists():
        raise MissingArtifact(f"config file not found: {args.config}")
    return load_config(args.config, _overrides(args))


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} not found: {p}")
    return p


def _load_run_model(run: Path, name: str) -> tuple[GanModel, dict]:
    return load_gan(_require(run / name, "run artifact"))


def _write_json(path: Path, body: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def write_pgm(path: Path, grids: np.ndarray, scale: int = 4, pad: int = 1) -> None:
    """Tile (n, h, w) grids in [-1, 1] into one 8-bit binary PGM."""
    n, h, w = grids.shape
    cols = max(1, math.ceil(math.sqrt(n)))
    rows = max(1, math.ceil(n / cols))
    cell_h, cell_w = h * scale + pad, w * scale + pad
    canvas = np.zeros((rows * cell_h + pad, cols * cell_w + pad), dtype=np.uint8)
    levels = np.clip(np.rint((grids.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        tile = np.kron(levels[i], np.ones((scale, scale), dtype=np.uint8))
        canvas[pad + r * cell_h: pad + r * cell_h + h * scale, pad + c * cell_w: pad + c * cell_w + w * scale] = tile
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode())
        fh.write(canvas.tobytes())


def _shift_of(meta: dict) -> tuple[float, int]:
    return float(meta["shift"]["c"]), int(meta["shift"]["k"])


# --- commands ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(_required_out(args))
    raw = synth_raw(cfg.n, cfg.size, cfg.size, cfg.seed, cfg.tail)
    meta = {"config": cfg.to_dict(), "source": "synth"}
    if args.test_out is not None:
        test_raw = synth_raw(cfg.test_n, cfg.size, cfg.size, cfg.seed + 1_000_003, cfg.tail)
        train, test = split_train_test(raw, test_raw, q=cfg.threshold_q)
        save_dataset(train, out, meta)
        save_dataset(test, Path(args.test_out), {**meta, "split": "extreme-test"})
        print(f"wrote {train.n} training and {test.n} extreme test samples")
    else:
        px, scale = normalize_resize(raw, (cfg.size, cfg.size))
        save_dataset(Dataset.from_pixels(px, raw_scale=scale), out, meta)
        print(f"wrote {cfg.n} samples to {out}")
    return EXIT_OK


def _read_csv(path: Path) -> np.ndarray:
    rows = []
    side = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not f.strip() for f in row):
                continue
            try:
                vals = [float(f) for f in row]
            except ValueError as exc:
                raise UsageError(f"{path}: row {lineno}: non-numeric field ({exc})") from exc
            if side is None:
                side = math.isqrt(len(vals))
                if side * side != len(vals) or side == 0:
                    raise UsageError(f"{path}: row {lineno}: {len(vals)} fields is not a square grid")
            elif len(vals) != side * side:
                raise UsageError(f"{path}: row {lineno}: expected {side * side} fields, got {len(vals)}")
            rows.append(vals)
    if not rows:
        raise UsageError(f"{path}: no rows")
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), side, side)


def cmd_ingest(args) -> int:
    cfg = _config(args)
    src = _require(args.data, "data")
    out = Path(_required_out(args))
    raw = _read_csv(src)
    meta = {"config": cfg.to_dict(), "source": "csv"}
    if args.test is not None:
        test_raw = _read_csv(_require(args.test, "test"))
        train, test = split_train_test(raw, test_raw, (cfg.size, cfg.size), cfg.threshold_q)
        if args.test_out is None:
            raise UsageError("--test-out is required with --test")
        save_dataset(train, out, meta)
        save_dataset(test, Path(args.test_out), {**meta, "split": "extreme-test"})
    else:
        px, scale = normalize_resize(raw, (cfg.size, cfg.size))
        save_dataset(Dataset.from_pixels(px, raw_scale=scale), out, meta)
    print(f"ingested {raw.shape[0]} rows into {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = load_dataset(_require(args.data, "data"))
    run = Path(_required_out(args))
    run.mkdir(parents=True, exist_ok=True)
    if cfg.size != data.height:
        cfg = cfg.merged({"size": data.height})
    echo = cfg.to_dict()
    pc = cfg.pipeline()
    u, exc = evt.select_threshold(data.extremeness, cfg.threshold_q)
    baseline_gpd = evt.fit_gpd(exc).with_offset(u)
    if cfg.no_shift:
        model, gpd = train_no_shift(data, pc)
        save_gan(run / NOSHIFT_CKPT, model, {"config": echo, "shift": {"c": cfg.c, "k": 0}})
        print(f"trained no-shift model; GPD {gpd.to_dict()}")
        return EXIT_OK
    if cfg.k < 1:
        raise ConfigError("k", "must be >= 1 for distribution shifting")
    try:
        state = distribution_shift(data, pc, state_dir=run, echo=echo)
    except ShiftPreconditionError as exc:
        raise ConfigError("k", str(exc)) from exc
    # the first iteration trains on the full data: it is the unconditional baseline
    save_gan(run / BASELINE_CKPT, state.models[0],
             {"config": echo, "baseline_gpd": baseline_gpd.to_dict()})
    save_dataset(state.X_s, run / SHIFTED_DATA, {"config": echo})
    model, gpd = evt_conditional_generation(state, pc)
    save_gan(run / EXGAN_CKPT, model, {"config": echo, "shift": {"c": cfg.c, "k": cfg.k}})
    print(f"shifted {cfg.k} iterations; conditioning GPD {gpd.to_dict()}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _config(args)
    run = _require(args.run, "run")
    model, meta = _load_run_model(run, EXGAN_CKPT)
    out = Path(_required_out(args))
    shift = _shift_of(meta)
    req = SampleRequest(cfg.tau, cfg.count, cfg.seed)
    tau_prime = evt.adjust_probability(req.tau, *shift)
    e_prime = evt.extremeness_level(model.cond_gpd, tau_prime)
    ds = exgan_sample(model, shift, req)
    side = {"config": cfg.to_dict(), "tau": cfg.tau, "tau_prime": tau_prime, "e_prime": e_prime,
            "extremeness": [float(v) for v in ds.extremeness]}
    save_dataset(ds, out, {"tau": cfg.tau, "e_prime": e_prime, "config": cfg.to_dict()})
    if args.pgm is not None:
        write_pgm(Path(args.pgm), ds.pixels)
        _write_json(Path(args.pgm).with_suffix(".json"), side)
    print(f"tau={cfg.tau:g} tau'={tau_prime:.6g} e'={e_prime:.6g}; wrote {ds.n} samples")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    run = _require(args.run, "run")
    model, meta = _load_run_model(run, BASELINE_CKPT)
    gpd = evt.GpdParams.from_dict(meta["baseline_gpd"])
    req = SampleRequest(cfg.tau, cfg.count, cfg.seed, cfg.tolerance, cfg.budget)
    res = rejection_sample(model, gpd, req)
    body = {"config": cfg.to_dict(), "tau": cfg.tau, "target": res.target, "accepted": res.samples.n,
            "trials": res.trials, "exhausted": res.exhausted}
    if args.out is not None:
        _write_json(Path(args.out), body)
    state = "budget exhausted" if res.exhausted else "done"
    print(f"tau={cfg.tau:g} target={res.target:.6g} accepted={res.samples.n} trials={res.trials} ({state})")
    return EXIT_OK


def evaluate(run: Path, test: Dataset, cfg: RunConfig) -> MetricsReport:
    model, meta = _load_run_model(run, EXGAN_CKPT)
    shift = _shift_of(meta)
    ae = train_autoencoder(test, epochs=cfg.ae_epochs, seed=cfg.seed)
    real_acts = bottleneck_activations(ae, test)
    gen = exgan_comparison_set(model, shift, test.n, cfg.eval_tau, seed=cfg.seed)
    fid_value = fid(real_acts, bottleneck_activations(ae, gen))
    rec = reconstruction_loss(model, test, True, steps=cfg.rec_steps)
    m_mean, m_std = mape(model, n_eval=cfg.mape_n_eval, seed=cfg.seed)
    extra = {"n_test": test.n}
    if (run / NOSHIFT_CKPT).exists():
        ablation, _ = load_gan(run / NOSHIFT_CKPT)
        sel = fair_selection(ablation, None, test.n, cfg.eval_tau, seed=cfg.seed)
        extra["fid_noshift"] = fid(real_acts, bottleneck_activations(ae, sel))
    if (run / BASELINE_CKPT).exists():
        base, _ = load_gan(run / BASELINE_CKPT)
        sel = fair_selection(base, None, test.n, cfg.eval_tau, seed=cfg.seed)
        extra["fid_baseline"] = fid(real_acts, bottleneck_activations(ae, sel))
        extra["rec_loss_baseline"] = reconstruction_loss(base, test, False, steps=cfg.rec_steps)
    return MetricsReport(fid_value, rec, m_mean, m_std, [], cfg.to_dict(), cfg.seed, extra)


def cmd_eval(args) -> int:
    cfg = _config(args)
    run = _require(args.run, "run")
    test = load_dataset(_require(args.test, "test"))
    if test.n == 0:
        raise UsageError("the test set is empty")
    report = evaluate(run, test, cfg)
    if args.out is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json())
    print(report.table())
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    run = _require(args.run, "run")
    model, meta = _load_run_model(run, EXGAN_CKPT)
    base = gpd = None
    if (run / BASELINE_CKPT).exists():
        base, bmeta = load_gan(run / BASELINE_CKPT)
        gpd = evt.GpdParams.from_dict(bmeta["baseline_gpd"])
    rows = bench_sampling(model, _shift_of(meta), base, gpd, cfg.taus, cfg.count, cfg.seed,
                          cfg.tolerance, cfg.budget)
    if args.out is not None:
        _write_json(Path(args.out), {"config": cfg.to_dict(), "timing": [r.to_dict() for r in rows]})
    print(format_timing(rows))
    return EXIT_OK


# --- parser -------------------------------------------------------------------------------


def _required_out(args) -> str:
    if args.out is None:
        raise UsageError("--out is required")
    return args.out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exgen", description="Extreme sample generation at a chosen probability.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *extra):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        for flag in extra:
            flag(sp)
        return sp

    def data(sp):
        sp.add_argument("--data")

    def run(sp):
        sp.add_argument("--run")

    def sizing(sp):
        sp.add_argument("--size", type=int)
        sp.add_argument("--n", type=int)

    def shifting(sp):
        sp.add_argument("--c", type=float)
        sp.add_argument("--k", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--no-shift", action="store_true")
        sp.add_argument("--arch", choices=("conv", "mlp"))

    def sampling(sp):
        sp.add_argument("--tau", type=float)
        sp.add_argument("--count", type=int)
        sp.add_argument("--tolerance", type=float)
        sp.add_argument("--budget", type=int)

    s = common(sub.add_parser("synth", help="write a synthetic heavy-tailed dataset"), sizing)
    s.add_argument("--test-out")
    s.set_defaults(func=cmd_synth)
    s = common(sub.add_parser("ingest", help="convert a CSV of raw grids"), data, sizing)
    s.add_argument("--test")
    s.add_argument("--test-out")
    s.set_defaults(func=cmd_ingest)
    common(sub.add_parser("train", help="distribution shifting + conditional training"),
           data, shifting).set_defaults(func=cmd_train)
    s = common(sub.add_parser("sample", help="sample at extremeness probability tau"), run, sampling)
    s.add_argument("--pgm")
    s.set_defaults(func=cmd_sample)
    common(sub.add_parser("baseline", help="rejection-sampling baseline"), run, sampling).set_defaults(
        func=cmd_baseline)
    s = common(sub.add_parser("eval", help="FID, reconstruction loss, MAPE"), run)
    s.add_argument("--test")
    s.set_defaults(func=cmd_eval)
    s = common(sub.add_parser("bench", help="sampling time across tau"), run, sampling)
    s.add_argument("--taus")
    s.set_defaults(func=cmd_bench)
    return p


def _thread_limit():
    raw = os.environ.get("EXGEN_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"EXGEN_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError, evt.EvtError, ShiftPreconditionError, DatasetError, ValueError) as exc:
        if isinstance(exc, FileFormatError):
            print(f"exgen: unreadable artifact: {exc}", file=sys.stderr)
            return EXIT_MISSING
        print(f"exgen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"exgen: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"exgen: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
