"""Distribution shifting, EVT-conditioned generation, and the rejection baseline."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import evt
from .dataset import GENERATED, REAL, RAINFALL_TOTAL, Dataset, Measure, sort_by_extremeness
from .evt import GpdParams
from .gan import (
    GanModel,
    TrainConfig,
    TrainingDivergedError,
    generate_grids,
    sample_model,
    save_gan,
    train_conditional,
    train_unconditional,
)

__all__ = [
    "PipelineConfig",
    "IterationRecord",
    "ShiftState",
    "SampleRequest",
    "RejectionResult",
    "TimingRow",
    "ShiftPreconditionError",
    "ShiftDivergedError",
    "GpdFitError",
    "shift_counts",
    "distribution_shift",
    "evt_conditional_generation",
    "train_no_shift",
    "exgan_sample",
    "accept_mask",
    "rejection_sample",
    "bench_sampling",
    "load_ledger",
]

log = logging.getLogger(__name__)

LEDGER_NAME = "ledger.json"
_QUANTILES = (0.0, 0.05, 0.5, 0.95, 1.0)


class ShiftPreconditionError(ValueError):
    pass


class ShiftDivergedError(TrainingDivergedError):
    def __init__(self, iteration: int, cause: TrainingDivergedError):
        RuntimeError.__init__(self, f"shift iteration {iteration}: {cause}")
        self.iteration = iteration
        self.epoch = cause.epoch
        self.batch = cause.batch


class GpdFitError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    c: float = 0.75
    k: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    initial_epochs: int = 500
    epochs: int = 100
    cond_epochs: int = 100
    warm_start: bool = True
    threshold_q: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.c < 1.0:
            raise ShiftPreconditionError(f"c must lie in (0, 1), got {self.c}")
        if self.k < 0:
            raise ShiftPreconditionError(f"k must be >= 0, got {self.k}")
        if min(self.initial_epochs, self.epochs, self.cond_epochs) < 1:
            raise ShiftPreconditionError("epoch counts must be >= 1")

    def train_config(self, iteration: int) -> TrainConfig:
        """Training config for shift iteration ``iteration`` (1-based); 0 is the conditional stage."""
        if iteration == 0:
            return replace(self.train, epochs=self.cond_epochs, seed=self.train.seed + 1000)
        epochs = self.initial_epochs if iteration == 1 else self.epochs
        return replace(self.train, epochs=epochs, seed=self.train.seed + iteration)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    original_kept: int
    generated_candidates: int
    generated_added: int
    train_seed: int
    sample_seed: int
    quantiles: tuple[float, ...]
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["quantiles"] = list(self.quantiles)
        return d


@dataclass
class ShiftState:
    X_s: Dataset
    c: float
    k: int
    n: int
    k_done: int = 0
    records: list[IterationRecord] = field(default_factory=list)
    models: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.k_done == self.k and self.X_s.n == self.n

    def ledger(self) -> dict:
        return {
            "c": self.c,
            "k": self.k,
            "n": self.n,
            "k_done": self.k_done,
            "iterations": [r.to_dict() for r in self.records],
        }


@dataclass(frozen=True)
class SampleRequest:
    tau: float
    count: int
    seed: int = 0
    tolerance: float = 0.1
    budget: int = 1_000_000

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise evt.InvalidRequestError(f"tau must lie in (0, 1), got {self.tau}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")


def _exact(c: float) -> Fraction:
    # decimal reading of c, so that e.g. 0.7 * 100 floors to 70 rather than 69
    return Fraction(repr(float(c)))


def shift_counts(n: int, c: float, i: int) -> tuple[int, int, int]:
    """``(kept, candidates, added)`` for iteration ``i``: ⌊cⁱn⌋, ⌈(n − kept)/c⌉, n − kept."""
    cf = _exact(c)
    kept = math.floor(cf ** i * n)
    added = n - kept
    candidates = math.ceil(Fraction(added) / cf)
    return kept, candidates, added


def _quantiles(e: np.ndarray) -> tuple[float, ...]:
    return tuple(float(v) for v in np.quantile(e, _QUANTILES))


def _stream_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def _default_train(ds: Dataset, config: TrainConfig, warm_from):
    return train_unconditional(ds, config, warm_from)


def _default_generate(model, count: int, seed: int, id_start: int) -> Dataset:
    return sample_model(model, count, seed=seed, id_start=id_start)


def _write_ledger(state: ShiftState, state_dir: Path, extra: dict | None) -> None:
    body = state.ledger()
    if extra:
        body["config"] = extra
    tmp = state_dir / (LEDGER_NAME + ".tmp")
    tmp.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, state_dir / LEDGER_NAME)


def load_ledger(state_dir: str | os.PathLike) -> dict:
    return json.loads((Path(state_dir) / LEDGER_NAME).read_text())


def distribution_shift(X: Dataset, config: PipelineConfig, *,
                       train_fn: Callable | None = None,
                       generate_fn: Callable | None = None,
                       state_dir: str | os.PathLike | None = None,
                       echo: dict | None = None) -> ShiftState:
    """Run ``config.k`` shifting iterations on ``X``.

    Iteration i trains on the current ``X_s`` (warm from iteration i-1 when
    enabled), resets ``X_s`` to the top ⌊cⁱn⌋ originals, then fills it back
    to n with the most extreme of ⌈(n-⌊cⁱn⌋)/c⌉ generated candidates.

    ``train_fn(ds, train_config, warm_from) -> model`` and
    ``generate_fn(model, count, seed, id_start) -> Dataset`` are injectable.
    With ``state_dir`` each model is checkpointed and the ledger rewritten
    after every iteration.
    """
    c, k, n = config.c, config.k, X.n
    if k < 1:
        raise ShiftPreconditionError(f"k must be >= 1 for shifting, got {k}")
    if n < 1:
        raise ShiftPreconditionError("cannot shift an empty dataset")
    if shift_counts(n, c, k)[0] < 1:
        raise ShiftPreconditionError(f"floor(c^k * n) = 0 for n={n}, c={c}, k={k}")
    if np.any(X.origin != REAL):
        raise ShiftPreconditionError("input dataset must contain only real samples")
    train_fn = train_fn or _default_train
    generate_fn = generate_fn or _default_generate
    out_dir = Path(state_dir) if state_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    X = sort_by_extremeness(X)
    state = ShiftState(X, c, k, n)
    next_id = int(X.ids.max()) + 1
    model = None
    for i in range(1, k + 1):
        tc = config.train_config(i)
        warm = model if (config.warm_start and i >= 2) else None
        try:
            model = train_fn(state.X_s, tc, warm)
        except TrainingDivergedError as exc:
            if out_dir is not None:
                _write_ledger(state, out_dir, echo)
            raise ShiftDivergedError(i, exc) from exc
        kept, n_cand, n_add = shift_counts(n, c, i)
        sample_seed = _stream_seed(tc.seed, i)
        cand = sort_by_extremeness(generate_fn(model, n_cand, sample_seed, next_id))
        next_id += n_cand
        top = cand.take(np.arange(n_add))
        top = Dataset(top.pixels, top.ids, np.full(n_add, GENERATED, np.uint8), top.extremeness,
                      X.raw_scale, False, X.measure)
        state.X_s = sort_by_extremeness(X.take(np.arange(kept)).concat(top))
        state.k_done = i
        ckpt = None
        if out_dir is not None:
            ckpt = f"iter_{i:03d}.ckpt"
            save_gan(out_dir / ckpt, model, {"iteration": i, "config": echo or {}})
        state.models.append(model)
        state.records.append(IterationRecord(i, kept, n_cand, n_add, tc.seed, sample_seed,
                                             _quantiles(state.X_s.extremeness), ckpt))
        if out_dir is not None:
            _write_ledger(state, out_dir, echo)
        log.info("shift iteration %d: kept %d, generated %d, added %d", i, kept, n_cand, n_add)
    return state


def fit_conditioning_gpd(extremeness: np.ndarray) -> GpdParams:
    """GPD anchored at the smallest value: fit on ``e - min(e)``, offset added back."""
    e = np.asarray(extremeness, dtype=np.float64)
    if e.size == 0:
        raise GpdFitError("no extremeness values to fit")
    u = float(e.min())
    try:
        return evt.fit_gpd(e - u).with_offset(u)
    except evt.EvtError as exc:
        stats = f"n={e.size}, min={u:.6g}, median={np.median(e):.6g}, max={e.max():.6g}"
        raise GpdFitError(f"GPD fit failed on extremeness ({stats}): {exc}") from exc


def evt_conditional_generation(state: ShiftState, config: PipelineConfig, *,
                               train_fn: Callable | None = None) -> tuple[GanModel, GpdParams]:
    """Fit the conditioning GPD on ``X_s`` and train the conditional model."""
    if not state.complete:
        raise ShiftPreconditionError(f"shift state incomplete: {state.k_done} of {state.k} iterations")
    gpd = fit_conditioning_gpd(state.X_s.extremeness)
    if gpd.offset_u <= 0:
        raise GpdFitError(f"conditioning needs positive extremeness; minimum is {gpd.offset_u}")
    warm = state.models[-1] if (config.warm_start and state.models) else None
    train_fn = train_fn or train_conditional
    model = train_fn(state.X_s, gpd, config.train_config(0), warm_from=warm)
    return model, gpd


def train_no_shift(X: Dataset, config: PipelineConfig) -> tuple[GanModel, GpdParams]:
    """Ablation: one conditional model on all of ``X`` with the same total epoch budget."""
    gpd = fit_conditioning_gpd(X.extremeness)
    budget = config.initial_epochs + (config.k - 1) * config.epochs + config.cond_epochs if config.k >= 1 \
        else config.cond_epochs
    tc = replace(config.train_config(0), epochs=budget)
    return train_conditional(X, gpd, tc), gpd


def exgan_sample(model: GanModel, shift: tuple[float, int], req: SampleRequest) -> Dataset:
    """``count`` grids at extremeness probability ``tau``; no rejection loop."""
    if not model.conditional:
        raise ValueError("exgan_sample needs a conditional model")
    tau_prime = evt.adjust_probability(req.tau, *shift)
    e_prime = evt.extremeness_level(model.cond_gpd, tau_prime)
    return sample_model(model, req.count, e=e_prime, seed=req.seed)


# --- rejection baseline -----------------------------------------------------------


@dataclass(frozen=True)
class RejectionResult:
    samples: Dataset
    trials: int
    target: float
    exhausted: bool

    @property
    def trials_per_accept(self) -> float:
        return self.trials / self.samples.n if self.samples.n else math.inf


def accept_mask(target: float, extremeness, tolerance: float) -> np.ndarray:
    """``|e - E(x)| / e <= tolerance``; the boundary value is accepted."""
    e = np.asarray(extremeness, dtype=np.float64)
    return np.abs(target - e) / target <= tolerance


def _as_sampler(source) -> tuple[Callable, Measure]:
    if isinstance(source, GanModel):
        if source.conditional:
            raise ValueError("the rejection baseline needs an unconditional model")

        def draw(count, rng):
            z = rng.standard_normal((count, source.latent_dim)).astype(np.float32)
            return generate_grids(source, z)
        return draw, source.measure
    return source, RAINFALL_TOTAL


def rejection_sample(source, gpd: GpdParams, req: SampleRequest, *, measure: Measure | None = None,
                     chunk: int = 256, tail_mass: float = 1.0) -> RejectionResult:
    """Draw unconditional samples until ``count`` land within ``tolerance`` of the target.

    ``source`` is an unconditional :class:`GanModel` or a callable
    ``(count, rng) -> grids``. The target is
    ``extremeness_level(gpd, tau / tail_mass)``; the default ``tail_mass`` of 1
    reads ``tau`` directly against ``gpd``. Trials are counted one by one even
    though candidates are drawn in chunks, and never exceed ``budget``.
    """
    draw, default_measure = _as_sampler(source)
    measure = measure or default_measure
    target = evt.extremeness_level(gpd, min(1.0, req.tau / tail_mass))
    if not target > 0:
        raise evt.InvalidRequestError(f"target extremeness must be positive, got {target}")
    rng = np.random.default_rng(req.seed)
    accepted: list[np.ndarray] = []
    n_acc = 0
    trials = 0
    while n_acc < req.count and trials < req.budget:
        m = min(chunk, req.budget - trials)
        grids = np.asarray(draw(m, rng), dtype=np.float32)
        ok = np.flatnonzero(accept_mask(target, measure(grids), req.tolerance))
        need = req.count - n_acc
        if ok.size >= need:
            ok = ok[:need]
            trials += int(ok[-1]) + 1
        else:
            trials += m
        if ok.size:
            accepted.append(grids[ok])
            n_acc += ok.size
    shape = grids.shape[1:] if trials else (1, 1)
    px = np.concatenate(accepted) if accepted else np.zeros((0, *shape), dtype=np.float32)
    ds = Dataset.from_pixels(px, origin=GENERATED, measure=measure)
    return RejectionResult(ds, trials, float(target), n_acc < req.count)


# --- timing -------------------------------------------------------------------------


@dataclass(frozen=True)
class TimingRow:
    tau: float
    exgan_seconds_per_sample: float | None
    baseline_seconds_per_sample: float | None
    baseline_trials: int | None
    baseline_exhausted: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bench_sampling(exgan: GanModel | None, shift: tuple[float, int] | None, baseline=None,
                   baseline_gpd: GpdParams | None = None, taus=(0.05, 0.01, 0.001, 0.0001),
                   count: int = 256, seed: int = 0, tolerance: float = 0.1, budget: int = 1_000_000,
                   repeats: int = 3, clock: Callable[[], float] = time.perf_counter) -> list[TimingRow]:
    """Per-τ sampling cost for the conditional model and the rejection baseline.

    ExGAN timings are the best of ``repeats`` runs. Baseline cells whose
    budget ran out report ``baseline_exhausted`` and no timing.
    """
    rows = []
    for j, tau in enumerate(taus):
        ex_t = None
        if exgan is not None:
            req = SampleRequest(tau, count, seed + j)
            best = math.inf
            for _ in range(repeats):
                t0 = clock()
                exgan_sample(exgan, shift, req)
                best = min(best, clock() - t0)
            ex_t = best / count
        b_t = b_trials = None
        exhausted = False
        if baseline is not None:
            req = SampleRequest(tau, count, seed + j, tolerance, budget)
            t0 = clock()
            res = rejection_sample(baseline, baseline_gpd, req)
            elapsed = clock() - t0
            exhausted = res.exhausted
            b_trials = res.trials
            b_t = None if exhausted else elapsed / count
        rows.append(TimingRow(float(tau), ex_t, b_t, b_trials, exhausted))
    return rows
