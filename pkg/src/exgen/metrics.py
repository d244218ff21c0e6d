"""Evaluation: autoencoder FID, latent reconstruction loss, MAPE, fair selection."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import evt
from .dataset import GENERATED, RAINFALL_TOTAL, Dataset, Measure, sort_by_extremeness
from .evt import GpdParams
from .gan import GanModel, generate_grids, sample_conditioning
from .substrate import (
    ModelParams,
    OptimConfig,
    adam_step,
    apply,
    autoencoder_arch,
    build_model,
    gradients,
    param_tensors,
)
from .substrate import tensor as T

__all__ = [
    "FidStats",
    "MetricsReport",
    "LowRankWarning",
    "GenerationCapError",
    "train_autoencoder",
    "autoencoder_l1",
    "bottleneck_activations",
    "fid",
    "fid_from_stats",
    "reconstruction_loss",
    "mape",
    "fair_selection",
    "exgan_comparison_set",
]

BOTTLENECK = 128
# layers [reshape, dense, relu] of the autoencoder form the encoder
_ENCODER_DEPTH = 3


class LowRankWarning(UserWarning):
    pass


class GenerationCapError(ValueError):
    pass


@dataclass(frozen=True)
class FidStats:
    mu: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def from_activations(cls, acts) -> "FidStats":
        a = np.asarray(acts, dtype=np.float64)
        if a.ndim == 1:
            a = a[:, None]
        n, d = a.shape
        if n < 2:
            raise ValueError("need at least two activation rows")
        if n < d + 1:
            warnings.warn(f"{n} samples for {d} dimensions: covariance is rank-deficient", LowRankWarning,
                          stacklevel=2)
        cov = np.cov(a, rowvar=False).reshape(d, d)
        return cls(a.mean(axis=0), (cov + cov.T) / 2, n)


def fid_from_stats(r: FidStats, g: FidStats) -> float:
    """‖μr − μg‖² + Tr(Σr + Σg − 2·(Σr^½ Σg Σr^½)^½), clamped at 0."""
    if r.mu.shape != g.mu.shape:
        raise ValueError(f"dimension mismatch: {r.mu.shape} vs {g.mu.shape}")
    w, v = np.linalg.eigh(r.cov)
    root_r = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    inner = root_r @ g.cov @ root_r
    lam = np.linalg.eigvalsh((inner + inner.T) / 2)
    cross = np.sum(np.sqrt(np.clip(lam, 0, None)))
    diff = r.mu - g.mu
    value = float(diff @ diff + np.trace(r.cov) + np.trace(g.cov) - 2 * cross)
    return max(value, 0.0)


def fid(real_acts, gen_acts) -> float:
    """FID between two activation sets (rows are samples) or two :class:`FidStats`."""
    r = real_acts if isinstance(real_acts, FidStats) else FidStats.from_activations(real_acts)
    g = gen_acts if isinstance(gen_acts, FidStats) else FidStats.from_activations(gen_acts)
    return fid_from_stats(r, g)


# --- autoencoder --------------------------------------------------------------------


def train_autoencoder(test: Dataset, *, epochs: int = 50, batch: int = 64, lr: float = 1e-3,
                      bottleneck: int = BOTTLENECK, seed: int = 0) -> ModelParams:
    """L1 autoencoder trained on the (extreme) test set, as the FID feature map."""
    if test.n == 0:
        raise ValueError("cannot train an autoencoder on an empty set")
    if test.height != test.width:
        raise ValueError("square grids required")
    model = build_model(autoencoder_arch(test.height, bottleneck), seed)
    config = OptimConfig(lr_g=lr, clip=1e9)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(test.n)
        for s in range(0, test.n, batch):
            x = test.pixels[order[s:s + batch]]
            params = param_tensors(model)
            out = apply(model.arch, params, x, training=True, rng=rng)
            loss = T.mean(T.absolute(out - x))
            model = adam_step(model, gradients(loss, params), lr, config)
    return model


def autoencoder_l1(model: ModelParams, ds: Dataset) -> float:
    """Mean absolute reconstruction error with dropout off."""
    out = apply(model.arch, param_tensors(model, False), ds.pixels).data
    return float(np.mean(np.abs(out.astype(np.float64) - ds.pixels)))


def bottleneck_activations(model: ModelParams, grids) -> np.ndarray:
    """Post-ReLU bottleneck activations (dropout disabled)."""
    x = grids.pixels if isinstance(grids, Dataset) else np.asarray(grids, dtype=np.float32)
    return apply(model.arch, param_tensors(model, False), x, stop=_ENCODER_DEPTH).data


# --- reconstruction -------------------------------------------------------------------


def reconstruction_loss(model: GanModel, test: Dataset, conditional: bool | None = None, *,
                        steps: int = 2000, lr: float = 1e-3) -> float:
    """Mean over test images of min_z ‖G(z[, E(x)]) − x‖² found by Adam from z = 0.

    All images are optimized together; the objective is a sum of per-image
    terms, so each latent row follows its own independent Adam trajectory.
    Images whose objective ends non-finite are dropped with a warning.
    """
    if test.n == 0:
        raise ValueError("empty test set")
    conditional = model.conditional if conditional is None else conditional
    if conditional != model.conditional:
        raise ValueError("conditional flag does not match the model")
    x = test.pixels
    n = test.n
    cond = (test.extremeness / model.ext_scale).astype(np.float32).reshape(n, 1) if conditional else None
    params = param_tensors(model.generator, requires_grad=False)
    arch = model.generator.arch
    z = np.zeros((n, model.latent_dim), dtype=np.float32)
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    b1, b2, eps = 0.9, 0.999, 1e-8

    def objective(z_arr, need_grad):
        zt = T.Tensor(z_arr, requires_grad=need_grad)
        out = apply(arch, params, zt, cond)
        per = T.sum(T.mul(out - x, out - x), axis=(1, 2))
        return zt, per

    for t in range(1, steps + 1):
        zt, per = objective(z, True)
        T.sum(per).backward()
        g = zt.grad.astype(np.float32)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        z = z - (lr / (1 - b1 ** t)) * m / (np.sqrt(v / (1 - b2 ** t)) + eps)
    _, per = objective(z, False)
    final = per.data.astype(np.float64)
    ok = np.isfinite(final)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} reconstruction(s) diverged and were excluded", RuntimeWarning,
                      stacklevel=2)
        if not ok.any():
            return math.nan
    return float(np.mean(final[ok]))


# --- MAPE -----------------------------------------------------------------------------


def mape(model, gpd: GpdParams | None = None, n_eval: int = 1000, seed: int = 0,
         measure: Measure | None = None) -> tuple[float, float]:
    """Mean and population std of ``100·|e − E(G(z, e))| / e`` with ``e ~ gpd``.

    ``model`` is a conditional :class:`GanModel` or a callable ``(z, e) -> grids``.
    """
    if isinstance(model, GanModel):
        if not model.conditional:
            raise ValueError("MAPE needs a conditional model")
        gpd = gpd or model.cond_gpd
        measure = measure or model.measure
        latent = model.latent_dim

        def gen(z, e):
            return generate_grids(model, z, e)
    else:
        if gpd is None:
            raise ValueError("a conditioning GPD is required for a stub generator")
        gen, latent = model, 20
        measure = measure or RAINFALL_TOTAL
    rng = np.random.default_rng(seed)
    e = sample_conditioning(gpd, n_eval, rng)
    z = rng.standard_normal((n_eval, latent)).astype(np.float32)
    got = np.asarray(measure(np.asarray(gen(z, e))), dtype=np.float64)
    err = np.abs(e - got) / e * 100.0
    return float(err.mean()), float(err.std())


# --- comparison sets ------------------------------------------------------------------


def fair_selection(model: GanModel, gpd: GpdParams | None, n: int, tau: float, seed: int = 0,
                   cap: int = 2_000_000) -> Dataset:
    """Generate ⌈n/τ⌉ samples and keep the ``n`` most extreme, sorted descending.

    An unconditional model samples z only; a conditional one also draws its
    conditioning from ``gpd`` (its own ``cond_gpd`` when omitted).
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if n < 1:
        raise ValueError("n must be >= 1")
    total = math.ceil(Fraction(n) / Fraction(repr(float(tau))))
    if total > cap:
        raise GenerationCapError(f"fair selection needs {total} samples, above the cap of {cap}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((total, model.latent_dim)).astype(np.float32)
    e = None
    if model.conditional:
        e = sample_conditioning(gpd or model.cond_gpd, total, rng)
    grids = generate_grids(model, z, e)
    ds = Dataset.from_pixels(grids, origin=GENERATED, measure=model.measure)
    return sort_by_extremeness(ds).take(np.arange(n))


def exgan_comparison_set(model: GanModel, shift: tuple[float, int], n: int, tau: float,
                         seed: int = 0) -> Dataset:
    """``n`` conditional samples with extremeness probabilities drawn uniformly from (0, τ]."""
    c, k = shift
    rng = np.random.default_rng(seed)
    taus = tau * (1.0 - rng.random(n))
    levels = np.array([evt.extremeness_level(model.cond_gpd, evt.adjust_probability(t, c, k)) for t in taus])
    z = rng.standard_normal((n, model.latent_dim)).astype(np.float32)
    grids = generate_grids(model, z, levels)
    return Dataset.from_pixels(grids, origin=GENERATED, measure=model.measure)


# --- report ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    fid: float
    rec_loss: float
    mape_mean: float
    mape_std: float
    timing: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("fid", "rec_loss", "mape_mean", "mape_std"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"MetricsReport.{name} is not finite")

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("timing")
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        lines = [
            f"{'metric':<22}{'value':>14}",
            f"{'FID':<22}{self.fid:>14.6f}",
            f"{'reconstruction loss':<22}{self.rec_loss:>14.6f}",
            f"{'MAPE mean (%)':<22}{self.mape_mean:>14.4f}",
            f"{'MAPE std (%)':<22}{self.mape_std:>14.4f}",
        ]
        for key in sorted(self.extra):
            val = self.extra[key]
            if isinstance(val, float):
                lines.append(f"{key:<22}{val:>14.6f}")
        if self.timing:
            lines.append("")
            lines.append(format_timing(self.timing))
        return "\n".join(lines)


def format_timing(rows) -> str:
    """Fixed-width τ table; exhausted baseline cells print as '-'."""
    out = [f"{'tau':>10}{'exgan s/sample':>18}{'baseline s/sample':>20}{'baseline trials':>18}"]
    for r in rows:
        r = r if isinstance(r, dict) else r.to_dict()
        ex = "-" if r["exgan_seconds_per_sample"] is None else f"{r['exgan_seconds_per_sample']:.6f}"
        if r["baseline_trials"] is None:
            bt = bs = "-"
        elif r["baseline_exhausted"]:
            bt, bs = f">{r['baseline_trials']}", "-"
        else:
            bt, bs = str(r["baseline_trials"]), f"{r['baseline_seconds_per_sample']:.6f}"
        out.append(f"{r['tau']:>10g}{ex:>18}{bs:>20}{bt:>18}")
    return "\n".join(out)
