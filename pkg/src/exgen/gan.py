"""Adversarial training: unconditional DCGAN and extremeness-conditioned GAN.

Stabilization follows the usual recipe: noisy labels (real in [0.7, 1.2],
fake in [0, 0.3]), label flips with probability 0.05, Gaussian noise on the
discriminator input decaying linearly to zero, per-component gradient
clipping and a lower discriminator learning rate. One discriminator step then
one generator step per batch.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evt
from .dataset import GENERATED, MEASURES, RAINFALL_TOTAL, Dataset, Measure, sample_latent
from .evt import GpdParams
from .substrate import (
    ModelParams,
    OptimConfig,
    adam_step,
    apply,
    build_model,
    discriminator_arch,
    generator_arch,
    gradients,
    load_checkpoint,
    param_tensors,
    save_checkpoint,
)
from .substrate import tensor as T

__all__ = [
    "TrainConfig",
    "GanModel",
    "TrainingDivergedError",
    "ConditioningError",
    "gan_losses",
    "gan_losses_from_logits",
    "ext_loss",
    "draw_labels",
    "input_noise_schedule",
    "sample_conditioning",
    "train_unconditional",
    "train_conditional",
    "sample_model",
    "generate_grids",
    "save_gan",
    "load_gan",
]

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, what: str):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch: int = 256
    label_real: tuple[float, float] = (0.7, 1.2)
    label_fake: tuple[float, float] = (0.0, 0.3)
    flip_prob: float = 0.05
    d_input_noise: float = 1e-5
    ext_weight: float = 1.0
    latent_dim: int = 20
    arch: str = "conv"
    width: int = 16
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        for lo, hi in (self.label_real, self.label_fake):
            if not 0.0 <= lo <= hi <= 1.2:
                raise ValueError("label ranges must lie within [0, 1.2]")
        if not 0.0 <= self.flip_prob < 1.0:
            raise ValueError("flip_prob must be in [0, 1)")
        if self.d_input_noise < 0 or self.ext_weight < 0:
            raise ValueError("d_input_noise and ext_weight must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_real"] = list(self.label_real)
        d["label_fake"] = list(self.label_fake)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["optim"] = OptimConfig(**d.get("optim", {}))
        d["label_real"] = tuple(d.get("label_real", (0.7, 1.2)))
        d["label_fake"] = tuple(d.get("label_fake", (0.0, 0.3)))
        return cls(**d)


@dataclass
class GanModel:
    generator: ModelParams
    discriminator: ModelParams
    conditional: bool = False
    cond_gpd: GpdParams | None = None
    ext_scale: float = 1.0
    latent_dim: int = 20
    measure: Measure = RAINFALL_TOTAL

    def __post_init__(self):
        if self.conditional and self.cond_gpd is None:
            raise ConditioningError("a conditional model needs its conditioning GPD")
        if not self.ext_scale > 0:
            raise ConditioningError(f"ext_scale must be positive, got {self.ext_scale}")

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.discriminator.arch["input"])


# --- losses -------------------------------------------------------------------------


def gan_losses(d_real_out, d_fake_out, labels: tuple | None = None) -> tuple[float, float]:
    """Discriminator and non-saturating generator BCE losses from probabilities.

    ``labels`` is ``(real_targets, fake_targets)``; plain 1/0 when omitted.
    The discriminator loss is ``bce(D(x), real) + bce(D(G(z)), fake)``; the
    generator loss is ``bce(D(G(z)), 1) = -mean log D(G(z))``.
    """
    real = np.asarray(d_real_out, dtype=np.float64)
    fake = np.asarray(d_fake_out, dtype=np.float64)
    if labels is None:
        labels = (np.ones_like(real), np.zeros_like(fake))
    loss_d = T.bce(real, labels[0]).data + T.bce(fake, labels[1]).data
    loss_g = T.bce(fake, np.ones_like(fake)).data
    return float(loss_d), float(loss_g)


def gan_losses_from_logits(real_logits, fake_logits, labels: tuple | None = None):
    """Tensor-valued ``(loss_d, loss_g)`` from discriminator logits."""
    real, fake = T.as_tensor(real_logits), T.as_tensor(fake_logits)
    if labels is None:
        labels = (np.ones(real.shape), np.zeros(fake.shape))
    loss_d = T.bce_with_logits(real, labels[0]) + T.bce_with_logits(fake, labels[1])
    loss_g = T.bce_with_logits(fake, np.ones(fake.shape))
    return loss_d, loss_g


def ext_loss(e_batch, generated, measure: Measure = RAINFALL_TOTAL):
    """Mean relative extremeness error ``|e - E(G)| / e`` over the batch.

    ``generated`` is a (B, H, W) array or tensor; returns a scalar tensor.
    """
    e = np.asarray(e_batch, dtype=np.float64).reshape(-1)
    if np.any(~(e > 0)):
        raise ConditioningError("conditioning extremeness must be positive")
    got = measure.tensor(T.as_tensor(generated))
    return T.mean(T.absolute(got - e) / e)


def draw_labels(rng: np.random.Generator, n: int, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Noisy real/fake targets, each swapped with probability ``flip_prob``."""
    real = rng.uniform(*config.label_real, size=n)
    fake = rng.uniform(*config.label_fake, size=n)
    if config.flip_prob > 0:
        flip = rng.random(n) < config.flip_prob
        real, fake = np.where(flip, fake, real), np.where(flip, real, fake)
    return real.reshape(n, 1), fake.reshape(n, 1)


def input_noise_schedule(start: float, total_steps: int) -> np.ndarray:
    """Linear decay from ``start`` at the first step to exactly 0 at the last."""
    if total_steps <= 1:
        return np.zeros(max(total_steps, 0))
    return start * (1.0 - np.arange(total_steps) / (total_steps - 1))


def sample_conditioning(gpd: GpdParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Extremeness values ``offset_u + GPD`` draws via inverse-CDF sampling."""
    return gpd.offset_u + evt.gpd_quantile(rng.random(n), gpd)


# --- training ---------------------------------------------------------------------


def _new_models(size: tuple[int, int], config: TrainConfig, cond: bool, seed: int) -> tuple[ModelParams, ModelParams]:
    if size[0] != size[1]:
        raise ValueError(f"square grids required, got {size}")
    c = 1 if cond else 0
    g = build_model(generator_arch(size[0], config.latent_dim, c, config.arch, config.width), seed)
    d = build_model(discriminator_arch(size[0], c, config.arch, config.width), seed + 1)
    return g, d


def _transfer(src: ModelParams, dst: ModelParams) -> ModelParams:
    """Copy overlapping weights from ``src`` into ``dst``.

    Where the conditioning input widens a dense/conv input dimension, the
    source block is copied and the extra rows keep their fresh initialization.
    """
    out = {}
    for name, t in dst.tensors.items():
        s = src.tensors.get(name)
        if s is None:
            out[name] = t.copy()
        elif s.shape == t.shape:
            out[name] = s.astype(t.dtype, copy=True)
        elif s.ndim == t.ndim and all(a <= b for a, b in zip(s.shape, t.shape)):
            new = t.copy()
            new[tuple(slice(0, n) for n in s.shape)] = s
            out[name] = new
        else:
            raise ValueError(f"cannot warm-start {name}: {s.shape} -> {t.shape}")
    return ModelParams(dst.arch, out)


def _align_layers(src: ModelParams, dst: ModelParams) -> ModelParams:
    """Rename ``src`` tensors so layer indices match ``dst`` (which may have a leading cond layer)."""
    s_idx = [i for i, l in enumerate(src.arch["layers"]) if l["op"] in ("dense", "conv", "convT")]
    d_idx = [i for i, l in enumerate(dst.arch["layers"]) if l["op"] in ("dense", "conv", "convT")]
    if len(s_idx) != len(d_idx):
        raise ValueError("warm start requires the same number of parametric layers")
    mapping = dict(zip(s_idx, d_idx))
    tensors = {}
    for name, t in src.tensors.items():
        i, kind = name.split(".")
        tensors[f"{mapping[int(i)]}.{kind}"] = t
    return ModelParams(src.arch, tensors)


def _check_finite(what: str, epoch: int, batch: int, *values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise TrainingDivergedError(epoch, batch, what)


def _run_training(ds: Dataset, config: TrainConfig, g: ModelParams, d: ModelParams, lr_g: float, lr_d: float,
                  cond_gpd: GpdParams | None, ext_scale: float, measure: Measure) -> tuple[ModelParams, ModelParams]:
    rng = np.random.default_rng(config.seed)
    conditional = cond_gpd is not None
    n = ds.n
    batches_per_epoch = math.ceil(n / config.batch)
    noise = input_noise_schedule(config.d_input_noise, config.epochs * batches_per_epoch)
    data = ds.pixels
    real_ext = ds.extremeness
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for b in range(batches_per_epoch):
            idx = order[b * config.batch:(b + 1) * config.batch]
            bs = idx.size
            x = data[idx]
            z = sample_latent(bs, config.latent_dim, rng)
            level = noise[step]
            step += 1
            if conditional:
                e = sample_conditioning(cond_gpd, bs, rng)
                g_cond = (e / ext_scale).reshape(bs, 1)
                r_cond = (real_ext[idx] / ext_scale).reshape(bs, 1)
            else:
                e = g_cond = r_cond = None
            real_t, fake_t = draw_labels(rng, bs, config)

            # discriminator step
            g_const = param_tensors(g, requires_grad=False)
            fake = apply(g.arch, g_const, z, g_cond).data
            d_par = param_tensors(d)
            x_in = x + level * rng.standard_normal(x.shape).astype(x.dtype) if level > 0 else x
            f_in = fake + level * rng.standard_normal(fake.shape).astype(fake.dtype) if level > 0 else fake
            stop = len(d.arch["layers"]) - 1  # logits; the sigmoid is folded into the loss
            real_logit = apply(d.arch, d_par, x_in, r_cond, stop=stop)
            fake_logit = apply(d.arch, d_par, f_in, g_cond, stop=stop)
            loss_d, _ = gan_losses_from_logits(real_logit, fake_logit, (real_t, fake_t))
            _check_finite("discriminator loss", epoch, b, loss_d.data)
            d = adam_step(d, gradients(loss_d, d_par), lr_d, config.optim)

            # generator step
            g_par = param_tensors(g)
            d_const = param_tensors(d, requires_grad=False)
            fake_t_ = apply(g.arch, g_par, z, g_cond)
            f_in = fake_t_ + (level * rng.standard_normal(fake_t_.shape)).astype(fake.dtype) if level > 0 else fake_t_
            logit = apply(d.arch, d_const, f_in, g_cond, stop=stop)
            loss_g = T.bce_with_logits(logit, np.ones(logit.shape))
            if conditional and config.ext_weight > 0:
                loss_g = loss_g + config.ext_weight * ext_loss(e, fake_t_, measure)
            _check_finite("generator loss", epoch, b, loss_g.data)
            grads = gradients(loss_g, g_par)
            _check_finite("generator gradient", epoch, b, *grads.values())
            g = adam_step(g, grads, lr_g, config.optim)
        log.debug("epoch %d done", epoch)
    _check_finite("parameters", config.epochs, 0, *g.tensors.values(), *d.tensors.values())
    return g, d


def train_unconditional(ds: Dataset, config: TrainConfig, warm_from: GanModel | None = None) -> GanModel:
    """Train a DCGAN on ``ds``; warm starts reuse weights and the lowered learning rates."""
    if ds.n == 0:
        raise ValueError("cannot train on an empty dataset")
    g, d = _new_models((ds.height, ds.width), config, False, config.seed)
    lr_g, lr_d = config.optim.lr_g, config.optim.lr_d
    if warm_from is not None:
        g = _transfer(_align_layers(warm_from.generator, g), g)
        d = _transfer(_align_layers(warm_from.discriminator, d), d)
        lr_g, lr_d = config.optim.warm_lr_g, config.optim.warm_lr_d
    g, d = _run_training(ds, config, g, d, lr_g, lr_d, None, 1.0, ds.measure)
    return GanModel(g, d, False, None, 1.0, config.latent_dim, ds.measure)


def train_conditional(ds: Dataset, cond_gpd: GpdParams, config: TrainConfig,
                      warm_from: GanModel | None = None, warm_lr: bool = False) -> GanModel:
    """Train an extremeness-conditioned GAN.

    Per batch the generator gets ``e ~ cond_gpd`` (offset included) and the
    discriminator sees ``(x, E(x))`` for real and ``(G(z, e), e)`` for fake
    grids. Conditioning values enter the networks divided by the largest
    training extremeness. ``warm_from`` seeds the weights (extra conditioning
    rows stay freshly initialized); learning rates stay at the base values
    unless ``warm_lr``.
    """
    if ds.n == 0:
        raise ValueError("cannot train on an empty dataset")
    if not cond_gpd.offset_u + 0.0 > 0:
        raise ConditioningError("conditioning distribution must start above zero extremeness")
    ext_scale = float(np.max(ds.extremeness))
    g, d = _new_models((ds.height, ds.width), config, True, config.seed)
    if warm_from is not None:
        g = _transfer(_align_layers(warm_from.generator, g), g)
        d = _transfer(_align_layers(warm_from.discriminator, d), d)
    lr_g, lr_d = ((config.optim.warm_lr_g, config.optim.warm_lr_d) if warm_lr
                  else (config.optim.lr_g, config.optim.lr_d))
    g, d = _run_training(ds, config, g, d, lr_g, lr_d, cond_gpd, ext_scale, ds.measure)
    return GanModel(g, d, True, cond_gpd, ext_scale, config.latent_dim, ds.measure)


# --- sampling ---------------------------------------------------------------------


def generate_grids(model: GanModel, z: np.ndarray, e=None, chunk: int = 512) -> np.ndarray:
    """Generator output for latent rows ``z`` (and conditioning ``e`` when conditional)."""
    if model.conditional and e is None:
        raise ConditioningError("conditional model needs an extremeness value")
    if not model.conditional and e is not None:
        raise ConditioningError("unconditional model does not take an extremeness value")
    n = z.shape[0]
    if e is not None:
        e = np.broadcast_to(np.asarray(e, dtype=np.float64), (n,))
        if np.any(~(e > 0)):
            raise ConditioningError("extremeness must be positive")
        cond = (e / model.ext_scale).astype(np.float32).reshape(n, 1)
    params = param_tensors(model.generator, requires_grad=False)
    out = []
    for s in range(0, n, chunk):
        c = None if e is None else cond[s:s + chunk]
        out.append(apply(model.generator.arch, params, z[s:s + chunk], c).data)
    return np.concatenate(out) if out else np.zeros((0, *model.size), dtype=np.float32)


def sample_model(model: GanModel, count: int, e=None, seed: int = 0, id_start: int = 0) -> Dataset:
    """Draw ``count`` grids with ``z ~ N(0, I)``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    z = sample_latent(count, model.latent_dim, rng)
    grids = generate_grids(model, z, e)
    ds = Dataset.from_pixels(grids, ids=np.arange(id_start, id_start + count), origin=GENERATED,
                             measure=model.measure)
    return ds


# --- persistence --------------------------------------------------------------------


def save_gan(path: str | os.PathLike, model: GanModel, meta: dict | None = None) -> None:
    manifest = dict(meta or {})
    manifest.update({
        "conditional": model.conditional,
        "cond_gpd": model.cond_gpd.to_dict() if model.cond_gpd else None,
        "ext_scale": model.ext_scale,
        "latent_dim": model.latent_dim,
        "measure": model.measure.name,
    })
    save_checkpoint(path, {"G": model.generator, "D": model.discriminator}, manifest)


def load_gan(path: str | os.PathLike) -> tuple[GanModel, dict]:
    models, meta = load_checkpoint(path)
    gpd = GpdParams.from_dict(meta["cond_gpd"]) if meta.get("cond_gpd") else None
    model = GanModel(models["G"], models["D"], bool(meta["conditional"]), gpd, float(meta["ext_scale"]),
                     int(meta["latent_dim"]), MEASURES[meta.get("measure", RAINFALL_TOTAL.name)])
    return model, meta
