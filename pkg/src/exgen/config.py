"""Flat run configuration shared by every CLI command."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

from .evt import GpdParams
from .gan import TrainConfig
from .pipeline import PipelineConfig
from .substrate import OptimConfig

__all__ = ["RunConfig", "ConfigError", "from_dict", "load_config"]


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    """Every tunable, with desk-scale defaults.

    Network and optimizer settings default to the reference values; grid size,
    batch size, epoch counts and the L_ext weight are scaled for CPU runs.
    """

    seed: int = 0
    # data
    n: int = 2000
    size: int = 32
    tail_sigma: float = 1.0
    tail_xi: float = 0.2
    tail_u: float = 0.0
    test_n: int = 2000
    threshold_q: float = 0.95
    # shifting
    c: float = 0.75
    k: int = 3
    initial_epochs: int = 30
    epochs: int = 30
    cond_epochs: int = 60
    warm_start: bool = True
    no_shift: bool = False
    # networks and training
    arch: str = "conv"
    width: int = 16
    latent_dim: int = 20
    batch: int = 32
    ext_weight: float = 20.0
    flip_prob: float = 0.05
    d_input_noise: float = 1e-5
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    clip: float = 20.0
    warm_lr_g: float = 2e-5
    warm_lr_d: float = 1e-5
    # sampling
    tau: float = 0.01
    count: int = 16
    tolerance: float = 0.1
    budget: int = 1_000_000
    taus: tuple = (0.05, 0.01, 0.001, 0.0001)
    # evaluation
    mape_n_eval: int = 1000
    rec_steps: int = 2000
    ae_epochs: int = 50
    eval_tau: float = 0.05

    def __post_init__(self):
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(key, msg)
        need(self.n >= 1, "n", "must be >= 1")
        need(self.size >= 4 and self.size & (self.size - 1) == 0, "size", "must be a power of two >= 4")
        need(0 < self.c < 1, "c", "must lie in (0, 1)")
        need(self.k >= 0, "k", "must be >= 0")
        need(min(self.initial_epochs, self.epochs, self.cond_epochs) >= 1, "epochs", "must be >= 1")
        need(self.arch in ("conv", "mlp"), "arch", "must be 'conv' or 'mlp'")
        need(self.batch >= 1, "batch", "must be >= 1")
        need(0 < self.tau < 1, "tau", "must lie in (0, 1)")
        need(self.count >= 1, "count", "must be >= 1")
        need(self.tolerance > 0, "tolerance", "must be positive")
        need(self.budget >= 0, "budget", "must be >= 0")
        need(len(self.taus) > 0 and all(0 < t < 1 for t in self.taus), "taus", "values must lie in (0, 1)")
        need(0 < self.threshold_q < 1, "threshold_q", "must lie in (0, 1)")
        need(0 < self.eval_tau <= 1, "eval_tau", "must lie in (0, 1]")
        need(self.tail_sigma > 0, "tail_sigma", "must be positive")

    @property
    def tail(self) -> GpdParams:
        return GpdParams(self.tail_sigma, self.tail_xi, self.tail_u)

    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr_g, self.lr_d, self.beta1, self.beta2, 1e-8, self.clip,
                           self.warm_lr_g, self.warm_lr_d)

    def train(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch=self.batch, flip_prob=self.flip_prob,
                           d_input_noise=self.d_input_noise, ext_weight=self.ext_weight,
                           latent_dim=self.latent_dim, arch=self.arch, width=self.width, seed=self.seed,
                           optim=self.optim())

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.c, self.k, self.train(), self.initial_epochs, self.epochs, self.cond_epochs,
                              self.warm_start, self.threshold_q)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["taus"] = list(self.taus)
        return d

    def merged(self, overrides: dict) -> "RunConfig":
        return from_dict({**self.to_dict(), **overrides})


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "tuple":
            return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(key, f"invalid value {value!r} (expected {kind})")


def from_dict(d: dict) -> RunConfig:
    unknown = sorted(set(d) - set(_TYPES))
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    return RunConfig(**{k: _coerce(k, v) for k, v in d.items()})


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> RunConfig:
    """Flat JSON file (optional) with ``overrides`` applied on top."""
    base = {}
    if path is not None:
        try:
            base = json.loads(open(path).read())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"not valid JSON: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError("config", "top level must be a JSON object")
    return from_dict({**base, **(overrides or {})})

