"""Adam with per-component gradient clipping."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import AdamState, ModelParams

__all__ = ["OptimConfig", "adam_step", "KeyMismatchError"]


class KeyMismatchError(KeyError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 20.0
    warm_lr_g: float = 2e-5
    warm_lr_d: float = 1e-5

    def __post_init__(self):
        for name in ("lr_g", "lr_d", "warm_lr_g", "warm_lr_d", "eps", "clip"):
            if getattr(self, name) < 0 or (name in ("eps", "clip") and getattr(self, name) == 0):
                raise ValueError(f"OptimConfig.{name} must be positive, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def adam_step(model: ModelParams, grads: dict[str, np.ndarray], lr: float,
              config: OptimConfig) -> ModelParams:
    """One bias-corrected Adam update; returns a new :class:`ModelParams`.

    Each gradient component is clipped into ``[-clip, clip]`` first.
    """
    if set(grads) != set(model.tensors):
        missing = sorted(set(model.tensors) ^ set(grads))
        raise KeyMismatchError(f"gradient keys do not match parameters: {missing}")
    st = model.opt_state
    t = st.step + 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_t, new_m, new_v = {}, {}, {}
    for name, p in model.tensors.items():
        g = np.clip(grads[name], -config.clip, config.clip).astype(p.dtype, copy=False)
        m = st.m.get(name)
        v = st.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        m = m.astype(p.dtype, copy=False)
        v = v.astype(p.dtype, copy=False)
        step = (lr / corr1) * m / (np.sqrt(v / corr2) + config.eps)
        new_t[name] = (p - step).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m, v
    return ModelParams(model.arch, new_t, AdamState(t, new_m, new_v))
