"""AdamW with parameter groups and a warmup + cosine-decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


def lr_schedule(step: int, total_steps: int, warmup_ratio: float, lr_max: float) -> float:
    """Linear warmup over ceil(ratio * total) steps, then half-cosine down to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return lr_max * step / warmup
    if total_steps == warmup:
        return lr_max
    progress = (step - warmup) / (total_steps - warmup)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def no_decay(name: str) -> bool:
    """Biases and layer-norm parameters are exempt from weight decay."""
    return name.rsplit(".", 1)[-1] in ("b", "bias", "gain")


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor]
    lr: float
    weight_decay: float = 0.01


@dataclass
class AdamW:
    groups: list[ParamGroup]
    total_steps: int
    warmup_ratio: float = 0.06
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for g in self.groups:
            if g.lr < 0:
                raise ValueError(f"group {g.name}: negative learning rate")
            for name, p in g.params.items():
                if name in seen:
                    raise ValueError(f"parameter {name} appears in more than one group")
                seen.add(name)
                self.m.setdefault(name, np.zeros_like(p.data))
                self.v.setdefault(name, np.zeros_like(p.data))

    def current_lr(self, group: ParamGroup) -> float:
        step = min(self.step_count, self.total_steps)
        return lr_schedule(step, self.total_steps, self.warmup_ratio, group.lr)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params.values():
                p.grad = None

    def step(self) -> None:
        b1, b2 = self.betas
        t = self.step_count + 1
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for g in self.groups:
            lr = self.current_lr(g)
            for name, p in g.params.items():
                grad = p.grad
                if grad is None:
                    grad = np.zeros_like(p.data)
                elif not np.isfinite(grad).all():
                    raise FloatingPointError(f"non-finite gradient for {name}")
                m = self.m[name]
                v = self.v[name]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if g.weight_decay and not no_decay(name):
                    update = update + g.weight_decay * p.data
                p.data = p.data - lr * update
        self.step_count = t

    # -- checkpoint support ---------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = np.array(arrays[f"m/{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"v/{name}"], dtype=np.float64)
        self.step_count = step_count
