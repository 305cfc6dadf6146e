"""First-order optimizers acting on :class:`ParameterSet` entries in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fraug.params import ParameterSet

KINDS = ("sgd", "sgd-momentum", "adam")


@dataclass
class OptimizerState:
    kind: str = "sgd-momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float | None = None
    buffers: dict[str, tuple[np.ndarray, ...]] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}; expected one of {KINDS}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")


def optimizer_step(params: ParameterSet, state: OptimizerState, role_filter=None, grads=None) -> ParameterSet:
    """Apply one update to the trainable entries of ``params``.

    Entries whose role is outside ``role_filter`` (and statistics buffers)
    are left untouched, as are their auxiliary buffers. Gradients are read
    from each tensor's ``grad`` slot unless ``grads`` maps names to arrays.
    """
    if role_filter is not None:
        role_filter = set(role_filter)
        unknown = role_filter - params.roles()
        if unknown:
            raise ValueError(f"role filter names roles absent from the parameter set: {sorted(unknown)}")
    state.step_count += 1
    lr = state.learning_rate
    live = []
    for name, t, role in params.items():
        if not t.requires_grad or (role_filter is not None and role not in role_filter):
            continue
        g = grads[name] if grads is not None and name in grads else t.grad
        if g is None:
            raise ValueError(f"no gradient for parameter {name!r}")
        if g.shape != t.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name!r} {t.shape}")
        live.append((name, t, g))
    if state.max_grad_norm is not None and live:
        # one global norm over everything this step touches
        norm = float(np.sqrt(sum(float(np.vdot(g, g)) for _, _, g in live)))
        if norm > state.max_grad_norm:
            factor = state.max_grad_norm / norm
            live = [(n, t, g * np.asarray(factor, dtype=g.dtype)) for n, t, g in live]
    for name, t, g in live:
        if state.weight_decay:
            g = g + state.weight_decay * t.data
        if state.kind == "sgd":
            t.data -= lr * g
        elif state.kind == "sgd-momentum":
            buf = state.buffers.get(name)
            if buf is None:
                buf = (np.array(g, dtype=t.dtype, copy=True),)
                state.buffers[name] = buf
            else:
                vel = buf[0]
                vel *= state.momentum
                vel += g
            t.data -= lr * buf[0]
        else:
            b1, b2 = state.betas
            m, v, count = state.buffers.get(name, (np.zeros_like(t.data), np.zeros_like(t.data), np.zeros(1)))
            count += 1
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            state.buffers[name] = (m, v, count)
            mhat = m / (1 - b1 ** count[0])
            vhat = v / (1 - b2 ** count[0])
            t.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(t.dtype, copy=False)
    return params
