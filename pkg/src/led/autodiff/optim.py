"""Adam with bias correction."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, hyper):
    """One in-place Adam update of ``params`` (name -> Tensor) given ``grads``.

    ``state`` is updated in place and also returned.
    """
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return params, state


class Adam:
    """Stateful wrapper binding a parameter dict to :func:`adam_step`.

    Gradients are for a *loss* (minimisation); callers maximising an
    objective pass the negated objective to ``backward``.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.hyper = AdamHyper(lr, beta1, beta2, eps)
        self.state = AdamState()

    def step(self, gradients):
        grads = gradients.for_params(self.params) if hasattr(gradients, "for_params") else gradients
        adam_step(self.params, grads, self.state, self.hyper)

    def state_arrays(self):
        """Flat name -> array view of the moment estimates, for checkpoints."""
        out = {}
        for name in self.params:
            if name in self.state.m:
                out[f"adam.m.{name}"] = self.state.m[name]
                out[f"adam.v.{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays, step):
        self.state = AdamState(step=int(step))
        for name in self.params:
            key = f"adam.m.{name}"
            if key in arrays:
                self.state.m[name] = np.array(arrays[key], dtype=np.float64)
                self.state.v[name] = np.array(arrays[f"adam.v.{name}"], dtype=np.float64)
