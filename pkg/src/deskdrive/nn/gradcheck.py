"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .params import ParamStore


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def failing(self) -> list[ParamCheck]:
        return [p for p in self.params if p.max_rel_err >= self.tol]


def grad_check(loss_fn, store: ParamStore, eps: float = 1e-4,
               tol: float = 1e-3, rel_floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of `loss_fn()` against central differences.

    `loss_fn` must be deterministic, read parameters through `store.var`,
    and return a scalar Var. Relative error uses a small floor so
    coordinates with (near) zero gradient on both sides do not blow up.
    """
    store.zero_grads()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {name: store.grad(name).copy() for name in store.names()}

    report = GradCheckReport(tol=tol)
    for name in store.names():
        values = store.value(name)
        ana = analytic[name]
        worst = 0.0
        worst_idx = ()
        worst_pair = (0.0, 0.0)
        it = np.nditer(values, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = values[idx]
            values[idx] = orig + eps
            up = float(loss_fn().data)
            values[idx] = orig - eps
            down = float(loss_fn().data)
            values[idx] = orig
            num = (up - down) / (2.0 * eps)
            a = float(ana[idx])
            err = abs(a - num) / max(abs(a), abs(num), rel_floor)
            if err > worst:
                worst, worst_idx, worst_pair = err, idx, (a, num)
            it.iternext()
        report.params.append(ParamCheck(name, worst, worst_idx, *worst_pair))
    return report
