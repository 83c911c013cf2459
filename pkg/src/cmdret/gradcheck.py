"""Central finite-difference verification of reverse-mode gradients.

``finite_diff_check`` takes a loss function written in autodiff ops, runs
it once under a tape to collect analytic gradients, then probes every
parameter element with central differences (f(x+h) - f(x-h)) / 2h and
reports the worst relative error per parameter. The probing evaluations
run without a tape, so the two routes share the forward code but nothing
of the differentiation machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tape, Tensor
from .errors import DeterminismError

# Relative error with an absolute fallback for near-zero gradient pairs:
# err = |fd - ad| / max(|fd|, |ad|) when either magnitude exceeds the floor,
# else plain |fd - ad|.
_REL_FLOOR = 1e-8


@dataclass
class ParamCheck:
    name: str
    max_error: float
    worst_index: int
    checked: int


@dataclass
class GradCheckReport:
    per_param: dict[str, ParamCheck]
    h: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(c.max_error < self.tol for c in self.per_param.values())

    def worst(self) -> ParamCheck:
        return max(self.per_param.values(), key=lambda c: c.max_error)

    def failures(self) -> list[ParamCheck]:
        return [c for c in self.per_param.values() if c.max_error >= self.tol]

    def summary_lines(self) -> list[str]:
        lines = []
        for name in sorted(self.per_param):
            c = self.per_param[name]
            status = "ok" if c.max_error < self.tol else "FAIL"
            lines.append(f"{name}: max rel err {c.max_error:.3e} at index {c.worst_index} [{status}]")
        w = self.worst()
        lines.append(
            f"worst: {w.name}[{w.worst_index}] = {w.max_error:.3e} "
            f"({'PASS' if self.passed else 'FAIL'} at tol {self.tol:g}, h={self.h:g})"
        )
        return lines


def _error(fd: float, ad: float) -> float:
    denom = max(abs(fd), abs(ad))
    if denom < _REL_FLOOR:
        return abs(fd - ad)
    return abs(fd - ad) / denom


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must map the parameter mapping to a scalar loss Tensor, be
    deterministic, and must not manage tapes itself; the harness owns them.
    Parameter gradients are overwritten as a side effect.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")

    v1 = float(f(params).data.reshape(()))
    v2 = float(f(params).data.reshape(()))
    if v1 != v2:
        raise DeterminismError(f"loss function is not deterministic: {v1!r} != {v2!r}")

    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f(params)
        tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for p in params.values():
        p.zero_grad()

    per_param: dict[str, ParamCheck] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = analytic[name].reshape(-1)
        worst_err, worst_idx = 0.0, 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(params).data.reshape(()))
            flat[i] = orig - h
            f_minus = float(f(params).data.reshape(()))
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = _error(fd, grad[i])
            if err > worst_err:
                worst_err, worst_idx = err, i
        per_param[name] = ParamCheck(name, worst_err, worst_idx, flat.size)

    return GradCheckReport(per_param=per_param, h=h, tol=tol)
