"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import UsageError
from .autodiff import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None = None
    per_param: dict[str, float] = field(default_factory=dict)
    n_coords: int = 0

    def to_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "worst_param": self.worst_param,
            "worst_index": list(self.worst_index) if self.worst_index is not None else None,
            "per_param": self.per_param,
            "n_coords": self.n_coords,
        }


def _value(f, params) -> float:
    out = f(params)
    return float(out.data if isinstance(out, Tensor) else out)


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor],
               eps: float = 1e-5, floor: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of ``f`` against (f(p+eps) - f(p-eps)) / (2 eps).

    The relative error of each coordinate uses the denominator
    max(|analytic|, |numeric|, floor * max(1, |f|)), so coordinates whose
    gradient is that small are effectively compared in absolute terms
    (central differences carry roundoff of order 1e-16 |f| / eps, which
    would otherwise dominate a true zero). ``f`` must build its scalar output
    from the tensors in ``params`` and be deterministic.
    """
    if eps <= 0 or floor <= 0:
        raise UsageError("eps and floor must be positive")
    with Tape() as tape:
        loss = f(params)
    analytic = backward(loss, tape, params)
    first = float(loss.data)
    if _value(f, params) != first:
        raise UsageError("function is not deterministic: repeated evaluations differ")

    tiny = floor * max(1.0, abs(first))
    worst, worst_name, worst_idx = 0.0, None, None
    per_param: dict[str, float] = {}
    n = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = analytic[name].reshape(-1)
        local = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = _value(f, params)
            flat[i] = orig - eps
            f_minus = _value(f, params)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(g[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), tiny)
            n += 1
            if rel > local:
                local = rel
            if rel > worst or worst_name is None:
                worst, worst_name = rel, name
                worst_idx = tuple(int(j) for j in np.unravel_index(i, p.shape))
        per_param[name] = local
    return GradCheckReport(worst, worst_name, worst_idx, per_param, n)
