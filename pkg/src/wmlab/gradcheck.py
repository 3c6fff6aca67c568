"""Finite-difference gradient verification.

Central differences anchor the correctness of every hand-written backward
pass. Checks should run on float64 parameters (eps 1e-5); float32 checks are
supported with a coarser default step because subtraction cancellation at
float32 makes small steps meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore
from .tensor import Tensor


@dataclass
class EntryResult:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    max_rel_err: float = 0.0
    worst: EntryResult | None = None
    failures: list[EntryResult] = field(default_factory=list)
    checked_entries: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures

    def raise_on_failure(self):
        if self.failures:
            w = self.worst
            raise AssertionError(
                f"gradient check failed for '{w.param}' at {w.index}: "
                f"analytic {w.analytic:.6e} vs central-difference {w.numeric:.6e} "
                f"(rel err {w.rel_err:.3e} > tol {self.tol:.1e}); "
                f"{len(self.failures)} of {self.checked_entries} entries failed")


def _default_eps(dtype) -> float:
    return 1e-5 if dtype == np.float64 else 5e-3


def grad_check(f, params, eps: float | None = None, tol: float = 1e-6,
               max_entries_per_param: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar `f()` against central differences.

    `params` is a ParamStore or a list of (name, Tensor) pairs; aliased
    storage must appear once. `f` must be deterministic. When
    `max_entries_per_param` is set, a seeded random subset of entries is
    perturbed per parameter (every parameter is still covered).
    """
    if isinstance(params, ParamStore):
        items = params.unique()
    else:
        items = [(name, t) for name, t in params]
    if not items:
        raise ValueError("no parameters to check")

    for _, t in items:
        t.grad = None
    out = f()
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check target must return a scalar Tensor")
    out.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in items}

    if eps is None:
        eps = _default_eps(items[0][1].dtype)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, eps=eps)

    for name, t in items:
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(n)
        ga = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(ga[i])
            rel = abs(a - numeric) / max(1.0, abs(numeric))
            entry = EntryResult(name, np.unravel_index(int(i), t.shape),
                                a, numeric, rel)
            report.checked_entries += 1
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = entry
            if rel > tol:
                report.failures.append(entry)

    for _, t in items:
        t.grad = None
    return report
