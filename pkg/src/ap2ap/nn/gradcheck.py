"""Finite-difference verification of reverse-mode gradients.

Central differences at 64-bit precision with step 1e-5 resolve gradients to
roughly 1e-10 absolute, so a 1e-4 relative tolerance cleanly separates a
correct backward pass from a broken one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ParamStore


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        verdict = "OK" if self.passed else "FAIL"
        return (f"grad check {verdict}: max rel err {self.max_rel_error:.3e} "
                f"at {self.worst_param} ({self.n_checked} entries, tol {self.tolerance:.0e})")


def grad_check(loss_fn, store: ParamStore, step: float = 1e-5,
               tolerance: float = 1e-4, max_entries_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn()`` (a closure over the
    parameters in ``store``) against central finite differences.

    Checks every parameter entry unless ``max_entries_per_param`` caps it,
    in which case entries are subsampled with ``rng``.
    """
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for k, t in store.items()}

    worst = 0.0
    worst_name = ""
    n_checked = 0
    for name, t in store.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + step
            hi = loss_fn().item()
            flat[i] = keep - step
            lo = loss_fn().item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * step)
            denom = max(1.0, abs(a_flat[i]), abs(numeric))
            rel = abs(a_flat[i] - numeric) / denom
            n_checked += 1
            if rel > worst:
                worst = rel
                worst_name = f"{name}[{i}]"
    return GradCheckReport(worst, worst_name, n_checked, tolerance)
