"""Finite-difference verification of analytic gradients.

The checker perturbs each parameter entry by +-h, re-evaluates a scalar
loss, and compares the central difference against the analytic gradient
stored on the parameter. Large blocks can be spot-checked on a random
subsample of entries; the report carries the max relative error per
block either way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ParamTensor

DEFAULT_H = 1e-5
DEFAULT_TOLERANCE = 1e-4

# Entries smaller than this are judged on an absolute scale: the
# denominator of the relative error never drops below the floor, so
# finite-difference round-off on near-zero entries is not flagged while
# a genuinely missing gradient contribution still is.
REL_ERROR_FLOOR = 1e-3


@dataclass
class BlockReport:
    name: str
    max_rel_error: float
    entries_checked: int
    entries_total: int

    def __str__(self) -> str:
        sub = "" if self.entries_checked == self.entries_total else (
            f" ({self.entries_checked}/{self.entries_total} entries)")
        return f"{self.name}: max rel err {self.max_rel_error:.3e}{sub}"


@dataclass
class GradCheckReport:
    tolerance: float
    blocks: list[BlockReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.max_rel_error <= self.tolerance for b in self.blocks)

    @property
    def worst(self) -> float:
        return max((b.max_rel_error for b in self.blocks), default=0.0)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"gradient check [{status}] tolerance {self.tolerance:g}"]
        lines += [f"  {b}" for b in self.blocks]
        return "\n".join(lines)


def rel_error(analytic: float, numeric: float, floor: float = REL_ERROR_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(loss_fn, params: dict[str, ParamTensor],
                      tolerance: float = DEFAULT_TOLERANCE, h: float = DEFAULT_H,
                      max_entries: int = 0, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn() must evaluate the scalar loss from the params' current
    values (it is called repeatedly while entries are perturbed in
    place). Each param's .grad must already hold the analytic gradient
    at the unperturbed point. When max_entries > 0, blocks larger than
    that are checked on a seeded random subsample.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        flat_v = p.value.reshape(-1)
        flat_g = p.grad.reshape(-1)
        n = flat_v.size
        if max_entries and n > max_entries:
            positions = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            positions = np.arange(n)
        worst = 0.0
        for i in positions:
            orig = flat_v[i]
            flat_v[i] = orig + h
            loss_plus = float(loss_fn())
            flat_v[i] = orig - h
            loss_minus = float(loss_fn())
            flat_v[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            worst = max(worst, rel_error(float(flat_g[i]), numeric))
        report.blocks.append(BlockReport(
            name=name, max_rel_error=worst,
            entries_checked=len(positions), entries_total=n,
        ))
    return report
