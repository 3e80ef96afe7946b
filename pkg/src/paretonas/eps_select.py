"""Perturbation-budget selection by accuracy sweep.

Sweeps L-infinity budgets over a grid, finds the budget where accuracy drops
to half its clean value, and derives a bracketing low/high pair at roughly
one tenth and three times that budget, all snapped onto the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .evaluator import EvalStatus, EvaluationRequest, Evaluator, EvaluatorError
from .genotype import Genotype

DEFAULT_EPS_MIN = 1e-5
DEFAULT_EPS_MAX = 1e-1
_SPACINGS = ("log", "linear", "decade")
_DECADE_MANTISSAS = (1, 3)
_FLAT_ATOL = 1e-12


class DegenerateCurveError(ValueError):
    """The sweep produced a constant curve; the grid must be extended."""


def _decade_values(eps_min: float, eps_max: float) -> tuple[float, ...]:
    """All values m * 10^k with m in {1, 3} inside [eps_min, eps_max]."""
    k_lo = math.floor(math.log10(eps_min)) - 1
    k_hi = math.ceil(math.log10(eps_max)) + 1
    vals = []
    for k in range(k_lo, k_hi + 1):
        for m in _DECADE_MANTISSAS:
            v = float(f"{m}e{k}")  # decimal parse keeps 3e-3 etc. exact
            if eps_min <= v <= eps_max:
                vals.append(v)
    return tuple(sorted(vals))


@dataclass(frozen=True)
class EpsilonGrid:
    """Candidate perturbation budgets to sweep.

    ``decade`` spacing enumerates 1-3-10 mantissa steps, matching the usual
    reporting convention for budgets like 3e-3 / 3e-2 / 1e-1 exactly, and is
    what :func:`choose_epsilons` uses by default.
    """

    eps_min: float
    eps_max: float
    points: int
    spacing: str = "log"

    def __post_init__(self) -> None:
        if self.spacing not in _SPACINGS:
            raise ValueError(f"spacing must be one of {_SPACINGS}")
        if not self.eps_min < self.eps_max:
            raise ValueError("eps_min must be strictly below eps_max")
        if self.eps_min < 0 or (self.spacing != "linear" and self.eps_min <= 0):
            raise ValueError("eps_min must be positive (non-negative for linear)")
        if self.points < 3:
            raise ValueError("need at least 3 grid points")
        if self.spacing == "decade":
            n = len(_decade_values(self.eps_min, self.eps_max))
            if self.points != n:
                raise ValueError(
                    f"decade grid over this range has {n} points, not {self.points}")

    @classmethod
    def decade(cls, eps_min: float = DEFAULT_EPS_MIN,
               eps_max: float = DEFAULT_EPS_MAX) -> "EpsilonGrid":
        n = len(_decade_values(eps_min, eps_max))
        if n < 3:
            raise ValueError("range too narrow for a decade grid")
        return cls(eps_min=eps_min, eps_max=eps_max, points=n, spacing="decade")

    def values(self) -> tuple[float, ...]:
        if self.spacing == "decade":
            return _decade_values(self.eps_min, self.eps_max)
        if self.spacing == "log":
            pts = np.geomspace(self.eps_min, self.eps_max, self.points)
        else:
            pts = np.linspace(self.eps_min, self.eps_max, self.points)
        return tuple(float(v) for v in pts)


@dataclass(frozen=True)
class EpsilonSelection:
    """The chosen search budget and its bracketing pair, plus the evidence.

    ``low_clamped`` / ``high_clamped`` warn that the eps_nas/10 or 3*eps_nas
    target fell outside the grid and the nearest end was used instead.
    """

    eps_nas: float
    eps_low: float
    eps_high: float
    accuracy_curve: tuple[tuple[float, float], ...]
    clean_accuracy: float
    low_clamped: bool = False
    high_clamped: bool = False

    def __post_init__(self) -> None:
        if not self.eps_low < self.eps_nas < self.eps_high:
            raise ValueError("selection must satisfy eps_low < eps_nas < eps_high")


def sweep_accuracy(evaluator: Evaluator, genotype: Genotype, grid: EpsilonGrid,
                   epochs: int = 1, seed: int = 0,
                   ) -> tuple[tuple[float, float], ...]:
    """Evaluate the probe genotype across the grid in one backend call.

    Returns (epsilon, accuracy) pairs led by an epsilon-zero entry, which the
    backend guarantees equals clean accuracy. Evaluator errors propagate.
    """
    values = grid.values()
    eps_list = values if values[0] == 0.0 else (0.0, *values)
    req = EvaluationRequest(id=0, genotype=genotype, epsilons=eps_list,
                            train_epochs=epochs, seed=seed)
    res = evaluator.evaluate(req)
    if res.status is not EvalStatus.OK:
        raise EvaluatorError("accuracy sweep evaluation failed")
    return tuple(zip(eps_list, (float(a) for a in res.adversarial_accuracies)))


def _snap_log(target: float, candidates: list[float]) -> float:
    # ties break toward the smaller value
    return min(candidates, key=lambda v: (abs(math.log(v) - math.log(target)), v))


def select_epsilons(curve) -> EpsilonSelection:
    """Pick the budget whose accuracy is nearest half the clean accuracy.

    The curve must start with the epsilon-zero entry followed by at least
    three strictly increasing positive grid points. The bracketing pair snaps
    eps_nas/10 and 3*eps_nas onto the grid by log distance; the half-accuracy
    index is kept interior so the strict low < nas < high ordering always
    holds, even when that costs one grid step of optimality at the ends.
    """
    pts = [(float(e), float(a)) for e, a in curve]
    if not pts or pts[0][0] != 0.0:
        raise ValueError("curve must start with the epsilon = 0 entry")
    acc0 = pts[0][1]
    grid = pts[1:]
    if len(grid) < 3:
        raise ValueError("need at least 3 grid points after the zero entry")
    eps = [e for e, _ in grid]
    accs = [a for _, a in grid]
    if eps[0] <= 0 or any(b <= a for a, b in zip(eps, eps[1:])):
        raise ValueError("grid epsilons must be positive and strictly increasing")
    all_accs = [acc0, *accs]
    if max(all_accs) - min(all_accs) <= _FLAT_ATOL:
        raise DegenerateCurveError(
            "accuracy never drops across the sweep; extend the grid")

    target = acc0 / 2
    idx = min(range(len(grid)), key=lambda i: (abs(accs[i] - target), eps[i]))
    idx = min(max(idx, 1), len(grid) - 2)
    eps_nas = eps[idx]
    low_target = eps_nas / 10
    high_target = 3 * eps_nas
    return EpsilonSelection(
        eps_nas=eps_nas,
        eps_low=_snap_log(low_target, eps[:idx]),
        eps_high=_snap_log(high_target, eps[idx + 1:]),
        accuracy_curve=tuple(pts),
        clean_accuracy=acc0,
        low_clamped=low_target < eps[0],
        high_clamped=high_target > eps[-1],
    )


def choose_epsilons(evaluator: Evaluator, genotype: Genotype,
                    grid: EpsilonGrid | None = None, epochs: int = 1,
                    seed: int = 0) -> EpsilonSelection:
    """Sweep then select, on the default decade grid unless one is given."""
    grid = grid if grid is not None else EpsilonGrid.decade()
    return select_epsilons(sweep_accuracy(evaluator, genotype, grid, epochs, seed))
