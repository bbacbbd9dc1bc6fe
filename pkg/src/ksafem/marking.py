"""Element marking strategies."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class MarkedSet:
    """Marked element indices (ascending) with the fraction of eta^2 they carry.

    ``zero_estimator`` is set when every indicator vanished; the set is then
    empty and the adaptive loop should treat the solve as converged.
    """

    indices: np.ndarray
    strategy: str
    fraction: float
    zero_estimator: bool = False

    def __len__(self) -> int:
        return len(self.indices)


def _eta2(indicators) -> np.ndarray:
    eta2 = np.asarray(getattr(indicators, "eta2", indicators), dtype=float)
    if eta2.ndim != 1 or np.any(eta2 < 0) or not np.all(np.isfinite(eta2)):
        raise InvalidInputError("indicators must be a finite nonnegative vector")
    return eta2


def mark_dorfler(indicators, theta: float) -> MarkedSet:
    """Minimal set carrying at least ``theta`` of the total squared estimator.

    Greedy prefix of the descending order; equal values are taken in
    ascending index order so the result is deterministic.
    """
    if not 0.0 < theta < 1.0:
        raise InvalidInputError(f"theta={theta} outside (0, 1)")
    eta2 = _eta2(indicators)
    total = eta2.sum()
    if total <= 0.0:
        return MarkedSet(np.zeros(0, dtype=np.int64), "dorfler", 0.0, zero_estimator=True)
    order = np.lexsort((np.arange(len(eta2)), -eta2))
    csum = np.cumsum(eta2[order])
    k = min(int(np.searchsorted(csum, theta * csum[-1], side="left")) + 1, len(eta2))
    return MarkedSet(np.sort(order[:k]), "dorfler", float(csum[k - 1] / csum[-1]))


def mark_maximum(indicators, gamma: float = 0.5) -> MarkedSet:
    """All elements with ``eta_T >= gamma * max eta``; always contains an argmax."""
    if not 0.0 < gamma <= 1.0:
        raise InvalidInputError(f"gamma={gamma} outside (0, 1]")
    eta2 = _eta2(indicators)
    total = eta2.sum()
    if total <= 0.0:
        return MarkedSet(np.zeros(0, dtype=np.int64), "maximum", 0.0, zero_estimator=True)
    # compare squares to keep argmax elements exact at gamma = 1
    chosen = np.flatnonzero(eta2 >= gamma ** 2 * eta2.max())
    return MarkedSet(chosen, "maximum", float(eta2[chosen].sum() / total))


def mark(indicators, strategy: str, parameter: float) -> MarkedSet:
    if strategy == "dorfler":
        return mark_dorfler(indicators, parameter)
    if strategy == "maximum":
        return mark_maximum(indicators, parameter)
    raise InvalidInputError(f"unknown marking strategy {strategy!r}")
