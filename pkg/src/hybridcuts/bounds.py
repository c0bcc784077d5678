"""Interval images of linear maps over boxes, constant shifts and mode fixing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyBoxError(ValueError):
    pass


@dataclass(frozen=True)
class IntervalImage:
    lower: np.ndarray
    upper: np.ndarray

    def shifted(self, f) -> "IntervalImage":
        f = np.asarray(f, float)
        return IntervalImage(self.lower + f, self.upper + f)


def interval_image(A, lb, ub) -> IntervalImage:
    """Exact componentwise range of ``A x`` over the box ``lb <= x <= ub``.

    Zero entries of ``A`` are skipped, so infinite box sides only matter
    where they actually enter a row.
    """
    A = np.atleast_2d(np.asarray(A, float))
    lb = np.atleast_1d(np.asarray(lb, float))
    ub = np.atleast_1d(np.asarray(ub, float))
    bad = np.flatnonzero(lb > ub)
    if bad.size:
        raise EmptyBoxError(f"empty box in coordinate(s) {bad.tolist()}")
    with np.errstate(invalid="ignore"):
        lo_terms = np.where(A > 0, A * lb, np.where(A < 0, A * ub, 0.0))
        hi_terms = np.where(A > 0, A * ub, np.where(A < 0, A * lb, 0.0))
    return IntervalImage(lo_terms.sum(axis=1), hi_terms.sum(axis=1))


def shift_for_f(a_x1, la, ua, f):
    """Move the dynamics constant into the image: (a x_1 + f, l_a + f, u_a + f).

    ``a_x1`` may be a number, an array, or any object supporting ``+``.
    """
    return a_x1 + f, np.asarray(la) + f, np.asarray(ua) + f


@dataclass(frozen=True)
class FixDecision:
    fix: bool
    coordinate: int | None = None
    reason: str = ""


def mode_fix_check(A, f, lb1, ub1, lb2, ub2, dz: int = 1) -> FixDecision:
    """Decide whether the single indicator of a period must equal 1.

    With the shifted image ``[l_a, u_a]`` of the previous-state box, a mode-off
    transition is impossible when ``l_a > u_2`` or ``l_2 > u_a`` in some
    coordinate.
    """
    if dz != 1:
        raise ValueError("mode fixing is only defined for a single indicator")
    img = interval_image(A, lb1, ub1).shifted(f)
    lb2 = np.asarray(lb2, float)
    ub2 = np.asarray(ub2, float)
    for i in range(len(lb2)):
        if img.lower[i] > ub2[i]:
            return FixDecision(True, i, "image lower bound exceeds next-state upper bound")
        if lb2[i] > img.upper[i]:
            return FixDecision(True, i, "next-state lower bound exceeds image upper bound")
    return FixDecision(False)
