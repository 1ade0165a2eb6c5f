"""Order-independent summation on a shared power-of-two grid.

A term ``t`` with ``|t| < 2**exponent`` is split into ``levels`` integer
digits ``d_l`` with ``t ~= sum_l d_l * 2**(exponent - (l+1)*bits)``. The
split is exact down to the last unit and the digits are added as int64, so
a sum over any grouping of the terms (per segment, per rank, then across
ranks) gives the same integers. Converting back to floating point happens
once, after the final reduction. The result therefore does not depend on
how edges are divided among workers.

Every rank must use the same grid; it is derived either from a bound every
rank already knows or from one max-reduction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LEVELS = 3
MAX_DIGIT_BITS = 52


@dataclass(frozen=True)
class Grid:
    exponent: int
    bits: int
    levels: int = LEVELS

    @classmethod
    def for_bound(cls, bound: float, max_terms: int, levels: int = LEVELS) -> "Grid":
        """Grid for at most ``max_terms`` terms per sum, each ``|t| <= bound``."""
        if not math.isfinite(bound):
            raise FloatingPointError(f"cannot sum non-finite terms (bound {bound})")
        headroom = max(1, int(max_terms)).bit_length() + 1
        bits = min(MAX_DIGIT_BITS, 62 - headroom)
        # frexp gives bound = m * 2**e with 0.5 <= m < 1, so |t| <= bound < 2**e;
        # one extra bit absorbs rounding in how the bound itself was computed.
        return cls(math.frexp(float(bound))[1] + 1, bits, levels)

    def unit(self, level: int) -> int:
        return self.exponent - (level + 1) * self.bits

    def split(self, terms: np.ndarray) -> np.ndarray:
        """Digits of ``terms``, shape ``(levels, *terms.shape)``, dtype int64."""
        rest = np.asarray(terms, dtype=np.float64)
        out = np.empty((self.levels,) + rest.shape, dtype=np.int64)
        scaled = np.empty_like(rest)
        for lvl in range(self.levels):
            u = self.unit(lvl)
            if -1000 < u < 1000:
                # Multiplying by a normal power of two is exact and faster than ldexp.
                np.multiply(rest, 2.0 ** -u, out=scaled)
                np.rint(scaled, out=scaled)
                out[lvl] = scaled
                if lvl + 1 < self.levels:
                    rest = rest - scaled * 2.0 ** u
            else:
                np.rint(np.ldexp(rest, -u), out=scaled)
                out[lvl] = scaled
                rest = rest - np.ldexp(scaled, u)
        return out

    def join(self, digits: np.ndarray, dtype=np.float64) -> np.ndarray:
        """Inverse of :meth:`split` applied to (summed) digits."""
        acc = np.zeros(digits.shape[1:], dtype=np.float64)
        for lvl in reversed(range(self.levels)):
            acc += np.ldexp(digits[lvl].astype(np.float64), self.unit(lvl))
        return acc.astype(dtype, copy=False)


def max_abs(x: np.ndarray) -> float:
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


def grouped_digits(digits: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    """Per-segment integer sums of ``digits`` whose terms (axis 1) are already grouped, CSR-style."""
    nonempty = ptr[1:] > ptr[:-1]
    if nonempty.all() and len(ptr) > 1:
        return np.add.reduceat(digits, ptr[:-1], axis=1)
    out = np.zeros((digits.shape[0], len(ptr) - 1) + digits.shape[2:], dtype=np.int64)
    if nonempty.any():
        out[:, nonempty] = np.add.reduceat(digits, ptr[:-1][nonempty], axis=1)
    return out


def segment_digits(digits: np.ndarray, order: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    """As :func:`grouped_digits`, with terms gathered into segment order by ``order`` first."""
    return grouped_digits(digits[:, order], ptr)


def exact_sum(terms: np.ndarray, axis: int = 0, dtype=None) -> np.ndarray:
    """Sum along ``axis`` independently of term order (local convenience)."""
    terms = np.moveaxis(np.asarray(terms), axis, 0)
    grid = Grid.for_bound(max_abs(terms), terms.shape[0])
    return grid.join(grid.split(terms).sum(axis=1), dtype or terms.dtype)
