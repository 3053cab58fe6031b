"""Atom arrangements on the square lattice and van der Waals blockade metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constants import A_LAT, C6, OMEGA_R


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Arrangement:
    """Integer lattice sites of one ensemble plus the grid it was cut from.

    ``cols``/``rows`` and ``dx``/``dy`` describe the rectangular pattern
    (``l_x`` columns spaced ``dx`` sites apart, ``l_y`` rows spaced ``dy``).
    """

    positions: tuple[tuple[int, int], ...]
    c6: float = C6
    a_lat: float = A_LAT
    cols: int = 0
    rows: int = 0
    dx: int = 0
    dy: int = 0

    def __post_init__(self):
        pos = tuple((int(x), int(y)) for x, y in self.positions)
        if len(set(pos)) != len(pos):
            raise GeometryError("atom positions must be distinct")
        if not pos:
            raise GeometryError("empty arrangement")
        object.__setattr__(self, "positions", pos)

    @property
    def num_atoms(self) -> int:
        return len(self.positions)

    def coordinates(self) -> np.ndarray:
        """Positions in metres, shape ``(N, 2)``."""
        return np.asarray(self.positions, dtype=float) * self.a_lat

    def distances(self) -> np.ndarray:
        xy = self.coordinates()
        return np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))

    def max_pair_distance(self) -> float:
        return float(self.distances().max())

    def caption_extent(self) -> float:
        """``sqrt((l_x dx)^2 + (l_y dy)^2) a_lat``: the full-pattern diagonal."""
        return float(np.hypot(self.cols * self.dx, self.rows * self.dy) * self.a_lat)

    def scaled(self, factor: int) -> Arrangement:
        return Arrangement(
            tuple((x * factor, y * factor) for x, y in self.positions),
            self.c6, self.a_lat, self.cols, self.rows, self.dx * factor, self.dy * factor,
        )


def grid(cols: int, rows: int, dx: int, dy: int, **kw) -> Arrangement:
    pos = tuple((i * dx, j * dy) for j in range(rows) for i in range(cols))
    return Arrangement(pos, cols=cols, rows=rows, dx=dx, dy=dy, **kw)


# (columns, rows, dx, dy) per ensemble size; the first dx is the default and
# the second the wider alternative where two spacings were used.
_TABLE = {
    2: (2, 1, (2, 3), 0),
    4: (2, 2, (2, 3), 2),
    6: (2, 3, (3,), 1),
    9: (3, 3, (2,), 1),
}

#: minimum blockade energy in units of hbar * 2pi * 4 MHz, with its uncertainty
TABLE_UMIN = {2: (99.0, 2.0), 4: (32.7, 0.6), 6: (32.7, 0.6), 8: (9.0, 0.2), 9: (9.0, 0.2)}


def standard_arrangement(num_atoms: int, wide: bool = False) -> Arrangement:
    """Rectangular pattern used for each ensemble size.

    ``wide`` picks the larger of the two column spacings for ``N = 2, 4``.
    ``N = 8`` is the 3x3 pattern with one corner removed.
    """
    key = 9 if num_atoms == 8 else num_atoms
    if key not in _TABLE:
        raise GeometryError(f"no standard arrangement for N={num_atoms}")
    cols, rows, dxs, dy = _TABLE[key]
    dx = dxs[-1] if wide else dxs[0]
    arr = grid(cols, rows, dx, dy)
    if num_atoms == 8:
        arr = Arrangement(arr.positions[:-1], cols=cols, rows=rows, dx=dx, dy=dy)
    return arr


def pair_interactions(arr: Arrangement) -> np.ndarray:
    """``V_ij = C6 / r_ij^6`` in rad/s with a zero diagonal."""
    r = arr.distances()
    with np.errstate(divide="ignore"):
        v = arr.c6 / r**6
    np.fill_diagonal(v, 0.0)
    return v


def min_pair_energy(arr: Arrangement, rabi: float = OMEGA_R) -> float:
    """Weakest pair interaction in units of ``hbar * rabi``."""
    v = pair_interactions(arr)
    iu = np.triu_indices(arr.num_atoms, 1)
    return float(v[iu].min() / rabi)


def caption_umin(arr: Arrangement, rabi: float = OMEGA_R) -> float:
    """``C6 / r^6`` with ``r`` the full-pattern diagonal instead of the farthest pair."""
    return float(arr.c6 / arr.caption_extent() ** 6 / rabi)


def blockade_radius(c6: float = C6, rabi: float = OMEGA_R) -> float:
    """``R_b = (C6 / Omega_r)^(1/6)`` in metres."""
    if c6 <= 0 or rabi <= 0:
        raise GeometryError("C6 and Omega_r must be positive")
    return (c6 / rabi) ** (1.0 / 6.0)


BLOCKADE_RADIUS_EXPONENT = 25.0 / 12.0
CROSSING_RADIUS_EXPONENT = 8.0 / 3.0
REGIME_EXPONENTS = {"lattice_limited": 25.0 / 6.0, "resonance_limited": -7.0 / 6.0}


def capacity_scaling(n_low: int, n_high: int, regime: str, n_ref: int | None = None) -> dict:
    """Atoms per blockade area versus principal quantum number, up to normalization.

    ``R_b ~ n^(25/12)`` at fixed intensity; ``N_b ~ (R_b / R_min)^2`` with
    ``R_min`` either the fixed lattice spacing or the outermost molecular
    resonance radius ``R_x ~ n^(8/3)``.
    """
    if regime not in REGIME_EXPONENTS:
        raise GeometryError(f"unknown regime {regime!r}")
    if not 0 < n_low <= n_high:
        raise GeometryError("need 0 < n_low <= n_high")
    n = np.arange(n_low, n_high + 1)
    n_ref = n_low if n_ref is None else n_ref
    exponent = REGIME_EXPONENTS[regime]
    return {
        "regime": regime,
        "exponent": exponent,
        "blockade_radius_exponent": BLOCKADE_RADIUS_EXPONENT,
        "n": n,
        "n_b": (n / n_ref) ** exponent,
    }


def crossover_capacity(n: np.ndarray, n_cross: float) -> np.ndarray:
    """``N_b(n)`` with ``R_min = max(a_lat, R_x(n))`` where ``R_x(n_cross) = a_lat``.

    Normalized to 1 at the crossover, where it peaks.
    """
    n = np.asarray(n, dtype=float)
    r_b = (n / n_cross) ** BLOCKADE_RADIUS_EXPONENT
    r_min = np.maximum(1.0, (n / n_cross) ** CROSSING_RADIUS_EXPONENT)
    return (r_b / r_min) ** 2


def table_umin(num_atoms: int, rabi: float = OMEGA_R) -> float:
    """Recompute the tabulated minimum blockade from the farthest atom pair.

    Uses the wider spacing where the pattern had two, i.e. the worst case.
    """
    return min_pair_energy(standard_arrangement(num_atoms, wide=True), rabi)


def load_arrangement(path: str | Path) -> Arrangement:
    """Read integer ``x y`` (or ``x, y``) pairs, one per line; ``#`` starts a comment."""
    pos = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].replace(",", " ").strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GeometryError(f"bad arrangement line: {line!r}")
        pos.append((int(parts[0]), int(parts[1])))
    xs = sorted({x for x, _ in pos})
    ys = sorted({y for _, y in pos})
    dx = min(np.diff(xs)) if len(xs) > 1 else 0
    dy = min(np.diff(ys)) if len(ys) > 1 else 0
    return Arrangement(tuple(pos), cols=len(xs), rows=len(ys), dx=int(dx), dy=int(dy))


def save_arrangement(arr: Arrangement, path: str | Path) -> None:
    Path(path).write_text("".join(f"{x} {y}\n" for x, y in arr.positions))


def arrangement_from_name(name: str) -> Arrangement:
    """Presets ``standard-N`` and ``standard-N-wide``."""
    parts = name.split("-")
    if parts[0] != "standard" or len(parts) not in (2, 3):
        raise GeometryError(f"unknown arrangement preset {name!r}")
    wide = len(parts) == 3 and parts[2] == "wide"
    return standard_arrangement(int(parts[1]), wide=wide)


def pattern_pairs(arr: Arrangement):
    return list(itertools.combinations(range(arr.num_atoms), 2))
