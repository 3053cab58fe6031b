"""Release and recapture of atoms from a 2D optical lattice.

Units: lengths in the lattice spacing ``a``, wavevectors in ``2 pi / a``,
energies in ``2 E_r`` and times in ``hbar / (2 E_r)``. The square lattice is
separable, ``V = D [sin^2(pi x) + sin^2(pi y)]`` with ``D`` the per-axis depth,
so every 2D quantity factorizes into two 1D band problems.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import curve_fit

from .constants import E_RECOIL_HZ, LAMBDA_LATTICE, LAMBDA_UV


class LatticeError(ValueError):
    pass


def time_unit(e_recoil_hz: float = E_RECOIL_HZ) -> float:
    """``hbar / (2 E_r)`` in seconds."""
    return 1.0 / (2 * 2 * np.pi * e_recoil_hz)


def uv_recoil(lambda_lattice: float = LAMBDA_LATTICE, lambda_uv: float = LAMBDA_UV) -> float:
    """UV photon momentum ``k_UV / (sqrt(2) k_l)`` in lattice reciprocal units."""
    return lambda_lattice / (np.sqrt(2.0) * lambda_uv)


def depth_from_recoils(v0_er: float) -> float:
    """Per-axis depth in units of ``2 E_r`` from a depth quoted in ``E_r``."""
    return 0.5 * v0_er


@dataclass(frozen=True)
class BandSolution:
    """1D Bloch bands on a uniform quasimomentum grid.

    ``coeffs[iq, m, n]`` is the plane-wave amplitude ``c_m^{n,q}`` of band
    ``n`` at ``q = qs[iq]`` on momentum ``q + ms[m]``.
    """

    depth: float
    qs: np.ndarray
    ms: np.ndarray
    energies: np.ndarray
    coeffs: np.ndarray

    @property
    def num_bands(self) -> int:
        return self.energies.shape[1]

    def mean_energy(self) -> np.ndarray:
        return self.energies.mean(axis=0)

    def orthonormality_residual(self) -> float:
        gram = np.einsum("qmi,qmj->qij", self.coeffs.conj(), self.coeffs)
        return float(np.abs(gram - np.eye(self.num_bands)).max())


def q_grid(points: int) -> np.ndarray:
    """Midpoint grid on the Brillouin zone ``[-1/2, 1/2)``."""
    return (np.arange(points) + 0.5) / points - 0.5


def _hamiltonian(depth: float, q: float, ms: np.ndarray) -> np.ndarray:
    h = np.diag((q + ms) ** 2 + depth / 2)
    off = -depth / 4 * np.ones(len(ms) - 1)
    return h + np.diag(off, 1) + np.diag(off, -1)


def _fix_gauge(vecs: np.ndarray, q: float, ms: np.ndarray) -> np.ndarray:
    # real eigenvectors; fix the sign so Wannier states are centred on x=0
    # (even bands: positive value at x=0, real; odd bands: positive slope, purely imaginary)
    out = vecs.copy()
    for n in range(vecs.shape[1]):
        ref = vecs[:, n].sum() if n % 2 == 0 else ((q + ms) * vecs[:, n]).sum()
        if ref < 0:
            out[:, n] = -out[:, n]
    return out


def solve_bands(depth: float, q_points: int = 64, m_cutoff: int = 12, check: bool = True) -> BandSolution:
    """Diagonalize the 1D plane-wave Hamiltonian on a midpoint ``q`` grid.

    ``m`` runs over ``-m_cutoff..m_cutoff``. With ``check`` the calculation is
    repeated at ``m_cutoff + 1`` and a shift of the lowest band energies
    above 1e-8 raises.
    """
    if m_cutoff < 5:
        raise LatticeError("m_cutoff must be at least 5")
    if depth < 0:
        raise LatticeError("depth must be non-negative")
    qs = q_grid(q_points)
    ms = np.arange(-m_cutoff, m_cutoff + 1)
    energies = np.empty((q_points, len(ms)))
    coeffs = np.empty((q_points, len(ms), len(ms)))
    for i, q in enumerate(qs):
        e, v = np.linalg.eigh(_hamiltonian(depth, q, ms))
        energies[i] = e
        coeffs[i] = _fix_gauge(v, q, ms)
    if check:
        ms2 = np.arange(-m_cutoff - 1, m_cutoff + 2)
        e2 = np.linalg.eigvalsh(_hamiltonian(depth, qs[0], ms2))
        nb = min(6, len(ms))
        if np.abs(e2[:nb] - energies[0, :nb]).max() > 1e-8:
            raise LatticeError(f"plane-wave cutoff {m_cutoff} too small for depth {depth}")
    return BandSolution(float(depth), qs, ms, energies, coeffs)


@lru_cache(maxsize=32)
def cached_bands(depth: float, q_points: int = 64, m_cutoff: int = 12) -> BandSolution:
    return solve_bands(depth, q_points, m_cutoff)


def overlap_1d(bands: BandSolution, t: float, recoil: float = 0.0, initial_band: int = 0,
               sites=(0,)) -> np.ndarray:
    """Overlaps ``<w_{n,R}|psi(t)>`` for every band ``n`` and each ``R`` in ``sites``.

    Returns an array of shape ``(num_bands, len(sites))``.
    """
    if t < 0:
        raise LatticeError("t must be non-negative")
    k = bands.qs[:, None] + bands.ms[None, :] + recoil
    phase = np.exp(-1j * k**2 * t)
    c0 = bands.coeffs[:, :, initial_band]
    # amp[q, n] = sum_m c_m^{n,q} c_m^{0,q} e^{-i(q+m)^2 t}
    amp = np.einsum("qmn,qm->qn", bands.coeffs, c0 * phase)
    r = np.asarray(sites, dtype=float)
    bz = np.exp(2j * np.pi * bands.qs[:, None] * r[None, :])
    # midpoint rule over the unit-length zone
    return np.einsum("qn,qr->nr", amp, bz) / len(bands.qs)


def wannier_overlap(bands: BandSolution, n: tuple[int, int], site: tuple[int, int], t: float,
                    recoil: float = 0.0, initial: tuple[int, int] = (0, 0)) -> complex:
    """2D overlap of band ``n = (n_x, n_y)`` at ``site`` with the released state.

    The recoil kick is along ``x``.
    """
    ox = overlap_1d(bands, t, recoil, initial[0], (site[0],))[n[0], 0]
    oy = overlap_1d(bands, t, 0.0, initial[1], (site[1],))[n[1], 0]
    return complex(ox * oy)


def trapped_bands(bands: BandSolution) -> list[tuple[int, int]]:
    """2D bands whose mean energy lies strictly below the potential maximum ``2 D``."""
    e = bands.mean_energy()
    top = 2 * bands.depth
    out = [(i, j) for i in range(len(e)) for j in range(len(e)) if e[i] + e[j] < top]
    return sorted(out, key=lambda b: (b[0] + b[1], b))


def _band_weights(bands: BandSolution, t: float, recoil: float, initial=(0, 0)) -> dict:
    px = np.abs(overlap_1d(bands, t, recoil, initial[0])[:, 0]) ** 2
    py = np.abs(overlap_1d(bands, t, 0.0, initial[1])[:, 0]) ** 2
    return {b: px[b[0]] * py[b[1]] for b in trapped_bands(bands)}


def recapture_probability(bands: BandSolution, t: float, recoil: float = 0.0, initial=(0, 0)) -> float:
    """Probability of ending in a trapped band on the original site."""
    return float(sum(_band_weights(bands, t, recoil, initial).values()))


def mean_phonon(bands: BandSolution, t: float, recoil: float = 0.0, initial=(0, 0)) -> float:
    """Mean ``n_r = n_x + n_y`` of the recaptured population."""
    w = _band_weights(bands, t, recoil, initial)
    p = sum(w.values())
    if p <= 0:
        return float("nan")
    return float(sum((b[0] + b[1]) * v for b, v in w.items()) / p)


def thermal_occupation(bands: BandSolution, temperature: float, max_phonon: int = 4) -> dict:
    """Boltzmann weights over initial bands with ``n_x + n_y <= max_phonon``.

    ``temperature`` is ``k_B T`` in units of ``2 E_r``; zero gives the ground band.
    """
    e = bands.mean_energy()
    states = [(i, j) for i in range(max_phonon + 1) for j in range(max_phonon + 1 - i)]
    if temperature <= 0:
        return {(0, 0): 1.0}
    en = np.array([e[i] + e[j] for i, j in states])
    w = np.exp(-(en - en.min()) / temperature)
    w /= w.sum()
    return dict(zip(states, w))


def thermal_recapture(bands: BandSolution, occupation: dict, t: float, recoil: float = 0.0) -> float:
    """Recapture averaged over initially occupied bands."""
    total = sum(occupation.values())
    if not np.isclose(total, 1.0, atol=1e-9):
        raise LatticeError(f"occupation sums to {total}, not 1")
    if any(v < 0 for v in occupation.values()):
        raise LatticeError("negative occupation")
    return float(sum(w * recapture_probability(bands, t, recoil, b) for b, w in occupation.items()))


def total_weight(bands: BandSolution, t: float, recoil: float = 0.0, radius: int = 20) -> float:
    """Sum of ``|overlap|^2`` over every band and sites ``|R| <= radius`` (should be 1)."""
    sites = np.arange(-radius, radius + 1)
    px = (np.abs(overlap_1d(bands, t, recoil, 0, sites)) ** 2).sum()
    py = (np.abs(overlap_1d(bands, t, 0.0, 0, sites)) ** 2).sum()
    return float(px * py)


@dataclass
class RecaptureCurve:
    times: np.ndarray  # seconds
    survival: np.ndarray
    phonons: np.ndarray


def recapture_curve(depth_er: float, times: np.ndarray, with_recoil: bool = True,
                    q_points: int = 64, m_cutoff: int = 12) -> RecaptureCurve:
    """Survival and heating versus lattice-off time in seconds at depth ``depth_er`` (in ``E_r``)."""
    bands = cached_bands(depth_from_recoils(depth_er), q_points, m_cutoff)
    kick = uv_recoil() if with_recoil else 0.0
    tu = time_unit()
    times = np.asarray(times, dtype=float)
    surv = np.array([recapture_probability(bands, t / tu, kick) for t in times])
    phon = np.array([mean_phonon(bands, t / tu, kick) for t in times])
    return RecaptureCurve(times, surv, phon)


def gaussian_decay_time(times: np.ndarray, survival: np.ndarray, floor: float = np.exp(-1)) -> float:
    """Fit ``exp(-(t/tau)^2)`` to the part of the curve above ``floor``."""
    times = np.asarray(times, float)
    survival = np.asarray(survival, float)
    keep = survival >= floor
    if keep.sum() < 3:
        raise LatticeError("not enough points above the fit floor")
    t, p = times[keep], survival[keep]
    guess = t[-1] if t[-1] > 0 else 1.0
    (tau,), _ = curve_fit(lambda x, tau: np.exp(-((x / tau) ** 2)), t, p, p0=[guess])
    return float(abs(tau))


def short_time_exponent(times: np.ndarray, survival: np.ndarray) -> float:
    """Slope of ``log(1 - p)`` against ``log t``."""
    times = np.asarray(times, float)
    loss = 1.0 - np.asarray(survival, float)
    keep = (times > 0) & (loss > 0)
    slope, _ = np.polyfit(np.log(times[keep]), np.log(loss[keep]), 1)
    return float(slope)


def survival_probability(lattice_off: float, depth_er: float = 50.0, with_recoil: bool = True) -> float:
    """Recapture probability after ``lattice_off`` seconds."""
    bands = cached_bands(depth_from_recoils(depth_er))
    kick = uv_recoil() if with_recoil else 0.0
    return recapture_probability(bands, lattice_off / time_unit(), kick)
