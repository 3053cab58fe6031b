"""Multi-level simulation of GHZ preparation with finite blockade and noise.

Each atom lives in ``{|0>, |1>, |r>}`` (digits 0, 1, 2 of a base-3 index,
little-endian like :mod:`qcore`). The Rydberg laser only couples ``|1>`` and
``|r>``, so during the gate the Hilbert space splits into blocks labelled by
the set ``S`` of atoms not in ``|0>``; a block's basis is the set of Rydberg
subsets ``R`` of ``S``. Blocks are propagated with exact per-step matrix
exponentials. Rydberg decay is sampled as quantum jumps, and slow processes
(Raman scattering, recapture loss) enter as per-atom Bernoulli events at the
end of a shot.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm
from scipy.optimize import curve_fit, minimize_scalar

from . import lattice
from .constants import (
    RAMAN_1_TO_0, RAMAN_1_TO_2, RAMAN_2_TO_0, SIGMA_DELTA, SIGMA_OMEGA_FRAC, T1_CSS,
    TAU_RYD_BRIGHT, TAU_RYD_DARK,
)
from .geometry import Arrangement, pair_interactions, standard_arrangement
from .metrology import ParityFit, fidelity_from_parts, fit_parity, parity_interval
from .pulsegen import PhasePulse, sector_amplitudes
from .qcore import EnsembleState, ghz_fidelity

log = logging.getLogger(__name__)

MAX_ATOMS = 10


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    """Error model for one simulated experiment.

    Fluctuations are Gaussian per shot. ``per_atom_detuning`` and
    ``per_atom_rabi`` draw independent values for every atom instead of a
    common one. ``raman_time`` is how long the clock state is exposed to
    lattice Raman scattering; ``lattice_off`` defaults to the gate duration.
    """

    sigma_omega_frac: float = SIGMA_OMEGA_FRAC
    sigma_delta: float = SIGMA_DELTA
    gamma_dark: float = 1.0 / TAU_RYD_DARK
    gamma_bright: float = 1.0 / TAU_RYD_BRIGHT
    raman_rates: tuple[float, float, float] = (RAMAN_1_TO_0, RAMAN_1_TO_2, RAMAN_2_TO_0)
    raman_time: float = 5e-3
    recoil_loss: bool = True
    lattice_depth_er: float = 50.0
    lattice_off: float | None = None
    per_atom_detuning: bool = False
    per_atom_rabi: bool = False

    def __post_init__(self):
        rates = [self.sigma_delta, self.gamma_dark, self.gamma_bright, self.raman_time, *self.raman_rates]
        if min(rates) < 0:
            raise SimulationError("noise rates and widths must be non-negative")
        if not 0 <= self.sigma_omega_frac <= 1:
            raise SimulationError("sigma_omega_frac must lie in [0, 1]")
        if len(self.raman_rates) != 3:
            raise SimulationError("raman_rates needs three entries")

    @classmethod
    def ideal(cls) -> NoiseConfig:
        return cls(0.0, 0.0, 0.0, 0.0, (0.0, 0.0, 0.0), 0.0, False)

    @classmethod
    def decay_only(cls) -> NoiseConfig:
        return cls(0.0, 0.0, 1.0 / TAU_RYD_DARK, 1.0 / TAU_RYD_BRIGHT, (0.0, 0.0, 0.0), 0.0, False)

    @property
    def gamma(self) -> float:
        return self.gamma_dark + self.gamma_bright


# -- Raman scattering ------------------------------------------------------------------------


def raman_matrix(rates=(RAMAN_1_TO_0, RAMAN_1_TO_2, RAMAN_2_TO_0)) -> np.ndarray:
    g10, g12, g20 = rates
    return np.array([[0.0, g10, g20], [0.0, -(g10 + g12), 0.0], [0.0, g12, -g20]])


def raman_populations(t: float, rates=(RAMAN_1_TO_0, RAMAN_1_TO_2, RAMAN_2_TO_0),
                      initial=(0.0, 1.0, 0.0), method: str = "expm") -> np.ndarray:
    """Populations ``(p0, p1, p2)`` of ground, clock and 3P2 after time ``t``.

    ``method`` is ``"expm"`` (closed form) or ``"ode"`` (adaptive integrator).
    """
    if t < 0:
        raise SimulationError("t must be non-negative")
    a = raman_matrix(rates)
    p = np.asarray(initial, dtype=float)
    if method == "expm":
        return expm(a * t) @ p
    if method == "ode":
        if t == 0:
            return p.copy()
        sol = solve_ivp(lambda _, y: a @ y, (0.0, t), p, method="DOP853", rtol=1e-13, atol=1e-15)
        return sol.y[:, -1]
    raise SimulationError(f"unknown method {method!r}")


# -- GHZ dephasing ---------------------------------------------------------------------------


def ghz_coherence_decay(num_atoms: int, times: np.ndarray, t1: float = T1_CSS, draws: int | None = None,
                        seed: int = 0) -> np.ndarray:
    """Parity contrast versus dark time under one Gaussian detuning per shot.

    The detuning width is ``sqrt(2) / t1`` so a single atom decays as
    ``exp(-(t/t1)^2)``; an ``N``-atom GHZ state picks up ``N`` times the phase.
    With ``draws`` the average is a Monte Carlo estimate, otherwise exact.
    """
    times = np.asarray(times, dtype=float)
    sigma = np.sqrt(2.0) / t1
    if draws is None:
        return np.exp(-0.5 * (num_atoms * sigma * times) ** 2)
    delta = np.random.default_rng(seed).normal(0.0, sigma, draws)
    return np.cos(num_atoms * np.outer(times, delta)).mean(axis=1)


def gaussian_time(times: np.ndarray, contrast: np.ndarray) -> float:
    """Fit ``exp(-(t/tau)^2)`` and return ``tau``."""
    times = np.asarray(times, float)
    guess = times[np.argmin(np.abs(np.asarray(contrast) - np.exp(-1)))] or times.max()
    (tau,), _ = curve_fit(lambda t, tau: np.exp(-((t / tau) ** 2)), times, contrast, p0=[guess])
    return float(abs(tau))


# -- three-level state helpers ---------------------------------------------------------------


@lru_cache(maxsize=16)
def digits(num_atoms: int) -> np.ndarray:
    """Base-3 digits of every index, shape ``(3**N, N)``."""
    idx = np.arange(3**num_atoms)
    out = np.stack([(idx // 3**j) % 3 for j in range(num_atoms)], axis=1)
    out.setflags(write=False)
    return out


def clock_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -1j * s, 0], [-1j * s, c, 0], [0, 0, 1]])


def clock_z(theta: float) -> np.ndarray:
    return np.diag([np.exp(0.5j * theta), np.exp(-0.5j * theta), 1.0])


def apply_clock(psi: np.ndarray, num_atoms: int, mat: np.ndarray, skip: Iterable[int] = ()) -> np.ndarray:
    """Apply a 3x3 clock rotation to every atom except those in ``skip``."""
    skip = set(skip)
    psi = psi.reshape((3,) * num_atoms)
    for j in range(num_atoms):
        if j in skip:
            continue
        # little-endian: atom j is the (N-1-j)-th axis of the C-ordered tensor
        axis = num_atoms - 1 - j
        psi = np.moveaxis(np.tensordot(mat, psi, axes=([1], [axis])), 0, axis)
    return psi.reshape(-1)


def ground_state3(num_atoms: int) -> np.ndarray:
    psi = np.zeros(3**num_atoms, dtype=complex)
    psi[0] = 1.0
    return psi


def rydberg_weight(psi: np.ndarray, num_atoms: int, at_least: int = 2) -> float:
    """Probability of ``at_least`` or more simultaneous Rydberg excitations."""
    nr = (digits(num_atoms) == 2).sum(axis=1)
    return float((np.abs(psi[nr >= at_least]) ** 2).sum())


def to_computational(psi: np.ndarray, num_atoms: int) -> EnsembleState:
    """Drop Rydberg components into the norm deficit."""
    d = digits(num_atoms)
    keep = (d < 2).all(axis=1)
    idx = (d[keep] * (2 ** np.arange(num_atoms))).sum(axis=1)
    amps = np.zeros(2**num_atoms, dtype=complex)
    amps[idx] = psi[keep]
    total = float(np.vdot(psi, psi).real)
    if total <= 0:
        raise SimulationError("state has zero norm")
    amps /= np.sqrt(total)
    deficit = max(0.0, 1.0 - float(np.vdot(amps, amps).real))
    return EnsembleState(num_atoms, amps, deficit)


def from_computational(state: EnsembleState) -> np.ndarray:
    n = state.num_atoms
    psi = np.zeros(3**n, dtype=complex)
    bits = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
    psi[(bits * 3 ** np.arange(n)).sum(axis=1)] = state.amplitudes
    return psi


# -- blockade dynamics -----------------------------------------------------------------------


def expm_batch(a: np.ndarray, order: int = 18) -> np.ndarray:
    """Matrix exponential of a stack ``(..., d, d)`` by scaling and squaring.

    One scaling exponent for the whole stack brings every norm below 1/2,
    where the Taylor series truncated at ``order`` is exact to double precision.
    """
    a = np.asarray(a, dtype=complex)
    norm = np.abs(a).sum(axis=-1).max() if a.size else 0.0
    s = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0.5 else 0
    a = a / 2.0**s
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    out = eye + a / order
    for k in range(order - 1, 0, -1):
        out = eye + (a @ out) / k
    for _ in range(s):
        out = out @ out
    return out


@dataclass
class _Block:
    atoms: tuple[int, ...]
    rydberg: list[int]  # bitmask of Rydberg atoms for each basis state
    full_index: np.ndarray  # base-3 index of each basis state
    diag_v: np.ndarray  # interaction energy per basis state
    raise_pairs: list[tuple[int, int, int]]  # (to, from, atom)
    props: np.ndarray | None = None


class BlockadeSimulator:
    """Gate dynamics for one arrangement and one draw of drive parameters.

    ``max_rydberg`` truncates each block to at most that many simultaneous
    Rydberg excitations (``None`` keeps the full ``2^|S|`` space).
    """

    def __init__(self, num_atoms: int, interactions: np.ndarray, pulse: PhasePulse,
                 rabi_scale: Sequence[float] | float = 1.0, detuning: Sequence[float] | float = 0.0,
                 gamma: float = 0.0, max_rydberg: int | None = 2):
        if num_atoms > MAX_ATOMS:
            raise SimulationError(f"at most {MAX_ATOMS} atoms supported, got {num_atoms}")
        v = np.asarray(interactions, dtype=float)
        if v.shape != (num_atoms, num_atoms):
            raise SimulationError("interaction matrix has the wrong shape")
        self.num_atoms = num_atoms
        self.v = v
        self.pulse = pulse
        self.rabi = pulse.rabi * np.broadcast_to(np.asarray(rabi_scale, float), (num_atoms,))
        self.delta = np.broadcast_to(np.asarray(detuning, float), (num_atoms,)).copy()
        self.gamma = float(gamma)
        self.max_rydberg = num_atoms if max_rydberg is None else int(max_rydberg)
        self.env = pulse.envelope()
        self._blocks: dict[int, _Block] = {}

    def block(self, mask: int) -> _Block:
        if mask not in self._blocks:
            self._blocks[mask] = self._build(mask)
        return self._blocks[mask]

    def _build(self, mask: int) -> _Block:
        atoms = tuple(j for j in range(self.num_atoms) if mask >> j & 1)
        subsets = [0]
        for size in range(1, min(len(atoms), self.max_rydberg) + 1):
            for combo in itertools.combinations(atoms, size):
                subsets.append(sum(1 << j for j in combo))
        pos = {r: i for i, r in enumerate(subsets)}
        full = []
        diag = []
        for r in subsets:
            full.append(sum((2 if r >> j & 1 else 1) * 3**j for j in atoms))
            ryd = [j for j in atoms if r >> j & 1]
            e = sum(self.v[a, b] for a, b in itertools.combinations(ryd, 2))
            e -= sum(self.delta[j] for j in ryd)
            diag.append(e)
        pairs = []
        for r in subsets:
            for j in atoms:
                if not r >> j & 1 and (r | 1 << j) in pos:
                    pairs.append((pos[r | 1 << j], pos[r], j))
        nr = np.array([bin(r).count("1") for r in subsets])
        blk = _Block(atoms, subsets, np.array(full), np.array(diag) - 0.5j * self.gamma * nr, pairs)
        blk.props = self._propagators(blk)
        return blk

    def _propagators(self, blk: _Block) -> np.ndarray:
        dim = len(blk.rydberg)
        up = np.zeros((dim, dim))
        for to, frm, j in blk.raise_pairs:
            up[to, frm] = 0.5 * self.rabi[j]
        ph = np.exp(1j * self.pulse.phases)
        h = (self.env * ph)[:, None, None] * up[None] + (self.env * ph.conj())[:, None, None] * up.T[None]
        h = h + np.diag(blk.diag_v)[None]
        return expm_batch(-1j * self.pulse.dt * h)

    def split(self, psi: np.ndarray, leaked: Iterable[int] = ()) -> dict[int, np.ndarray]:
        """Decompose a base-3 vector (no Rydberg population) into blocks."""
        d = digits(self.num_atoms)
        if np.any(np.abs(psi[(d == 2).any(axis=1)]) > 1e-12):
            raise SimulationError("gate input must not contain Rydberg population")
        leaked = set(leaked)
        out: dict[int, np.ndarray] = {}
        nz = np.flatnonzero(np.abs(psi) > 0)
        for idx in nz:
            mask = sum(1 << j for j in range(self.num_atoms) if d[idx, j] == 1 and j not in leaked)
            blk = self.block(mask)
            vec = out.setdefault(mask, np.zeros(len(blk.rydberg), dtype=complex))
            vec[0] += psi[idx]
        return out

    def merge(self, blocks: dict[int, np.ndarray]) -> np.ndarray:
        psi = np.zeros(3**self.num_atoms, dtype=complex)
        for mask, vec in blocks.items():
            psi[self.block(mask).full_index] += vec
        return psi

    def evolve(self, blocks: dict[int, np.ndarray], start: int = 0, stop: int | None = None) -> dict[int, np.ndarray]:
        """Non-Hermitian evolution over steps ``start..stop`` without jumps."""
        stop = self.pulse.num_steps if stop is None else stop
        out = {}
        for mask, vec in blocks.items():
            props = self.block(mask).props
            v = vec
            for k in range(start, stop):
                v = props[k] @ v
            out[mask] = v
        return out

    @staticmethod
    def norm2(blocks: dict[int, np.ndarray]) -> float:
        return float(sum(np.vdot(v, v).real for v in blocks.values()))

    def rydberg_populations(self, blocks: dict[int, np.ndarray]) -> np.ndarray:
        pop = np.zeros(self.num_atoms)
        for mask, vec in blocks.items():
            blk = self.block(mask)
            w = np.abs(vec) ** 2
            for r, p in zip(blk.rydberg, w):
                for j in blk.atoms:
                    if r >> j & 1:
                        pop[j] += p
        return pop

    def collapse(self, blocks: dict[int, np.ndarray], atom: int) -> dict[int, np.ndarray]:
        """Apply ``|leak><r_atom|`` and renormalize; the atom leaves every block."""
        out: dict[int, np.ndarray] = {}
        for mask, vec in blocks.items():
            if not mask >> atom & 1:
                continue
            blk = self.block(mask)
            new_mask = mask & ~(1 << atom)
            target = self.block(new_mask)
            pos = {r: i for i, r in enumerate(target.rydberg)}
            acc = out.setdefault(new_mask, np.zeros(len(target.rydberg), dtype=complex))
            for i, r in enumerate(blk.rydberg):
                if r >> atom & 1:
                    acc[pos[r & ~(1 << atom)]] += vec[i]
        norm = np.sqrt(self.norm2(out))
        if norm == 0:
            raise SimulationError("collapse onto an unpopulated Rydberg level")
        return {m: v / norm for m, v in out.items()}

    def run_trajectory(self, blocks: dict[int, np.ndarray], rng: np.random.Generator):
        """Quantum-jump evolution through the whole pulse.

        Returns the normalized final blocks and a list of decayed atoms.
        The no-jump branch is evolved in one sweep; only when its final
        norm drops below the drawn threshold is the jump step located.
        """
        jumped: list[int] = []
        start = 0
        threshold = rng.random()
        while True:
            final = self.evolve(blocks, start)
            if self.gamma == 0 or self.norm2(final) >= threshold:
                norm = np.sqrt(self.norm2(final))
                return {m: v / norm for m, v in final.items()}, jumped
            cur = blocks
            for k in range(start, self.pulse.num_steps):
                nxt = self.evolve(cur, k, k + 1)
                if self.norm2(nxt) < threshold:
                    pops = self.rydberg_populations(cur)
                    atom = int(rng.choice(self.num_atoms, p=pops / pops.sum()))
                    blocks = self.collapse(nxt, atom) if self.rydberg_populations(nxt)[atom] > 0 else self.collapse(cur, atom)
                    jumped.append(atom)
                    start = k + 1
                    threshold = rng.random()
                    break
                cur = nxt


def evolve_full(psi: np.ndarray, num_atoms: int, pulse: PhasePulse, interactions: np.ndarray,
                rabi_scale=1.0, detuning=0.0, gamma: float = 0.0, max_rydberg: int | None = 2) -> np.ndarray:
    """Deterministic (no-jump) gate evolution of a base-3 state vector.

    With ``gamma > 0`` the result is not normalized; the missing weight is
    the decay probability.
    """
    sim = BlockadeSimulator(num_atoms, interactions, pulse, rabi_scale, detuning, gamma, max_rydberg)
    return sim.merge(sim.evolve(sim.split(psi)))


def ideal_gate_state(state: EnsembleState, pulse: PhasePulse, gamma: float = 0.0) -> EnsembleState:
    """Perfect-blockade gate: sector amplitude ``a_n`` multiplies every basis state with ``n`` excitations."""
    from .qcore import excitation_counts

    amps = sector_amplitudes(pulse, state.num_atoms, gamma)
    out = state.amplitudes * amps[excitation_counts(state.num_atoms)]
    deficit = 1.0 - float(np.vdot(out, out).real)
    return EnsembleState(state.num_atoms, out, max(0.0, deficit))


def _arrangement_for(num_atoms: int, arr: Arrangement | None) -> Arrangement:
    arr = standard_arrangement(num_atoms) if arr is None else arr
    if arr.num_atoms != num_atoms:
        raise SimulationError(f"arrangement has {arr.num_atoms} atoms, expected {num_atoms}")
    return arr


def _prepared_gate_output(num_atoms: int, pulse: PhasePulse, v: np.ndarray, max_rydberg) -> np.ndarray:
    psi = apply_clock(ground_state3(num_atoms), num_atoms, clock_x(np.pi / 2))
    return evolve_full(psi, num_atoms, pulse, v, max_rydberg=max_rydberg)


def blockade_violation(num_atoms: int, pulse: PhasePulse, arr: Arrangement | None = None,
                       max_rydberg: int | None = None) -> dict:
    """Multi-Rydberg weight after the gate acting on ``X(pi/2)|0..0>``.

    Also returns the largest weight seen at any step boundary.
    """
    arr = _arrangement_for(num_atoms, arr)
    sim = BlockadeSimulator(num_atoms, pair_interactions(arr), pulse, max_rydberg=max_rydberg)
    psi = apply_clock(ground_state3(num_atoms), num_atoms, clock_x(np.pi / 2))
    blocks = sim.split(psi)
    peak = 0.0
    for k in range(pulse.num_steps):
        blocks = sim.evolve(blocks, k, k + 1)
        peak = max(peak, rydberg_weight(sim.merge(blocks), num_atoms))
    final = rydberg_weight(sim.merge(blocks), num_atoms)
    return {"final": final, "peak": peak}


def p0_plus_pn(psi: np.ndarray, num_atoms: int) -> float:
    norm = float(np.vdot(psi, psi).real)
    return float((abs(psi[0]) ** 2 + abs(psi[(3**num_atoms - 1) // 2]) ** 2) / norm)


def calibrate_alpha(gate_output: np.ndarray, num_atoms: int) -> float:
    """``alpha_c`` maximizing ``p_0 + p_N`` after ``X(pi/2) Z(alpha_c)``."""
    def pops(a):
        psi = apply_clock(apply_clock(gate_output, num_atoms, clock_z(a)), num_atoms, clock_x(np.pi / 2))
        return p0_plus_pn(psi, num_atoms)

    grid = np.linspace(0, 2 * np.pi, 128, endpoint=False)
    vals = [pops(a) for a in grid]
    i = int(np.argmax(vals))
    h = grid[1]
    res = minimize_scalar(lambda a: -pops(a), bracket=(grid[i] - h, grid[i], grid[i] + h), method="golden", tol=1e-10)
    best = float(res.x) if -res.fun >= vals[i] else float(grid[i])
    return float(np.mod(best, 2 * np.pi))


def finite_blockade_fidelity(num_atoms: int, pulse: PhasePulse, arr: Arrangement | None = None,
                             interactions: np.ndarray | None = None, max_rydberg: int | None = 2) -> tuple[float, float]:
    """GHZ fidelity of the noiseless circuit with the arrangement's pair energies.

    Returns ``(fidelity, alpha_c)`` with ``alpha_c`` recalibrated on ``p_0 + p_N``.
    """
    v = pair_interactions(_arrangement_for(num_atoms, arr)) if interactions is None else interactions
    out = _prepared_gate_output(num_atoms, pulse, v, max_rydberg)
    alpha = calibrate_alpha(out, num_atoms)
    psi = apply_clock(apply_clock(out, num_atoms, clock_z(alpha)), num_atoms, clock_x(np.pi / 2))
    return ghz_fidelity(to_computational(psi, num_atoms)), alpha


@lru_cache(maxsize=64)
def _rydberg_times(num_atoms: int, pulse_key: tuple, v_key: tuple) -> np.ndarray:
    # integrated Rydberg population per atom for the nominal drive
    pulse = PhasePulse(np.array(pulse_key[0]), *pulse_key[1:])
    v = np.array(v_key).reshape(num_atoms, num_atoms)
    sim = BlockadeSimulator(num_atoms, v, pulse)
    blocks = sim.split(apply_clock(ground_state3(num_atoms), num_atoms, clock_x(np.pi / 2)))
    total = np.zeros(num_atoms)
    for k in range(pulse.num_steps):
        nxt = sim.evolve(blocks, k, k + 1)
        total += 0.5 * (sim.rydberg_populations(blocks) + sim.rydberg_populations(nxt)) * pulse.dt
        blocks = nxt
    return total


def recapture_survival(t_rydberg: np.ndarray, lattice_off: float, depth_er: float = 50.0) -> np.ndarray:
    """Per-atom survival: free-expansion loss over ``lattice_off`` times the recoil penalty
    for ``t_rydberg`` spent in the Rydberg state."""
    base = lattice.survival_probability(lattice_off, depth_er, with_recoil=False)
    out = []
    for t in np.atleast_1d(t_rydberg):
        if t <= 0:
            out.append(base)
            continue
        kick = lattice.survival_probability(t, depth_er, with_recoil=True)
        still = lattice.survival_probability(t, depth_er, with_recoil=False)
        out.append(base * kick / still)
    return np.clip(np.array(out), 0.0, 1.0)


# -- shot records ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ShotRecord:
    """Outcome of one experimental shot. ``phi_c`` is NaN for population shots."""

    shot: int
    ensemble_id: int
    phi_c: float
    bits: tuple[int, ...]
    leaked: tuple[str, ...] = field(default=())
    seed: int = 0

    def __post_init__(self):
        if self.leaked and len(self.leaked) != len(self.bits):
            raise SimulationError("leak flags must match the atom count")

    @property
    def n(self) -> int:
        return int(sum(self.bits))

    @property
    def num_atoms(self) -> int:
        return len(self.bits)

    @property
    def parity(self) -> int:
        """``prod sigma_z`` of the readout: +1 if the number of dark atoms is even."""
        return 1 if (self.num_atoms - self.n) % 2 == 0 else -1


@dataclass
class ExperimentSetup:
    num_atoms: int
    pulse: PhasePulse
    interactions: np.ndarray
    alpha_c: float
    t_rydberg: np.ndarray
    survival: np.ndarray
    raman_dark: float


def prepare_setup(num_atoms: int, pulse: PhasePulse, noise: NoiseConfig, arr: Arrangement | None = None,
                  alpha_c: float | None = None, max_rydberg: int | None = 2) -> ExperimentSetup:
    """Calibrate ``alpha_c`` on the noiseless circuit and precompute loss probabilities."""
    v = pair_interactions(_arrangement_for(num_atoms, arr))
    if alpha_c is None:
        alpha_c = calibrate_alpha(_prepared_gate_output(num_atoms, pulse, v, max_rydberg), num_atoms)
    if noise.recoil_loss:
        t_r = _rydberg_times(num_atoms, (tuple(pulse.phases), pulse.dt, pulse.rabi, pulse.tau_rise), tuple(v.ravel()))
        off = pulse.duration if noise.lattice_off is None else noise.lattice_off
        survival = recapture_survival(t_r, off, noise.lattice_depth_er)
    else:
        t_r = np.zeros(num_atoms)
        survival = np.ones(num_atoms)
    raman_dark = raman_populations(noise.raman_time, noise.raman_rates)[0] if noise.raman_time > 0 else 0.0
    return ExperimentSetup(num_atoms, pulse, v, alpha_c, t_r, survival, float(raman_dark))


def simulate_shot(setup: ExperimentSetup, noise: NoiseConfig, phi_c: float | None, rng: np.random.Generator,
                  max_rydberg: int | None = 2) -> tuple[tuple[int, ...], tuple[str, ...]]:
    """One trajectory through preparation (and analysis if ``phi_c`` is given)."""
    n = setup.num_atoms
    scale = 1.0 + noise.sigma_omega_frac * rng.standard_normal(n if noise.per_atom_rabi else 1)
    delta = noise.sigma_delta * rng.standard_normal(n if noise.per_atom_detuning else 1)
    sim = BlockadeSimulator(n, setup.interactions, setup.pulse, scale, delta, noise.gamma, max_rydberg)
    psi = apply_clock(ground_state3(n), n, clock_x(np.pi / 2))
    blocks, jumped = sim.run_trajectory(sim.split(psi), rng)
    psi = sim.merge(blocks)
    skip = set(jumped)
    psi = apply_clock(psi, n, clock_z(setup.alpha_c), skip)
    psi = apply_clock(psi, n, clock_x(np.pi / 2), skip)
    if phi_c is not None:
        psi = apply_clock(psi, n, clock_z(phi_c), skip)
        psi = apply_clock(psi, n, clock_x(np.pi / 2), skip)
    probs = np.abs(psi) ** 2
    idx = rng.choice(probs.size, p=probs / probs.sum())
    d = digits(n)[idx]
    bits = [int(x == 1) for x in d]
    flags = ["" for _ in range(n)]
    dark_share = noise.gamma_dark / noise.gamma if noise.gamma > 0 else 1.0
    for j in jumped:
        if rng.random() < dark_share:
            bits[j], flags[j] = 0, "rydberg_dark"
        else:
            bits[j], flags[j] = 1, "rydberg_bright"
    for j in range(n):
        if flags[j]:
            continue
        if rng.random() > setup.survival[j]:
            bits[j], flags[j] = 0, "recapture"
        elif bits[j] == 1 and rng.random() < setup.raman_dark:
            bits[j], flags[j] = 0, "raman"
    return tuple(bits), tuple(flags)


def shot_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent stream per shot, reproducible regardless of execution order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trial)]))


def simulate_ghz_experiment(num_atoms: int, pulse: PhasePulse, noise: NoiseConfig, shots: int,
                            phases: Sequence[float | None] | None = None, seed: int = 0,
                            arr: Arrangement | None = None, alpha_c: float | None = None,
                            ensemble_id: int = 0, max_rydberg: int | None = 2,
                            setup: ExperimentSetup | None = None) -> list[ShotRecord]:
    """Simulate ``shots`` repetitions at each analysis phase.

    ``None`` in ``phases`` (the default) means a population measurement with
    no analysis pulse.
    """
    if shots < 1:
        raise SimulationError("shots must be at least 1")
    phases = [None] if phases is None else list(phases)
    setup = prepare_setup(num_atoms, pulse, noise, arr, alpha_c, max_rydberg) if setup is None else setup
    records = []
    trial = 0
    for phi in phases:
        for _ in range(shots):
            bits, flags = simulate_shot(setup, noise, phi, shot_rng(seed, trial), max_rydberg)
            records.append(ShotRecord(trial, ensemble_id, float("nan") if phi is None else float(phi), bits, flags, seed))
            trial += 1
    return records


def excitation_histogram(records: Sequence[ShotRecord]) -> np.ndarray:
    n = records[0].num_atoms
    counts = np.bincount([r.n for r in records], minlength=n + 1).astype(float)
    return counts / counts.sum()


def parity_by_phase(records: Sequence[ShotRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Group analysis shots by phase: ``(phases, mean parity, shot counts)``."""
    by: dict[float, list[int]] = {}
    for r in records:
        if np.isnan(r.phi_c):
            continue
        by.setdefault(r.phi_c, []).append(r.parity)
    phis = np.array(sorted(by))
    return phis, np.array([np.mean(by[p]) for p in phis]), np.array([len(by[p]) for p in phis])


@dataclass
class FidelityEstimate:
    """Raw GHZ fidelity from a population measurement plus a parity scan."""

    p0_plus_pn: float
    fit: ParityFit
    fidelity: float
    shots: int
    phases: np.ndarray
    parity: np.ndarray


def estimate_fidelity(records: Sequence[ShotRecord]) -> FidelityEstimate:
    """``F_raw = (C + p_0 + p_N) / 2`` from population shots (``phi_c`` NaN) and parity shots."""
    pops = [r for r in records if np.isnan(r.phi_c)]
    if not pops:
        raise SimulationError("no population shots")
    hist = excitation_histogram(pops)
    p = float(hist[0] + hist[-1])
    parity_shots = [r for r in records if not np.isnan(r.phi_c)]
    n = pops[0].num_atoms
    by: dict[float, list[int]] = {}
    for r in parity_shots:
        by.setdefault(r.phi_c, []).append(r.parity)
    phis = np.array(sorted(by))
    mean, err = [], []
    for phi in phis:
        sel = np.asarray(by[phi])
        m, lo, hi = parity_interval(int((sel == 1).sum()), sel.size)
        mean.append(m)
        err.append(max(0.5 * (hi - lo), 1e-9))
    fit = fit_parity(phis, np.array(mean), n, sigma=np.array(err))
    return FidelityEstimate(p, fit, fidelity_from_parts(p, fit.contrast), len(records), phis, np.array(mean))


def measure_fidelity(num_atoms: int, pulse: PhasePulse, noise: NoiseConfig, shots: int, num_phases: int = 16,
                     seed: int = 0, arr: Arrangement | None = None, max_rydberg: int | None = 2
                     ) -> tuple[FidelityEstimate, list[ShotRecord]]:
    """Population shots plus a parity scan over one period ``2 pi / N`` of the analysis phase."""
    if num_phases < 4:
        raise SimulationError("need at least four analysis phases per period")
    phases = [None] + list(np.arange(num_phases) * 2 * np.pi / (num_atoms * num_phases))
    records = simulate_ghz_experiment(num_atoms, pulse, noise, shots, phases, seed, arr, max_rydberg=max_rydberg)
    return estimate_fidelity(records), records


def write_records(records: Sequence[ShotRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["shot", "ensemble_id", "phi_c_rad", "outcome_bits", "n", "leaked", "seed"])
        for r in records:
            w.writerow([r.shot, r.ensemble_id, repr(r.phi_c), "".join(map(str, r.bits)), r.n,
                        ";".join(f or "-" for f in r.leaked), r.seed])


def read_records(path: str | Path) -> list[ShotRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            leaked = tuple("" if f == "-" else f for f in row["leaked"].split(";")) if row["leaked"] else ()
            out.append(ShotRecord(int(row["shot"]), int(row["ensemble_id"]), float(row["phi_c_rad"]),
                                  tuple(int(c) for c in row["outcome_bits"]), leaked, int(row.get("seed") or 0)))
    return out
