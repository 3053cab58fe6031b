"""Phase-modulated Rydberg pulses for the collective gate ``exp(i pi n^2 / 2)``.

Each excitation sector ``n`` reduces, under perfect blockade, to a two-level
system ``{|psi_n>, |W_n>}`` driven at ``sqrt(n) * Omega_r`` with the laser
phase ``phi_r(t)`` and a non-Hermitian loss ``-i gamma_r / 2`` on ``|W_n>``.
Pulses are piecewise constant on the waveform-generator grid; each step is
propagated with the closed-form 2x2 exponential, and gradients with respect
to every step phase are exact (the step eigenvalue does not depend on the
phase, so only the generator direction changes).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import comb

from .constants import DT_AWG, OMEGA_R, TAU_RISE

log = logging.getLogger(__name__)

ALPHA_GRID = 256


class PulseError(ValueError):
    pass


def smoothstep_envelope(num_steps: int, dt: float, tau_rise: float) -> np.ndarray:
    """Cubic rise and fall of length ``tau_rise``, sampled at step midpoints."""
    if tau_rise <= 0:
        return np.ones(num_steps)
    t = (np.arange(num_steps) + 0.5) * dt
    total = num_steps * dt
    x = np.clip(np.minimum(t, total - t) / tau_rise, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass(frozen=True)
class PhasePulse:
    """Piecewise-constant Rydberg phase waveform.

    ``n_max``, ``gamma`` and ``fidelity`` are bookkeeping for the pulse file.
    """

    phases: np.ndarray = field(repr=False)
    dt: float = DT_AWG
    rabi: float = OMEGA_R
    tau_rise: float = TAU_RISE
    n_max: int = 2
    gamma: float = 0.0
    fidelity: float = float("nan")

    def __post_init__(self):
        phases = np.array(self.phases, dtype=float).reshape(-1)
        if phases.size < 1:
            raise PulseError("pulse needs at least one step")
        if not self.dt > 0:
            raise PulseError("dt must be positive")
        if not np.all(np.isfinite(phases)):
            raise PulseError("non-finite phase")
        phases.setflags(write=False)
        object.__setattr__(self, "phases", phases)

    @property
    def num_steps(self) -> int:
        return self.phases.size

    @property
    def duration(self) -> float:
        return self.num_steps * self.dt

    def envelope(self) -> np.ndarray:
        return smoothstep_envelope(self.num_steps, self.dt, self.tau_rise)

    def refined(self, factor: int) -> PhasePulse:
        """Same waveform sampled on a grid ``factor`` times finer."""
        return replace(self, phases=np.repeat(self.phases, factor), dt=self.dt / factor)

    def shifted(self, offset: float) -> PhasePulse:
        return replace(self, phases=self.phases + offset)


@dataclass(frozen=True)
class SectorModel:
    n: int
    rabi: float = OMEGA_R
    gamma: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise PulseError("sector index must be >= 1")
        if self.gamma < 0:
            raise PulseError("decay rate must be non-negative")

    @property
    def coupling(self) -> float:
        return math.sqrt(self.n) * self.rabi


def _step_propagators(phases, envelope, couplings, gamma, dt, with_derivative=False):
    """Closed-form step propagators for every sector and step.

    Returns arrays of shape ``(S, K, 2, 2)`` in the basis ``(|psi_n>, |W_n>)``.
    ``H = -i g/4 I + B`` with ``B = [[i g/4, c e^{-i phi}], [c e^{i phi}, -i g/4]]``
    and ``B^2 = (c^2 - g^2/16) I``.
    """
    c = 0.5 * couplings[:, None] * envelope[None, :]
    lam = np.sqrt((c * c - gamma * gamma / 16.0).astype(complex))
    x = lam * dt
    cos = np.cos(x)
    small = np.abs(x) < 1e-8
    sinc = np.where(small, dt * (1 - x * x / 6), np.sin(x) / np.where(small, 1.0, lam))
    damp = math.exp(-gamma * dt / 4.0)
    em = np.exp(-1j * phases)[None, :]
    ep = np.conj(em)
    u = np.empty(c.shape + (2, 2), dtype=complex)
    u[..., 0, 0] = damp * (cos + sinc * gamma / 4.0)
    u[..., 1, 1] = damp * (cos - sinc * gamma / 4.0)
    u[..., 0, 1] = damp * (-1j * sinc * c * em)
    u[..., 1, 0] = damp * (-1j * sinc * c * ep)
    if not with_derivative:
        return u, None
    du = np.zeros_like(u)
    du[..., 0, 1] = damp * (-1j * sinc * c * (-1j) * em)
    du[..., 1, 0] = damp * (-1j * sinc * c * (1j) * ep)
    return u, du


def _check_step(pulse: PhasePulse, n_max: int):
    if pulse.dt * math.sqrt(n_max) * pulse.rabi > math.pi:
        raise PulseError("time step too coarse: dt * sqrt(n) * Omega_r exceeds pi")


def sector_amplitudes(pulse: PhasePulse, n_max: int, gamma: float = 0.0, gradient: bool = False):
    """Return amplitudes ``<psi_n|psi_n(T)>`` for ``n = 0..n_max``.

    With ``gradient`` also returns ``d a_n / d phi_k`` of shape ``(n_max+1, K)``.
    Sector 0 is trivially 1.
    """
    _check_step(pulse, n_max)
    ns = np.arange(1, n_max + 1)
    couplings = np.sqrt(ns) * pulse.rabi
    u, du = _step_propagators(pulse.phases, pulse.envelope(), couplings, gamma, pulse.dt, gradient)
    S, K = u.shape[:2]
    amps = np.ones(n_max + 1, dtype=complex)
    if not gradient:
        state = np.zeros((S, 2), dtype=complex)
        state[:, 0] = 1.0
        for k in range(K):
            uk = u[:, k]
            state = np.stack(
                [uk[:, 0, 0] * state[:, 0] + uk[:, 0, 1] * state[:, 1], uk[:, 1, 0] * state[:, 0] + uk[:, 1, 1] * state[:, 1]],
                axis=1,
            )
        amps[1:] = state[:, 0]
        return amps
    fwd = np.empty((K + 1, S, 2), dtype=complex)
    fwd[0] = 0.0
    fwd[0, :, 0] = 1.0
    for k in range(K):
        uk, f = u[:, k], fwd[k]
        fwd[k + 1, :, 0] = uk[:, 0, 0] * f[:, 0] + uk[:, 0, 1] * f[:, 1]
        fwd[k + 1, :, 1] = uk[:, 1, 0] * f[:, 0] + uk[:, 1, 1] * f[:, 1]
    grads = np.zeros((n_max + 1, K), dtype=complex)
    row = np.zeros((S, 2), dtype=complex)
    row[:, 0] = 1.0
    for k in range(K - 1, -1, -1):
        dk, f = du[:, k], fwd[k]
        grads[1:, k] = row[:, 0] * (dk[:, 0, 1] * f[:, 1]) + row[:, 1] * (dk[:, 1, 0] * f[:, 0])
        uk = u[:, k]
        row = np.stack(
            [row[:, 0] * uk[:, 0, 0] + row[:, 1] * uk[:, 1, 0], row[:, 0] * uk[:, 0, 1] + row[:, 1] * uk[:, 1, 1]],
            axis=1,
        )
    amps[1:] = fwd[K, :, 0]
    return amps, grads


def sector_propagate(pulse: PhasePulse, sector: SectorModel) -> tuple[complex, complex]:
    """Final ``(<psi_n|psi_n(T)>, <W_n|psi_n(T)>)`` for one sector."""
    probe = replace(pulse, rabi=sector.rabi)
    _check_step(probe, sector.n)
    u, _ = _step_propagators(probe.phases, probe.envelope(), np.array([sector.coupling]), sector.gamma, probe.dt)
    state = np.array([1.0, 0.0], dtype=complex)
    for k in range(u.shape[1]):
        state = u[0, k] @ state
    return complex(state[0]), complex(state[1])


def target_weights(num_atoms: int) -> np.ndarray:
    n = np.arange(num_atoms + 1)
    return comb(num_atoms, n) * (1j) ** ((n * n) % 4)


def fidelity_from_amplitudes(amps: np.ndarray, num_atoms: int) -> tuple[float, float]:
    """Maximize ``|sum_n C(N,n) i^{n^2} e^{i n alpha} a_n|^2 / 4^N`` over ``alpha``.

    A 256-point grid locates the basin; golden-section search refines it.
    """
    z = target_weights(num_atoms) * np.asarray(amps)[: num_atoms + 1]
    n = np.arange(num_atoms + 1)
    norm = 4.0**num_atoms

    def value(alpha):
        return abs(np.dot(z, np.exp(1j * n * alpha))) ** 2 / norm

    grid = np.linspace(0, 2 * np.pi, ALPHA_GRID, endpoint=False)
    vals = np.abs(np.exp(1j * np.outer(grid, n)) @ z) ** 2 / norm
    i = int(np.argmax(vals))
    if vals[i] == 0.0:
        return 0.0, 0.0
    h = 2 * np.pi / ALPHA_GRID
    res = optimize.minimize_scalar(
        lambda a: -value(a), bracket=(grid[i] - h, grid[i], grid[i] + h), method="golden", tol=1e-10
    )
    alpha = float(res.x) if -res.fun >= vals[i] else float(grid[i])
    return float(min(1.0, value(alpha))), float(np.mod(alpha, 2 * np.pi))


def gate_fidelity(pulse: PhasePulse, num_atoms: int, gamma: float = 0.0) -> tuple[float, float]:
    """Gate figure of merit and the optimal single-particle phase ``alpha_c``."""
    if num_atoms < 1:
        raise PulseError("need at least one atom")
    return fidelity_from_amplitudes(sector_amplitudes(pulse, num_atoms, gamma), num_atoms)


def fidelity_and_gradient(pulse: PhasePulse, num_atoms: int, gamma: float = 0.0) -> tuple[float, np.ndarray, float]:
    """``F``, ``dF/dphi_k`` and ``alpha*``; the envelope theorem handles the max over alpha."""
    amps, grads = sector_amplitudes(pulse, num_atoms, gamma, gradient=True)
    fid, alpha = fidelity_from_amplitudes(amps, num_atoms)
    n = np.arange(num_atoms + 1)
    coeff = target_weights(num_atoms) * np.exp(1j * n * alpha)
    s = np.dot(coeff, amps)
    ds = coeff @ grads
    grad = 2.0 * np.real(np.conj(s) * ds) / 4.0**num_atoms
    return fid, grad, alpha


def decay_limited_fidelity(num_atoms: int, pulse: PhasePulse, gamma: float) -> float:
    """Gate fidelity for ``N`` atoms including Rydberg decay at rate ``gamma``."""
    return gate_fidelity(pulse, num_atoms, gamma)[0]


@dataclass
class OptimizeResult:
    pulse: PhasePulse
    fidelity: float
    alpha: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def random_smooth_phases(num_steps: int, rng: np.random.Generator, modes: int = 6, scale: float = 2.0) -> np.ndarray:
    """Random low-frequency phase profile used to seed the optimizer."""
    t = (np.arange(num_steps) + 0.5) / num_steps
    phases = np.zeros(num_steps)
    for m in range(1, modes + 1):
        a, b = rng.normal(scale=scale / m, size=2)
        phases += a * np.sin(np.pi * m * t) + b * np.cos(np.pi * m * t)
    return phases


def resample_phases(phases: np.ndarray, num_steps: int) -> np.ndarray:
    """Stretch a waveform onto a different number of steps (linear interpolation)."""
    old = (np.arange(len(phases)) + 0.5) / len(phases)
    new = (np.arange(num_steps) + 0.5) / num_steps
    return np.interp(new, old, np.unwrap(phases))


def _polish(template: PhasePulse, x0: np.ndarray, n_max: int, gamma: float, maxiter: int, gtol: float):
    def objective(x):
        fid, grad, _ = fidelity_and_gradient(replace(template, phases=x), n_max, gamma)
        return 1.0 - fid, -grad

    res = optimize.minimize(objective, x0, jac=True, method="BFGS", options={"maxiter": maxiter, "gtol": gtol})
    return res


def grape_optimize(
    n_max: int,
    duration: float | None = None,
    dt: float = DT_AWG,
    rabi: float = OMEGA_R,
    gamma: float = 0.0,
    seed: int = 0,
    tau_rise: float = TAU_RISE,
    restarts: int = 8,
    maxiter: int = 2000,
    target: float | None = None,
    initial: list[np.ndarray] | None = None,
    num_steps: int | None = None,
) -> OptimizeResult:
    """Optimize the step phases so the pulse implements the collective gate for all ``N <= n_max``.

    Random restarts are seeded from ``seed``; the best pulse is returned. When
    ``target`` is given, restarts stop as soon as it is reached.
    """
    if n_max < 1:
        raise PulseError("n_max must be >= 1")
    if num_steps is None:
        if duration is None:
            raise PulseError("need a duration or a step count")
        num_steps = max(1, int(round(duration / dt)))
    if num_steps * dt < math.pi / rabi:
        raise PulseError("gate duration shorter than a single-atom pi pulse")
    template = PhasePulse(np.zeros(num_steps), dt=dt, rabi=rabi, tau_rise=tau_rise, n_max=n_max, gamma=gamma)
    rng = np.random.default_rng(seed)
    seeds = [np.asarray(x, dtype=float) for x in (initial or [])]
    best = None
    total_iter = 0
    history = []
    for attempt in range(max(restarts, len(seeds))):
        x0 = seeds[attempt] if attempt < len(seeds) else random_smooth_phases(num_steps, rng)
        res = _polish(template, x0, n_max, gamma, maxiter, gtol=1e-9)
        total_iter += int(res.nit)
        fid = 1.0 - float(res.fun)
        history.append(fid)
        if best is None or fid > best[0]:
            best = (fid, res.x)
        if target is not None and best[0] >= target:
            break
    fid, x = best
    fid, alpha = gate_fidelity(replace(template, phases=x), n_max, gamma)
    pulse = replace(template, phases=x, fidelity=fid)
    converged = target is None or fid >= target
    if not converged:
        log.warning("GRAPE did not reach F=%.6f for n_max=%d (best %.6f)", target, n_max, fid)
    return OptimizeResult(pulse, fid, alpha, total_iter, converged, history)


@dataclass
class DurationSearch:
    duration: float
    pulse: PhasePulse
    fidelity: float
    trials: dict = field(default_factory=dict)


def find_minimal_duration(
    n_max: int,
    f_target: float = 0.999,
    gamma: float = 0.0,
    dt: float = DT_AWG,
    rabi: float = OMEGA_R,
    tau_rise: float = TAU_RISE,
    seed: int = 0,
    restarts: int = 8,
    bracket: tuple[int, int] | None = None,
    warm_start: np.ndarray | None = None,
) -> DurationSearch:
    """Bisect on the step count for the shortest pulse reaching ``f_target``.

    Each candidate is re-optimized, seeded from the nearest feasible pulse
    (resampled onto the candidate grid) plus random restarts.
    """
    if not 0.9 < f_target < 1.0:
        raise PulseError("f_target must lie in (0.9, 1)")
    trials: dict[int, OptimizeResult] = {}

    def attempt(steps: int, seeds: list[np.ndarray]) -> OptimizeResult:
        res = grape_optimize(
            n_max, dt=dt, rabi=rabi, gamma=gamma, seed=seed + steps, tau_rise=tau_rise,
            restarts=restarts, target=f_target, initial=seeds, num_steps=steps,
        )
        trials[steps] = res
        log.info("n_max=%d steps=%d F=%.6f", n_max, steps, res.fidelity)
        return res

    if bracket is None:
        lo = max(1, int(math.ceil(math.pi / rabi / dt)))
        hi = int(math.ceil(lo * 3.0 * n_max**0.6))
    else:
        lo, hi = bracket
    seeds = [resample_phases(warm_start, hi)] if warm_start is not None else []
    best = attempt(hi, seeds)
    grow = 0
    while best.fidelity < f_target:
        grow += 1
        if grow > 4:
            raise PulseError(f"could not bracket a feasible duration for n_max={n_max}")
        lo, hi = hi, int(math.ceil(hi * 1.5))
        best = attempt(hi, [resample_phases(best.pulse.phases, hi)])
    feasible = best
    while hi - lo > 1:
        mid = (lo + hi) // 2
        res = attempt(mid, [resample_phases(feasible.pulse.phases, mid)])
        if res.fidelity >= f_target:
            hi, feasible = mid, res
        else:
            lo = mid
    return DurationSearch(feasible.pulse.duration, feasible.pulse, feasible.fidelity,
                          {k: v.fidelity for k, v in sorted(trials.items())})


def fit_power_law(x, y) -> tuple[float, float]:
    """Least-squares fit of ``y = a x^b`` in log space; returns ``(a, b)``."""
    if len(x) < 2:
        raise PulseError("need at least two points for a power-law fit")
    b, loga = np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)
    return float(np.exp(loga)), float(b)


PULSE_HEADER_KEYS = ("n_max", "rabi", "dt", "tau_rise", "gamma", "fidelity")


def save_pulse(pulse: PhasePulse, path: str | Path) -> None:
    """Text pulse file: ``# key = value`` header lines, then one phase (rad) per line.

    Floats are written with ``repr`` so a reload is bit-exact.
    """
    lines = ["# ghzclock phase pulse"]
    for key in PULSE_HEADER_KEYS:
        lines.append(f"# {key} = {getattr(pulse, key)!r}")
    lines.extend(repr(float(p)) for p in pulse.phases)
    Path(path).write_text("\n".join(lines) + "\n")


def load_pulse(path: str | Path) -> PhasePulse:
    meta = {}
    phases = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if "=" in line:
                key, value = (s.strip() for s in line[1:].split("=", 1))
                meta[key] = value
            continue
        phases.append(float(line))
    missing = [k for k in PULSE_HEADER_KEYS if k not in meta]
    if missing:
        raise PulseError(f"pulse file missing header fields: {missing}")
    return PhasePulse(
        np.array(phases),
        dt=float(meta["dt"]),
        rabi=float(meta["rabi"]),
        tau_rise=float(meta["tau_rise"]),
        n_max=int(meta["n_max"]),
        gamma=float(meta["gamma"]),
        fidelity=float(meta["fidelity"]),
    )


#: sizes with a stored minimal-duration pulse (gamma = 0, F >= 0.999)
REFERENCE_SIZES = (2, 3, 4, 5, 6, 8, 10)


def reference_pulse(n_max: int) -> PhasePulse:
    """Stored pulse from a minimal-duration search at ``F_target = 0.999``."""
    if n_max not in REFERENCE_SIZES:
        raise PulseError(f"no stored pulse for n_max={n_max}; available: {REFERENCE_SIZES}")
    res = resources.files("ghzclock") / "data" / "pulses" / f"nmax_{n_max}.txt"
    with resources.as_file(res) as path:
        return load_pulse(path)


def decay_infidelity(num_atoms: int, pulse: PhasePulse, gamma: float) -> float:
    """Infidelity caused by decay alone: ``F(gamma=0) - F(gamma)``."""
    return gate_fidelity(pulse, num_atoms, 0.0)[0] - gate_fidelity(pulse, num_atoms, gamma)[0]
