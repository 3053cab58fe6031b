"""Parity analysis, readout correction and servo-locked clock simulation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats
from scipy.special import comb

from .constants import NU0_SR88

log = logging.getLogger(__name__)


class AnalysisError(ValueError):
    pass


# -- parity fits -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ParityFit:
    """``C sin[N (phi - phi0)] + y0`` with ``C >= 0`` and ``phi0`` in ``[0, 2 pi / N)``.

    ``cov`` is the covariance of ``(C, phi0, y0)``.
    """

    contrast: float
    phase: float
    offset: float
    num_atoms: int
    cov: np.ndarray = field(repr=False)

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def __call__(self, phi):
        return self.contrast * np.sin(self.num_atoms * (np.asarray(phi) - self.phase)) + self.offset


def fit_parity(phases, parity, num_atoms: int, sigma=None) -> ParityFit:
    """Weighted linear least squares for a sinusoid at the known frequency ``N``.

    ``sigma`` are per-point standard errors (e.g. half the 68% interval);
    without them the covariance is scaled by the residual variance.
    """
    phi = np.asarray(phases, dtype=float)
    y = np.asarray(parity, dtype=float)
    if phi.shape != y.shape or phi.ndim != 1:
        raise AnalysisError("phases and parity must be matching 1D arrays")
    x = np.column_stack([np.sin(num_atoms * phi), np.cos(num_atoms * phi), np.ones_like(phi)])
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, dtype=float) ** 2
    if np.linalg.matrix_rank(x * np.sqrt(w)[:, None]) < 3:
        raise AnalysisError("design matrix is rank deficient; need distinct phases")
    xtwx = x.T @ (w[:, None] * x)
    beta = np.linalg.solve(xtwx, x.T @ (w * y))
    cov_b = np.linalg.inv(xtwx)
    if sigma is None:
        dof = max(1, len(y) - 3)
        cov_b = cov_b * float(np.sum(w * (y - x @ beta) ** 2)) / dof
    a, b, y0 = beta
    c = float(np.hypot(a, b))
    # a = C cos(N phi0), b = -C sin(N phi0)
    phi0 = float(np.mod(np.arctan2(-b, a) / num_atoms, 2 * np.pi / num_atoms))
    if c > 0:
        jac = np.array([[a / c, b / c, 0.0], [b / (num_atoms * c * c), -a / (num_atoms * c * c), 0.0], [0.0, 0.0, 1.0]])
    else:
        jac = np.eye(3)
    return ParityFit(c, phi0, float(y0), num_atoms, jac @ cov_b @ jac.T)


def clopper_pearson(successes: int, trials: int, level: float = 0.68) -> tuple[float, float]:
    """Exact binomial confidence interval from beta quantiles."""
    if trials < 1 or not 0 <= successes <= trials:
        raise AnalysisError("need 0 <= successes <= trials and trials >= 1")
    if not 0 < level < 1:
        raise AnalysisError("level must lie in (0, 1)")
    tail = (1 - level) / 2
    lo = 0.0 if successes == 0 else float(stats.beta.ppf(tail, successes, trials - successes + 1))
    hi = 1.0 if successes == trials else float(stats.beta.ppf(1 - tail, successes + 1, trials - successes))
    return lo, hi


def parity_interval(n_even: int, trials: int, level: float = 0.68) -> tuple[float, float, float]:
    """Mean parity with the Clopper-Pearson interval mapped from ``P(even)``."""
    lo, hi = clopper_pearson(n_even, trials, level)
    return 2 * n_even / trials - 1, 2 * lo - 1, 2 * hi - 1


def fidelity_from_parts(p0_plus_pn: float, contrast: float) -> float:
    """``F = (C + p_0 + p_N) / 2``."""
    return 0.5 * (contrast + p0_plus_pn)


# -- readout correction ----------------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementModel:
    p_db: float
    p_bd: float
    num_atoms: int

    def __post_init__(self):
        if not (0 <= self.p_db <= 1 and 0 <= self.p_bd <= 1):
            raise AnalysisError("flip probabilities must lie in [0, 1]")
        if self.num_atoms < 1:
            raise AnalysisError("need at least one atom")


def _binom(n, k, p):
    if k < 0 or k > n:
        return 0.0
    return comb(n, k, exact=True) * p**k * (1 - p) ** (n - k)


def measurement_matrix(model: MeasurementModel) -> np.ndarray:
    """``M[m, n]``: probability of reading ``m`` bright atoms when ``n`` are in ``|1>``.

    ``k`` counts the flips on the side that loses atoms (bright to dark for
    ``m <= n``, dark to bright otherwise); the other side makes up the rest.
    """
    big_n, pdb, pbd = model.num_atoms, model.p_db, model.p_bd
    mat = np.zeros((big_n + 1, big_n + 1))
    for n in range(big_n + 1):
        for m in range(big_n + 1):
            total = 0.0
            if m <= n:
                for k in range(n - m, min(n, big_n - m) + 1):
                    total += _binom(n, k, pbd) * _binom(big_n - n, k - n + m, pdb)
            else:
                for k in range(m - n, min(big_n - n, m) + 1):
                    total += _binom(big_n - n, k, pdb) * _binom(n, k - m + n, pbd)
            mat[m, n] = total
    return mat


def correct_populations(p_raw, model: MeasurementModel) -> np.ndarray:
    """Simplex-constrained least squares inverse of the measurement matrix."""
    p_raw = np.asarray(p_raw, dtype=float)
    mat = measurement_matrix(model)
    if p_raw.shape != (model.num_atoms + 1,):
        raise AnalysisError("p_raw has the wrong length")
    try:
        direct = np.linalg.solve(mat, p_raw)
    except np.linalg.LinAlgError:
        direct = None
    if direct is not None and direct.min() >= -1e-12:
        direct = np.clip(direct, 0.0, None)
        return direct / direct.sum()

    def cost(p):
        r = p_raw - mat @ p
        return float(r @ r)

    def grad(p):
        return -2.0 * mat.T @ (p_raw - mat @ p)

    n = len(p_raw)
    x0 = np.clip(p_raw, 0, None)
    x0 = x0 / x0.sum() if x0.sum() > 0 else np.full(n, 1.0 / n)
    res = optimize.minimize(cost, x0, jac=grad, method="SLSQP", bounds=[(0.0, 1.0)] * n,
                            constraints=[{"type": "eq", "fun": lambda p: p.sum() - 1.0, "jac": lambda p: np.ones(n)}],
                            options={"ftol": 1e-15, "maxiter": 500})
    p = np.clip(res.x, 0.0, None)
    return p / p.sum()


# -- leakage correction ----------------------------------------------------------------------


def ideal_population_curve(num_atoms: int, delta) -> np.ndarray:
    """``p_0 + p_N`` of the ideal circuit versus the offset ``delta`` from the calibrated ``alpha_c``.

    Closed form of ``X(pi/2) Z(delta) U X(pi/2) |0...0>`` projected on the two GHZ branches.
    """
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    n = np.arange(num_atoms + 1)
    w = comb(num_atoms, n) * (1j) ** ((n * n) % 4)
    ph = np.exp(0.5j * np.outer(delta, num_atoms - 2 * n))
    a0 = ph @ (w * (-1.0) ** n) / 2**num_atoms
    an = ph @ w / 2**num_atoms
    return np.abs(a0) ** 2 + np.abs(an) ** 2


@dataclass(frozen=True)
class LeakageFit:
    contrast: float
    amplitude: float
    alpha: float
    offset: float
    stderr: np.ndarray

    def correction(self) -> float:
        """Amount subtracted from ``p_0 + p_N``."""
        return abs(self.amplitude)


def leakage_model(alpha_c, contrast, amplitude, alpha, offset, num_atoms):
    d = np.asarray(alpha_c, dtype=float) - alpha
    return (contrast - amplitude * np.sin(d / 2) ** 2) * ideal_population_curve(num_atoms, d) + offset


def leakage_fit(alpha_c, populations, num_atoms: int, sigma=None, alpha_guess: float | None = None) -> LeakageFit:
    """Fit ``[C - A sin^2((alpha_c - alpha)/2)] f(alpha_c - alpha) + y``."""
    x = np.asarray(alpha_c, dtype=float)
    y = np.asarray(populations, dtype=float)
    if alpha_guess is None:
        alpha_guess = float(x[np.argmax(y)])

    def model(a, c, amp, alpha, off):
        return leakage_model(a, c, amp, alpha, off, num_atoms)

    p, cov = optimize.curve_fit(model, x, y, p0=[1.0, 0.0, alpha_guess, 0.0], sigma=sigma,
                                absolute_sigma=sigma is not None, maxfev=20000)
    return LeakageFit(float(p[0]), float(p[1]), float(p[2]), float(p[3]), np.sqrt(np.clip(np.diag(cov), 0, None)))


# -- Allan deviation -------------------------------------------------------------------------


@dataclass
class AllanResult:
    taus: np.ndarray
    adev: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    edf: np.ndarray


def overlapping_avar(y: np.ndarray, m: int) -> float:
    """Overlapping Allan variance of frequency samples at averaging factor ``m``."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    if m < 1 or 2 * m > n:
        raise AnalysisError(f"averaging factor {m} needs at least {2 * m} samples")
    c = np.concatenate([[0.0], np.cumsum(y)])
    avg = (c[m:] - c[:-m]) / m
    d = avg[m:] - avg[:-m]
    return float(0.5 * np.mean(d * d))


def white_pm_edf(num_freq: int, m: int) -> float:
    """Equivalent degrees of freedom of the overlapping estimator for white phase noise."""
    n = num_freq + 1  # phase points
    return (n + 1) * (n - 2 * m) / (2.0 * (n - m))


def overlapping_allan(y, t_cycle: float, taus=None, level: float = 0.68) -> AllanResult:
    """Overlapping Allan deviation with chi-squared intervals.

    ``taus`` in seconds are rounded to whole cycles; by default octave spacing
    up to half the record.
    """
    y = np.asarray(y, dtype=float)
    if taus is None:
        ms = 2 ** np.arange(int(np.log2(len(y) // 2)) + 1)
    else:
        ms = np.unique(np.maximum(1, np.rint(np.asarray(taus, float) / t_cycle).astype(int)))
    ms = ms[2 * ms <= len(y)]
    adev = np.sqrt([overlapping_avar(y, int(m)) for m in ms])
    edf = np.array([white_pm_edf(len(y), int(m)) for m in ms])
    tail = (1 - level) / 2
    lo = adev * np.sqrt(edf / stats.chi2.ppf(1 - tail, edf))
    hi = adev * np.sqrt(edf / stats.chi2.ppf(tail, edf))
    return AllanResult(ms * t_cycle, adev, lo, hi, edf)


def sql_hl_reference(num_ensembles: int, num_atoms: int, dark_time: float, t_cycle: float,
                     nu0: float = NU0_SR88, tau=1.0) -> tuple[np.ndarray, np.ndarray]:
    """``(sigma_SQL, sigma_HL)`` for ``M`` ensembles of ``N`` atoms at averaging time ``tau``."""
    tau = np.asarray(tau, dtype=float)
    hl = 1.0 / (2 * np.pi * nu0 * dark_time * np.sqrt(num_ensembles) * num_atoms) * np.sqrt(t_cycle / tau)
    return np.sqrt(num_atoms) * hl, hl


# -- frequency noise -------------------------------------------------------------------------


class NoiseProcess:
    """Fractional laser frequency noise averaged over each dark window."""

    def sample(self, rng: np.random.Generator, cycles: int, dark_time: float, t_cycle: float) -> np.ndarray:
        raise NotImplementedError


@dataclass
class WhiteFM(NoiseProcess):
    """White frequency noise with Allan deviation ``adev_1s / sqrt(tau)``."""

    adev_1s: float

    def sample(self, rng, cycles, dark_time, t_cycle):
        return rng.normal(0.0, self.adev_1s / np.sqrt(dark_time), cycles)


@dataclass
class RandomWalkFM(NoiseProcess):
    """Random-walk frequency with per-second diffusion ``rate`` (``y`` std after 1 s)."""

    rate: float

    def sample(self, rng, cycles, dark_time, t_cycle):
        return np.cumsum(rng.normal(0.0, self.rate * np.sqrt(t_cycle), cycles))


@dataclass
class FlickerFM(NoiseProcess):
    """Flicker-like noise from Ornstein-Uhlenbeck processes with log-spaced correlation times.

    Each component has stationary std ``level``; equal weights per decade give
    an approximately flat Allan deviation between the shortest and longest times.
    """

    level: float
    tau_min: float = 1.0
    tau_max: float = 1e4
    per_decade: int = 2

    def sample(self, rng, cycles, dark_time, t_cycle):
        ntau = max(1, int(round(np.log10(self.tau_max / self.tau_min) * self.per_decade)) + 1)
        out = np.zeros(cycles)
        for tc in np.geomspace(self.tau_min, self.tau_max, ntau):
            a = np.exp(-t_cycle / tc)
            kick = self.level * np.sqrt(1 - a * a)
            x = rng.normal(0.0, self.level)
            noise = rng.normal(0.0, kick, cycles)
            for q in range(cycles):
                out[q] += x
                x = a * x + noise[q]
        return out / np.sqrt(ntau)


@dataclass
class Sinusoid(NoiseProcess):
    """Line noise ``amplitude sin(2 pi f t + phase)`` averaged over the dark time."""

    amplitude: float
    frequency: float = 60.0
    random_phase: bool = True

    def sample(self, rng, cycles, dark_time, t_cycle):
        phase = rng.uniform(0, 2 * np.pi) if self.random_phase else 0.0
        w = 2 * np.pi * self.frequency
        t0 = np.arange(cycles) * t_cycle
        return self.amplitude * (np.cos(w * t0 + phase) - np.cos(w * (t0 + dark_time) + phase)) / (w * dark_time)


@dataclass
class CompositeNoise(NoiseProcess):
    parts: Sequence[NoiseProcess] = ()

    def sample(self, rng, cycles, dark_time, t_cycle):
        out = np.zeros(cycles)
        for p in self.parts:
            out += p.sample(rng, cycles, dark_time, t_cycle)
        return out


# -- clock loop ------------------------------------------------------------------------------


@dataclass
class ClockConfig:
    """Parameters of a servo-locked atom-laser comparison.

    ``css`` replaces the ``M`` GHZ ensembles by ``M * N`` independent atoms.
    ``fill`` is the per-atom loading probability; ``contrast_mode`` is
    ``"max"`` (every ensemble uses the contrast of the full size) or
    ``"per_size"`` (look up the filled size in the table). Without
    ``projection_noise`` each ensemble reports its expected parity.
    """

    num_ensembles: int = 9
    num_atoms: int = 4
    dark_time: float = 3e-3
    t_cycle: float = 1.26
    cycles: int = 10000
    gain: float = 1e-3
    nu0: float = NU0_SR88
    css: bool = False
    fill: float = 1.0
    contrast_mode: str = "max"
    projection_noise: bool = True

    def __post_init__(self):
        if self.cycles < 2:
            raise AnalysisError("need at least two cycles")
        if not 0 < self.dark_time < self.t_cycle:
            raise AnalysisError("dark time must be positive and shorter than the cycle")
        if self.contrast_mode not in ("max", "per_size"):
            raise AnalysisError(f"unknown contrast mode {self.contrast_mode!r}")
        if not 0 < self.fill <= 1:
            raise AnalysisError("fill probability must lie in (0, 1]")

    @property
    def total_atoms(self) -> int:
        return self.num_ensembles * self.num_atoms


@dataclass
class ClockRun:
    """Per-cycle record; frequencies in Hz."""

    config: ClockConfig
    delta_est: np.ndarray
    delta_corr: np.ndarray
    delta_true: np.ndarray
    sizes: list[np.ndarray]
    parities: list[np.ndarray]
    skipped: int = 0

    @property
    def y(self) -> np.ndarray:
        """Fractional frequency at the servo input."""
        return self.delta_est / self.config.nu0

    def allan(self, taus=None) -> AllanResult:
        return overlapping_allan(self.y, self.config.t_cycle, taus)


def parity_estimate(parities, sizes, contrasts, dark_time: float) -> float:
    """Locally unbiased detuning estimate in Hz: ``mean_j P_j / (2 pi N_j C_j T)``."""
    parities = np.asarray(parities, dtype=float)
    return float(np.mean(parities / (2 * np.pi * np.asarray(sizes) * np.asarray(contrasts) * dark_time)))


def run_clock_lock(config: ClockConfig, noise: NoiseProcess | None, contrast: Mapping[int, float] | float = 1.0,
                   seed: int = 0) -> ClockRun:
    """Simulate the integrating servo cycle by cycle.

    Each cycle the true detuning ``delta - delta_corr`` rotates every ensemble
    by ``theta = 2 pi N_j (delta - delta_corr) T``; parities are drawn with
    ``P(+1) = (1 + C sin theta) / 2`` and the locally unbiased estimator
    ``mean_j P_j / (2 pi N_j C T)`` drives ``delta_corr += gain * delta_est``.
    """
    rng = np.random.default_rng(seed)
    cfg = config
    if cfg.css:
        sizes_nominal, base = np.ones(cfg.total_atoms, dtype=int), 1
    else:
        sizes_nominal, base = np.full(cfg.num_ensembles, cfg.num_atoms), cfg.num_atoms
    table = {base: float(contrast)} if np.isscalar(contrast) else {int(k): float(v) for k, v in contrast.items()}
    if base not in table:
        raise AnalysisError(f"contrast table lacks the nominal size {base}")
    if any(c <= 0 for c in table.values()):
        raise AnalysisError("contrasts must be positive")
    y_noise = np.zeros(cfg.cycles) if noise is None else noise.sample(rng, cfg.cycles, cfg.dark_time, cfg.t_cycle)
    delta = y_noise * cfg.nu0
    est = np.zeros(cfg.cycles)
    corr = np.zeros(cfg.cycles)
    sizes_log, par_log = [], []
    skipped = 0
    c_corr = 0.0
    for q in range(cfg.cycles):
        corr[q] = c_corr
        if cfg.fill < 1:
            sizes = rng.binomial(sizes_nominal, cfg.fill)
            sizes = sizes[sizes > 0]
        else:
            sizes = sizes_nominal
        if sizes.size == 0:
            skipped += 1
            log.info("cycle %d skipped: no filled ensembles", q)
            est[q] = np.nan
            sizes_log.append(sizes)
            par_log.append(np.array([], dtype=int))
            continue
        if cfg.contrast_mode == "per_size":
            missing = set(sizes.tolist()) - set(table)
            if missing:
                raise AnalysisError(f"contrast table lacks sizes {sorted(missing)}")
            c = np.array([table[int(s)] for s in sizes])
        else:
            c = np.full(sizes.shape, table[base])
        theta = 2 * np.pi * sizes * (delta[q] - c_corr) * cfg.dark_time
        if cfg.projection_noise:
            p_even = 0.5 * (1 + c * np.sin(theta))
            parity = np.where(rng.random(sizes.size) < p_even, 1, -1)
        else:
            parity = c * np.sin(theta)
        est[q] = parity_estimate(parity, sizes, c, cfg.dark_time)
        c_corr += cfg.gain * est[q]
        sizes_log.append(sizes)
        par_log.append(parity)
    if skipped:
        keep = ~np.isnan(est)
        est = est[keep]
    return ClockRun(cfg, est, corr, delta, sizes_log, par_log, skipped)


def variance_ratio(run_a: ClockRun, run_b: ClockRun, taus) -> np.ndarray:
    """``avar_a / avar_b`` at each ``tau``."""
    a = run_a.allan(taus)
    b = run_b.allan(taus)
    return (a.adev / b.adev) ** 2


# -- parity records --------------------------------------------------------------------------


@dataclass
class ParityRecord:
    """Per-shot parity outcomes (+1/-1) tagged by ensemble size and analysis phase."""

    sizes: np.ndarray
    phases: np.ndarray
    parities: np.ndarray

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=int)
        self.phases = np.asarray(self.phases, dtype=float)
        self.parities = np.asarray(self.parities, dtype=int)
        if not (len(self.sizes) == len(self.phases) == len(self.parities)):
            raise AnalysisError("record columns differ in length")
        if not np.isin(self.parities, (-1, 1)).all():
            raise AnalysisError("parities must be +1 or -1")

    def select(self, size: int) -> ParityRecord:
        k = self.sizes == size
        return ParityRecord(self.sizes[k], self.phases[k], self.parities[k])

    def by_phase(self, level: float = 0.68):
        """Mean parity and symmetric standard error per distinct phase."""
        phis = np.unique(self.phases)
        mean, err = [], []
        for p in phis:
            sel = self.parities[self.phases == p]
            n_even = int((sel == 1).sum())
            m, lo, hi = parity_interval(n_even, len(sel), level)
            mean.append(m)
            err.append(max(0.5 * (hi - lo), 1e-9))
        return phis, np.array(mean), np.array(err)
