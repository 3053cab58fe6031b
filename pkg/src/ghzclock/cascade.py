"""Bayesian phase estimation with simultaneously read cascades of GHZ ensembles.

Size ``k`` has ``M_k`` copies of an ``N_k``-atom GHZ state; one cycle yields
the even-parity counts ``m_k``. Estimates are posterior means under a
Gaussian prior of width ``sigma``. Integrals over the phase use composite
Gauss-Legendre panels on ``[-pi - 6 sigma, pi + 6 sigma]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln

from . import pulsegen
from .constants import gamma_rydberg
from .metrology import ParityRecord

log = logging.getLogger(__name__)

ENUMERATION_LIMIT = 10_000_000
GL_ORDER = 32
_CHUNK_ELEMENTS = 4_000_000


class CascadeError(ValueError):
    pass


class NoInformation(CascadeError):
    """Raised when the Bayesian error is not below the prior width."""


@dataclass(frozen=True)
class CascadeSpec:
    """Sizes, copy counts and sinusoidal parity models ``C_k sin[N_k (phi - phi_k)] + y_k``."""

    sizes: tuple[int, ...]
    copies: tuple[int, ...]
    contrasts: tuple[float, ...]
    phases: tuple[float, ...]
    offsets: tuple[float, ...]
    sigma: float = math.pi / 6

    def __post_init__(self):
        k = len(self.sizes)
        for name in ("copies", "contrasts", "phases", "offsets"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
            if len(getattr(self, name)) != k:
                raise CascadeError(f"{name} must have one entry per size")
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        if k == 0:
            raise CascadeError("empty cascade")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])) or self.sizes[0] < 1:
            raise CascadeError("sizes must be positive and strictly increasing")
        if any(m < 1 for m in self.copies):
            raise CascadeError("every size needs at least one copy")
        if any(abs(c) + abs(y) > 1 + 1e-12 for c, y in zip(self.contrasts, self.offsets)):
            raise CascadeError("need |C_k| + |y_k| <= 1")
        if not self.sigma > 0:
            raise CascadeError("prior width must be positive")
        outside = 2 * stats.norm.sf(math.pi / self.sigma)
        if outside > 0.01:
            log.warning("prior puts %.3g of its mass outside [-pi, pi]", outside)

    @classmethod
    def ideal(cls, sizes: Sequence[int], copies: Sequence[int], sigma: float = math.pi / 6, contrast: float = 1.0):
        k = len(sizes)
        return cls(tuple(sizes), tuple(copies), (contrast,) * k, (0.0,) * k, (0.0,) * k, sigma)

    @classmethod
    def linear(cls, num_sizes: int, last_copies: int = 2, slope: int = 8, sigma: float = math.pi / 6,
               contrast: float = 1.0):
        """``N_k = 2^(k-1)`` and ``M_k = M_K + mu (K - k)``."""
        k = np.arange(1, num_sizes + 1)
        return cls.ideal([int(2 ** (i - 1)) for i in k], [int(last_copies + slope * (num_sizes - i)) for i in k],
                         sigma, contrast)

    @property
    def num_sizes(self) -> int:
        return len(self.sizes)

    @property
    def n_total(self) -> int:
        return int(sum(m * n for m, n in zip(self.copies, self.sizes)))

    @property
    def num_outcomes(self) -> int:
        return int(np.prod([m + 1 for m in self.copies], dtype=float))

    def with_contrasts(self, contrasts: Sequence[float]) -> CascadeSpec:
        return replace(self, contrasts=tuple(float(c) for c in contrasts))

    def with_copies(self, copies: Sequence[int]) -> CascadeSpec:
        return replace(self, copies=tuple(int(m) for m in copies))


def success_probability(spec: CascadeSpec, k: int, phi) -> np.ndarray:
    """``Q_k(phi) = [1 + <P_z,k>(phi)] / 2``."""
    phi = np.asarray(phi, dtype=float)
    parity = spec.contrasts[k] * np.sin(spec.sizes[k] * (phi - spec.phases[k])) + spec.offsets[k]
    return np.clip(0.5 * (1 + parity), 0.0, 1.0)


def outcome_probability(spec: CascadeSpec, outcome: Sequence[int], phi) -> np.ndarray:
    """Product of binomial probabilities ``P({m_k} | phi)``."""
    if len(outcome) != spec.num_sizes:
        raise CascadeError("outcome must have one count per size")
    out = np.ones(np.shape(phi))
    for k, m in enumerate(outcome):
        if not 0 <= m <= spec.copies[k]:
            raise CascadeError(f"m_{k} = {m} outside 0..{spec.copies[k]}")
        out = out * stats.binom.pmf(m, spec.copies[k], success_probability(spec, k, phi))
    return out


def all_outcomes(spec: CascadeSpec) -> np.ndarray:
    """Every outcome set in mixed-radix order (last size varies fastest)."""
    grids = np.meshgrid(*[np.arange(m + 1) for m in spec.copies], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def outcome_index(spec: CascadeSpec, outcomes) -> np.ndarray:
    outcomes = np.atleast_2d(np.asarray(outcomes, dtype=np.int64))
    radix = np.array([m + 1 for m in spec.copies], dtype=np.int64)
    strides = np.concatenate([np.cumprod(radix[::-1])[::-1][1:], [1]])
    return outcomes @ strides


# -- quadrature ------------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorGrid:
    """Quadrature nodes with weights that already include the prior density."""

    nodes: np.ndarray
    weights: np.ndarray
    panels: int


def prior_grid(spec: CascadeSpec, panels: int | None = None, order: int = GL_ORDER) -> PriorGrid:
    half = math.pi + 6 * spec.sigma
    if panels is None:
        # about two nodes per half-period of the highest likelihood harmonic
        panels = max(8, int(math.ceil(2 * spec.n_total * 2 * half / math.pi / order)))
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(-half, half, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    h = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mid[:, None] + h[:, None] * x[None, :]).ravel()
    weights = (h[:, None] * w[None, :]).ravel() * stats.norm.pdf(nodes, scale=spec.sigma)
    return PriorGrid(nodes, weights, panels)


def _log_tables(spec: CascadeSpec, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``log Q_k`` and ``log(1 - Q_k)`` at each phase, shape ``(K, len(phi))``, floored at 1e-300."""
    q = np.array([success_probability(spec, k, phi) for k in range(spec.num_sizes)])
    return np.log(np.maximum(q, 1e-300)), np.log(np.maximum(1 - q, 1e-300))


def _log_binom(spec: CascadeSpec, outcomes: np.ndarray) -> np.ndarray:
    m = np.asarray(spec.copies, dtype=float)
    return (gammaln(m + 1) - gammaln(outcomes + 1) - gammaln(m - outcomes + 1)).sum(axis=1)


def log_likelihood(spec: CascadeSpec, outcomes: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """``log P({m_k} | phi)`` with shape ``(len(outcomes), len(phi))``."""
    outcomes = np.atleast_2d(np.asarray(outcomes, dtype=float))
    lq, lnq = _log_tables(spec, np.asarray(phi, dtype=float))
    m = np.asarray(spec.copies, dtype=float)
    return outcomes @ lq + (m - outcomes) @ lnq + _log_binom(spec, outcomes)[:, None]


def _chunks(total: int, width: int):
    step = max(1, _CHUNK_ELEMENTS // max(1, width))
    for start in range(0, total, step):
        yield slice(start, min(total, start + step))


def _posterior_moments(spec: CascadeSpec, outcomes: np.ndarray, grid: PriorGrid):
    """Marginals ``P({m_k})`` and posterior means for each outcome set."""
    outcomes = np.atleast_2d(outcomes)
    marg = np.empty(len(outcomes))
    mean = np.empty(len(outcomes))
    logw = np.log(np.maximum(grid.weights, 1e-300))
    for sl in _chunks(len(outcomes), len(grid.nodes)):
        ll = log_likelihood(spec, outcomes[sl], grid.nodes) + logw
        top = ll.max(axis=1)
        bad = ~np.isfinite(top) | (top < -600)
        top = np.where(bad, 0.0, top)
        p = np.exp(ll - top[:, None])
        z = p.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mu = (p @ grid.nodes) / z
        vanish = bad | (z <= 0)
        if vanish.any():
            log.warning("%d outcome sets have vanishing marginal; estimate set to the prior mean", vanish.sum())
        mean[sl] = np.where(vanish, 0.0, mu)
        marg[sl] = np.where(vanish, 0.0, z * np.exp(top))
    return marg, mean


def posterior_mean(spec: CascadeSpec, outcomes, grid: PriorGrid | None = None) -> np.ndarray:
    """Minimum-MSE estimate for arbitrary outcome sets."""
    grid = prior_grid(spec) if grid is None else grid
    return _posterior_moments(spec, np.atleast_2d(np.asarray(outcomes)), grid)[1]


# -- estimator table -------------------------------------------------------------------------


@dataclass(frozen=True)
class Estimator:
    """Lookup table ``phi_est`` over every outcome set plus the marginals ``P({m_k})``."""

    spec: CascadeSpec
    values: np.ndarray
    marginals: np.ndarray
    grid: PriorGrid
    refinement_error: float

    def __call__(self, outcomes) -> np.ndarray:
        return self.values[outcome_index(self.spec, outcomes)]


def build_estimator(spec: CascadeSpec, tol: float = 1e-8, probe: int = 2000, seed: int = 0,
                    max_refinements: int = 4) -> Estimator:
    """Tabulate the posterior mean for every outcome set.

    The panel count is doubled until a random probe of outcome sets changes
    by less than ``tol`` (relative to the prior width).
    """
    if spec.num_outcomes > ENUMERATION_LIMIT:
        raise CascadeError(f"{spec.num_outcomes} outcome sets exceed the enumeration limit")
    outcomes = all_outcomes(spec)
    grid = prior_grid(spec)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(outcomes), size=min(probe, len(outcomes)), replace=False)
    err = np.inf
    for _ in range(max_refinements + 1):
        fine = prior_grid(spec, 2 * grid.panels)
        a = posterior_mean(spec, outcomes[pick], grid)
        b = posterior_mean(spec, outcomes[pick], fine)
        err = float(np.abs(a - b).max()) / spec.sigma
        if err < tol:
            break
        grid = fine
    else:
        log.warning("quadrature refinement stopped at relative change %.2g", err)
    marg, mean = _posterior_moments(spec, outcomes, grid)
    return Estimator(spec, mean, marg, grid, err)


def max_likelihood_estimator(spec: CascadeSpec) -> Callable:
    """Maximum of the likelihood on a fine grid: a non-Bayesian alternative used for comparison."""
    phi = np.linspace(-math.pi, math.pi, 4097)

    def est(outcomes):
        ll = log_likelihood(spec, np.atleast_2d(outcomes), phi)
        return phi[np.argmax(ll, axis=1)]

    return est


# -- performance -----------------------------------------------------------------------------


@dataclass
class MseCurve:
    phis: np.ndarray
    mean: np.ndarray
    mse: np.ndarray
    mean_se: np.ndarray
    mse_se: np.ndarray
    method: str


def mean_and_mse(spec: CascadeSpec, phis, estimator: Estimator | Callable | None = None, draws: int | None = None,
                 seed: int = 0) -> MseCurve:
    """Mean estimate and MSE versus the true phase.

    Exact enumeration when the outcome count allows and ``draws`` is None,
    otherwise Monte Carlo over outcome sets with standard errors.
    """
    phis = np.atleast_1d(np.asarray(phis, dtype=float))
    exact = draws is None and spec.num_outcomes <= ENUMERATION_LIMIT
    if exact:
        est = build_estimator(spec) if estimator is None else estimator
        outcomes = all_outcomes(spec)
        values = est.values if isinstance(est, Estimator) else np.asarray(est(outcomes))
        mean = np.zeros(len(phis))
        mse = np.zeros(len(phis))
        for sl in _chunks(len(outcomes), len(phis)):
            p = np.exp(log_likelihood(spec, outcomes[sl], phis))
            v = values[sl][:, None]
            mean += (p * v).sum(axis=0)
            mse += (p * (v - phis[None, :]) ** 2).sum(axis=0)
        zero = np.zeros(len(phis))
        return MseCurve(phis, mean, mse, zero, zero, "enumeration")
    draws = 100_000 if draws is None else draws
    rng = np.random.default_rng(seed)
    grid = prior_grid(spec)
    mean, mse, mse_se, mean_se = (np.empty(len(phis)) for _ in range(4))
    for j, phi in enumerate(phis):
        q = np.array([success_probability(spec, k, phi) for k in range(spec.num_sizes)])
        outcomes = rng.binomial(np.asarray(spec.copies)[None, :], q[None, :], size=(draws, spec.num_sizes))
        if estimator is None:
            values = posterior_mean(spec, outcomes, grid)
        else:
            values = np.asarray(estimator(outcomes))
        err2 = (values - phi) ** 2
        mean[j], mean_se[j] = values.mean(), values.std(ddof=1) / math.sqrt(draws)
        mse[j], mse_se[j] = err2.mean(), err2.std(ddof=1) / math.sqrt(draws)
    return MseCurve(phis, mean, mse, mean_se, mse_se, "monte_carlo")


@dataclass
class BmseResult:
    """Root of the prior-averaged MSE, with Monte Carlo standard error when sampled."""

    value: float
    stderr: float
    method: str
    sigma: float

    @property
    def effective(self) -> float:
        return effective_uncertainty(self.value, self.sigma)


def bayesian_mse(spec: CascadeSpec, estimator: Estimator | Callable | None = None, draws: int | None = None,
                 seed: int = 0, grid: PriorGrid | None = None) -> BmseResult:
    """``sqrt( int P(phi) MSE(phi) dphi )``.

    ``estimator`` may be any map from outcome arrays to phases; the default is
    the posterior mean. Above the enumeration limit (or with ``draws``) the
    phase is drawn from the prior and the outcomes from the model.
    """
    exact = draws is None and spec.num_outcomes <= ENUMERATION_LIMIT
    if exact:
        if estimator is None:
            estimator = build_estimator(spec)
        grid = estimator.grid if (grid is None and isinstance(estimator, Estimator)) else grid
        grid = prior_grid(spec) if grid is None else grid
        outcomes = all_outcomes(spec)
        values = estimator.values if isinstance(estimator, Estimator) else np.asarray(estimator(outcomes))
        total = 0.0
        for sl in _chunks(len(outcomes), len(grid.nodes)):
            p = np.exp(log_likelihood(spec, outcomes[sl], grid.nodes))
            total += float(((p * (values[sl][:, None] - grid.nodes[None, :]) ** 2) @ grid.weights).sum())
        return BmseResult(math.sqrt(total), 0.0, "enumeration", spec.sigma)
    draws = 100_000 if draws is None else draws
    rng = np.random.default_rng(seed)
    grid = prior_grid(spec) if grid is None else grid
    phi = rng.normal(0.0, spec.sigma, draws)
    q = np.stack([success_probability(spec, k, phi) for k in range(spec.num_sizes)], axis=1)
    outcomes = rng.binomial(np.asarray(spec.copies)[None, :], q)
    values = posterior_mean(spec, outcomes, grid) if estimator is None else np.asarray(estimator(outcomes))
    err2 = (values - phi) ** 2
    var, se_var = err2.mean(), err2.std(ddof=1) / math.sqrt(draws)
    value = math.sqrt(var)
    return BmseResult(value, se_var / (2 * value), "monte_carlo", spec.sigma)


def effective_uncertainty(bmse: float, sigma: float) -> float:
    """``dphi_eff = dphi_BMSE / sqrt(1 - (dphi_BMSE / sigma)^2)``."""
    ratio = bmse / sigma
    if ratio >= 1:
        raise NoInformation("measurement adds no information (Bayesian error >= prior width)")
    return bmse / math.sqrt(1 - ratio * ratio)


def log_reference(n_total) -> np.ndarray:
    """``pi^2 ln(N_tot) / N_tot``: the reference line for ``dphi_eff^2 N_tot``."""
    n = np.asarray(n_total, dtype=float)
    return math.pi**2 * np.log(n) / n


# -- degraded contrast -----------------------------------------------------------------------


def decay_limited_contrasts(sizes: Sequence[int], gamma: float | None = None) -> dict:
    """Decay-limited fidelity per ensemble size from the stored pulses.

    Sizes without a stored pulse use a power law fitted to the stored decay
    infidelities; ``N = 1`` needs no gate.
    """
    gamma = gamma_rydberg() if gamma is None else gamma
    known = {n: pulsegen.decay_infidelity(n, pulsegen.reference_pulse(n), gamma) for n in pulsegen.REFERENCE_SIZES}
    a, b = pulsegen.fit_power_law(list(known), list(known.values()))
    out = {}
    for n in sizes:
        if n == 1:
            out[n] = 1.0
        elif n in known:
            out[n] = 1.0 - known[n]
        else:
            out[n] = max(0.0, 1.0 - a * n**b)
    return out


def degraded_contrast_model(spec: CascadeSpec, fidelities: Mapping[int, float] | None = None,
                            readout: float = 0.99) -> CascadeSpec:
    """``C_k <- F_decay(N_k) * readout^N_k`` (the decay-limited fidelity stands in for the contrast)."""
    fidelities = decay_limited_contrasts(spec.sizes) if fidelities is None else fidelities
    return spec.with_contrasts([fidelities[n] * readout**n for n in spec.sizes])


# -- bootstrap -------------------------------------------------------------------------------


@dataclass
class BootstrapResult:
    estimates: np.ndarray
    mean: float
    mse: float | None


def bootstrap_estimate(records: ParityRecord, spec: CascadeSpec, replicas: int = 2000, seed: int = 0,
                       estimator: Estimator | Callable | None = None, phi_true: float | None = None
                       ) -> BootstrapResult:
    """Resample ``M_k`` parities per size with replacement and map each set through the estimator."""
    rng = np.random.default_rng(seed)
    counts = np.empty((replicas, spec.num_sizes), dtype=np.int64)
    for k, (n, m) in enumerate(zip(spec.sizes, spec.copies)):
        pool = records.select(n).parities
        if pool.size == 0:
            raise CascadeError(f"no parity records for size {n}")
        draws = rng.integers(0, pool.size, size=(replicas, m))
        counts[:, k] = (pool[draws] == 1).sum(axis=1)
    if estimator is None:
        values = posterior_mean(spec, counts)
    else:
        values = np.asarray(estimator(counts))
    mse = None if phi_true is None else float(np.mean((values - phi_true) ** 2))
    return BootstrapResult(values, float(values.mean()), mse)


def synthetic_records(spec: CascadeSpec, phi: float, shots_per_size: int, seed: int = 0) -> ParityRecord:
    """Binomial parity records drawn from the cascade's own likelihood at a fixed phase."""
    rng = np.random.default_rng(seed)
    sizes, par = [], []
    for k, n in enumerate(spec.sizes):
        q = float(success_probability(spec, k, phi))
        sizes.append(np.full(shots_per_size, n))
        par.append(np.where(rng.random(shots_per_size) < q, 1, -1))
    sizes = np.concatenate(sizes)
    return ParityRecord(sizes, np.full(sizes.size, phi), np.concatenate(par))


def scaling_study(num_sizes: Sequence[int], degraded: bool = False, draws: int = 100_000, seed: int = 0,
                  **kw) -> list[dict]:
    """``dphi_eff^2 N_tot`` for linear cascades of each ``K``."""
    rows = []
    for k in num_sizes:
        spec = CascadeSpec.linear(k, **kw)
        if degraded:
            spec = degraded_contrast_model(spec)
        res = bayesian_mse(spec, draws=None if spec.num_outcomes <= ENUMERATION_LIMIT else draws, seed=seed)
        eff = res.effective
        rows.append({
            "K": k, "n_total": spec.n_total, "bmse_rad": res.value, "bmse_stderr_rad": res.stderr,
            "eff_rad": eff, "eff2_ntot": eff**2 * spec.n_total,
            "reference": float(log_reference(spec.n_total)), "method": res.method,
        })
    return rows
