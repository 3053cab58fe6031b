import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from ghzclock import pulsegen
from ghzclock.constants import OMEGA_R, gamma_rydberg
from ghzclock.pulsegen import PhasePulse, SectorModel


def square(num_steps, phases=None, dt=6.5e-9, rabi=OMEGA_R):
    phases = np.zeros(num_steps) if phases is None else phases
    return PhasePulse(phases, dt=dt, rabi=rabi, tau_rise=0.0)


def ode_sector(pulse, n, gamma):
    """Independent oracle: adaptive ODE through each piecewise-constant step."""
    env = pulse.envelope()
    psi = np.array([1.0, 0.0], complex)
    c = math.sqrt(n) * pulse.rabi / 2
    for k, phi in enumerate(pulse.phases):
        h = np.array([[0, c * env[k] * np.exp(-1j * phi)], [c * env[k] * np.exp(1j * phi), -0.5j * gamma]])
        sol = solve_ivp(lambda t, y: -1j * h @ y, (0, pulse.dt), psi, method="DOP853", rtol=1e-12, atol=1e-14)
        psi = sol.y[:, -1]
    return psi


def test_full_rabi_cycle():
    for n in (1, 2, 3):
        t = 2 * np.pi / (math.sqrt(n) * OMEGA_R)
        steps = 200
        p = square(steps, dt=t / steps)
        a0, aw = pulsegen.sector_propagate(p, SectorModel(n))
        assert a0 == pytest.approx(-1, abs=1e-12)
        assert abs(aw) < 1e-12


def test_unitary_without_decay(rng):
    p = PhasePulse(rng.uniform(-3, 3, 80))
    for n in (1, 2, 5):
        a0, aw = pulsegen.sector_propagate(p, SectorModel(n))
        assert abs(a0) ** 2 + abs(aw) ** 2 == pytest.approx(1, abs=1e-10)


def test_decay_matches_ode_oracle(rng):
    p = PhasePulse(rng.uniform(-3, 3, 30))
    gamma = 3e5
    for n in (1, 3):
        a0, aw = pulsegen.sector_propagate(p, SectorModel(n, gamma=gamma))
        ref = ode_sector(p, n, gamma)
        assert abs(a0) ** 2 + abs(aw) ** 2 == pytest.approx(np.sum(np.abs(ref) ** 2), abs=1e-8)
        np.testing.assert_allclose([a0, aw], ref, atol=1e-8)
        assert abs(a0) ** 2 + abs(aw) ** 2 < 1


def test_coarse_step_rejected():
    with pytest.raises(pulsegen.PulseError):
        pulsegen.sector_propagate(PhasePulse(np.zeros(3), dt=1e-6), SectorModel(1))


def test_fidelity_perfect_amplitudes():
    for n in (2, 3, 5):
        a = 0.77
        k = np.arange(n + 1)
        amps = (-1j) ** ((k * k) % 4) * np.exp(-1j * k * a)
        f, alpha = pulsegen.fidelity_from_amplitudes(amps, n)
        assert f == pytest.approx(1, abs=1e-12)
        assert alpha == pytest.approx(a, abs=1e-6)


def test_fidelity_zero_amplitudes():
    assert pulsegen.fidelity_from_amplitudes(np.zeros(4), 3)[0] == 0.0


def test_fidelity_dense_grid_oracle(rng):
    amps = rng.normal(size=4) + 1j * rng.normal(size=4)
    amps /= np.abs(amps).max()
    n = np.arange(4)
    alphas = np.linspace(0, 2 * np.pi, 200001)
    w = np.array([1, 3, 3, 1]) * (1j) ** ((n * n) % 4)
    dense = np.max(np.abs(np.exp(1j * np.outer(alphas, n)) @ (w * amps)) ** 2) / 64
    assert pulsegen.fidelity_from_amplitudes(amps, 3)[0] == pytest.approx(dense, rel=1e-8)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_gradient_matches_central_differences(rng, n):
    p = PhasePulse(rng.uniform(-np.pi, np.pi, 60), gamma=0.0)
    for gamma in (0.0, gamma_rydberg()):
        f, g, _ = pulsegen.fidelity_and_gradient(p, n, gamma)
        h = 1e-6
        fd = np.empty(p.num_steps)
        for k in range(p.num_steps):
            up = p.phases.copy()
            dn = p.phases.copy()
            up[k] += h
            dn[k] -= h
            fd[k] = (pulsegen.gate_fidelity(replace(p, phases=up), n, gamma)[0]
                     - pulsegen.gate_fidelity(replace(p, phases=dn), n, gamma)[0]) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_grape_cz_reaches_target():
    res = pulsegen.grape_optimize(2, num_steps=49, seed=0, target=0.999)
    assert res.fidelity >= 0.999
    again = pulsegen.grape_optimize(2, num_steps=49, seed=0, target=0.999)
    np.testing.assert_array_equal(res.pulse.phases, again.pulse.phases)


def test_grape_stationary_at_optimum():
    p = pulsegen.reference_pulse(2)
    res = pulsegen.grape_optimize(2, num_steps=p.num_steps, initial=[p.phases], restarts=1, maxiter=0)
    assert abs(res.fidelity - pulsegen.gate_fidelity(p, 2)[0]) < 1e-10


def test_grape_rejects_short_duration():
    with pytest.raises(pulsegen.PulseError):
        pulsegen.grape_optimize(2, num_steps=2)


def test_reference_pulses_meet_target_and_grow():
    durations = []
    for n in pulsegen.REFERENCE_SIZES:
        p = pulsegen.reference_pulse(n)
        assert pulsegen.gate_fidelity(p, n)[0] >= 0.999
        durations.append(p.duration)
    assert all(b >= a for a, b in zip(durations, durations[1:]))


def test_decay_fidelity_examples():
    p = pulsegen.reference_pulse(4)
    assert pulsegen.decay_limited_fidelity(4, p, 0.0) == pulsegen.gate_fidelity(p, 4)[0]
    inf = [pulsegen.decay_infidelity(4, p, g) for g in np.linspace(0, 1e5, 6)]
    assert all(b > a for a, b in zip(inf, inf[1:]))


def test_offset_invariance(rng):
    p = PhasePulse(rng.uniform(-3, 3, 70))
    for n in (2, 3):
        f0, a0 = pulsegen.gate_fidelity(p, n)
        f1, a1 = pulsegen.gate_fidelity(p.shifted(0.9), n)
        assert f1 == pytest.approx(f0, abs=1e-12)


def test_dt_halving_insensitive():
    for n in (2, 4):
        p = pulsegen.reference_pulse(n)
        assert abs(pulsegen.gate_fidelity(p.refined(2), n)[0] - pulsegen.gate_fidelity(p, n)[0]) < 1e-4


def test_envelope_limit_is_square_pulse(rng):
    phases = rng.uniform(-3, 3, 60)
    sq = PhasePulse(phases, tau_rise=0.0)
    tiny = PhasePulse(phases, tau_rise=1e-15)
    np.testing.assert_allclose(pulsegen.sector_amplitudes(tiny, 3), pulsegen.sector_amplitudes(sq, 3), atol=1e-12)


def test_envelope_shape():
    env = pulsegen.smoothstep_envelope(100, 6.5e-9, 15e-9)
    assert env.min() >= 0 and env.max() <= 1
    assert env[0] < env[1] < env[2] and env[0] < 0.5
    np.testing.assert_allclose(env, env[::-1])
    assert env[50] == 1.0


def test_pulse_file_round_trip(tmp_path, rng):
    p = PhasePulse(rng.uniform(-3, 3, 33), n_max=3, gamma=1.5e4, fidelity=0.98765)
    path = tmp_path / "p.txt"
    pulsegen.save_pulse(p, path)
    q = pulsegen.load_pulse(path)
    np.testing.assert_array_equal(p.phases, q.phases)
    assert (q.dt, q.rabi, q.tau_rise, q.n_max, q.gamma, q.fidelity) == (p.dt, p.rabi, p.tau_rise, 3, 1.5e4, 0.98765)


def test_pulse_file_missing_header(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("# n_max = 2\n0.1\n")
    with pytest.raises(pulsegen.PulseError):
        pulsegen.load_pulse(path)


def test_power_law_fit():
    x = np.array([2, 3, 4, 6, 8])
    a, b = pulsegen.fit_power_law(x, 3.0 * x**0.59)
    assert a == pytest.approx(3.0) and b == pytest.approx(0.59)


def test_minimal_duration_small_case():
    res = pulsegen.find_minimal_duration(2, 0.99, restarts=2, bracket=(30, 60))
    assert res.fidelity >= 0.99
    below = [f for s, f in res.trials.items() if s < res.pulse.num_steps]
    assert all(f < 0.99 for f in below)


@given(st.integers(0, 2**31 - 1))
def test_norm_never_increases(seed):
    rng = np.random.default_rng(seed)
    p = PhasePulse(rng.uniform(-3, 3, 20))
    amps = pulsegen.sector_amplitudes(p, 4, gamma=rng.uniform(0, 1e6))
    assert np.all(np.abs(amps) <= 1 + 1e-12)
