import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_state
from ghzclock import qcore
from ghzclock.qcore import EnsembleState


def kron_all(mats):
    out = np.array([[1.0 + 0j]])
    for m in mats:
        out = np.kron(out, m)
    return out


def global_matrix(num_atoms, single):
    # atom 0 is the least significant bit, i.e. the rightmost Kronecker factor
    return kron_all([single] * num_atoms)


def bits(num_atoms, index):
    return [(index >> j) & 1 for j in range(num_atoms)]


def test_x_identity(rng):
    s = random_state(rng, 3)
    np.testing.assert_allclose(qcore.apply_global_x(s, 0.0).amplitudes, s.amplitudes, atol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_x_pi_flips_all(n):
    out = qcore.apply_global_x(EnsembleState.ground(n), np.pi)
    expect = np.zeros(2**n, complex)
    expect[-1] = (-1j) ** n
    np.testing.assert_allclose(out.amplitudes, expect, atol=1e-14)


def test_x_matches_kronecker_oracle(rng):
    s = random_state(rng, 3)
    rx = np.array([[np.cos(0.35), -1j * np.sin(0.35)], [-1j * np.sin(0.35), np.cos(0.35)]])
    expect = global_matrix(3, rx) @ s.amplitudes
    out = qcore.apply_global_x(s, 0.7)
    np.testing.assert_allclose(out.amplitudes, expect, atol=1e-13)
    assert abs(out.norm - 1) < 1e-12


def test_z_matches_enumeration(rng):
    s = random_state(rng, 4)
    theta = 1.3
    out = qcore.apply_global_z(s, theta)
    for idx in range(16):
        n = sum(bits(4, idx))
        # sigma_z |1> = +|1>: phase exp(+i theta (N - 2n)/2) on a state with n excitations
        assert out.amplitudes[idx] == pytest.approx(s.amplitudes[idx] * np.exp(1j * theta * (4 - 2 * n) / 2), abs=1e-14)


def test_z_two_pi_is_global_phase(rng):
    s = random_state(rng, 3)
    out = qcore.apply_global_z(s, 2 * np.pi)
    ratio = out.amplitudes / s.amplitudes
    np.testing.assert_allclose(ratio, ratio[0] * np.ones_like(ratio), atol=1e-13)


def test_z_quarter_turn_relative_phase():
    s = EnsembleState(1, np.array([1, 1]) / np.sqrt(2))
    out = qcore.apply_global_z(s, np.pi / 2)
    rel = out.amplitudes[1] / out.amplitudes[0]
    # magnitude of the relative phase is pi/2; the sign follows the fixed convention
    assert abs(abs(np.angle(rel)) - np.pi / 2) < 1e-12


def test_collective_gate_ground_fixed():
    out = qcore.apply_collective_gate(EnsembleState.ground(5))
    assert out.amplitudes[0] == pytest.approx(1.0)


@pytest.mark.parametrize("n", range(1, 11))
def test_gate_forms_agree(n):
    diag = qcore.collective_gate_phases(n)
    idx = np.arange(2**n)
    counts = np.array([bin(i).count("1") for i in idx])
    np.testing.assert_allclose(diag, np.exp(1j * np.pi * counts**2 / 2), atol=1e-13)
    np.testing.assert_allclose(qcore.collective_gate_from_parity(n), diag, atol=1e-12)
    for i in range(2**n) if n <= 6 else [0, 1, 2**n - 1, 5]:
        b = EnsembleState.basis(n, i)
        np.testing.assert_allclose(qcore.collective_gate_via_cz(b).amplitudes, diag * b.amplitudes, atol=1e-12)


def test_gate_forms_agree_random(rng):
    for n in (3, 6, 8):
        s = random_state(rng, n)
        a = qcore.apply_collective_gate(s).amplitudes
        np.testing.assert_allclose(qcore.collective_gate_via_cz(s).amplitudes, a, atol=1e-12)
        np.testing.assert_allclose(qcore.collective_gate_from_parity(n) * s.amplitudes, a, atol=1e-12)


@pytest.mark.parametrize("n", range(1, 11))
def test_circuit_gives_paper_ghz(n):
    psi = qcore.apply_global_x(qcore.apply_collective_gate(qcore.apply_global_x(EnsembleState.ground(n), np.pi / 2)),
                               np.pi / 2)
    expect = np.zeros(2**n, complex)
    expect[0] = 1
    expect[-1] = (-1j) ** (n - 1)
    expect *= np.exp(-1j * np.pi / 4) / np.sqrt(2)
    np.testing.assert_allclose(psi.amplitudes, expect, atol=1e-12)
    assert qcore.ghz_fidelity(psi) > 1 - 1e-12


def test_cz_examples():
    s = qcore.apply_pairwise_cz(EnsembleState.basis(2, 3), [(0, 1)])
    assert s.amplitudes[3] == pytest.approx(-1)
    s = qcore.apply_pairwise_cz(EnsembleState.basis(2, 1), [(0, 1)])
    assert s.amplitudes[1] == pytest.approx(1)


@pytest.mark.parametrize("pairs", [[(0, 0)], [(0, 3)], [(0, 1), (1, 0)], [(-1, 1)]])
def test_cz_rejects_bad_pairs(pairs):
    with pytest.raises(ValueError):
        qcore.apply_pairwise_cz(EnsembleState.ground(3), pairs)


def test_fidelity_examples():
    assert qcore.ghz_fidelity(EnsembleState.ghz(4, 1.234)) == pytest.approx(1.0)
    assert qcore.ghz_fidelity(EnsembleState.ground(4)) == pytest.approx(0.5)
    mix = [(0.5, EnsembleState.ground(3)), (0.5, EnsembleState.basis(3, 7))]
    assert qcore.ghz_fidelity(mix) == pytest.approx(0.5)


def test_fidelity_brute_force_over_z(rng):
    s = random_state(rng, 3)
    ghz = EnsembleState.ghz(3).amplitudes
    thetas = np.linspace(0, 4 * np.pi, 20001)
    best = max(abs(np.vdot(ghz, qcore.apply_global_z(s, t).amplitudes)) ** 2 for t in thetas)
    assert qcore.ghz_fidelity(s) == pytest.approx(best, abs=1e-7)


def test_fidelity_rejects_unnormalized():
    with pytest.raises(ValueError):
        qcore.ghz_fidelity([(0.7, EnsembleState.ground(2))])


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_fidelity_equals_parts_on_ideal_circuits(n):
    # F = (C + p0 + pN)/2, with C from the amplitude of the parity oscillation
    for alpha in (0.0, 0.4, 1.1):
        psi = qcore.prepare_ghz(n, alpha_c=alpha)
        phis = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        par = np.array([qcore.parity_expectation(qcore.analysis_rotation(psi, p)) for p in phis])
        c = np.hypot(2 * np.mean(par * np.sin(n * phis)), 2 * np.mean(par * np.cos(n * phis)))
        assert qcore.ghz_fidelity(psi) == pytest.approx(0.5 * (c + qcore.ghz_populations(psi)), abs=1e-12)


def test_parity_examples():
    for n in (1, 2, 4):
        # +1 for even N under the fixed convention; the sign is (-1)^N in general
        assert qcore.parity_expectation(EnsembleState.ground(n)) == pytest.approx((-1) ** n)
    mix = [(0.5, EnsembleState.ground(3)), (0.5, EnsembleState.basis(3, 7))]
    assert qcore.parity_expectation(mix) == pytest.approx(0.0)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 6])
def test_parity_oscillation_has_n_periods(n):
    psi = qcore.prepare_ghz(n, correct_phase=True)
    phis = np.linspace(0, 2 * np.pi, 512, endpoint=False)
    par = np.array([qcore.parity_expectation(qcore.analysis_rotation(psi, p)) for p in phis])
    spectrum = np.abs(np.fft.rfft(par))
    assert int(np.argmax(spectrum)) == n
    # circuit oracle: amplitude 1 at frequency N, nothing elsewhere
    np.testing.assert_allclose(np.abs(par).max(), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.delete(spectrum, n), 0.0, atol=1e-8)


@given(st.integers(1, 6), st.floats(-10, 10), st.integers(0, 2**31 - 1))
def test_rotations_are_unitary(n, theta, seed):
    s = random_state(np.random.default_rng(seed), n)
    for op in (qcore.apply_global_x, qcore.apply_global_z):
        assert abs(op(s, theta).norm - 1) < 1e-12
    assert abs(qcore.apply_collective_gate(s).norm - 1) < 1e-12


@given(st.integers(2, 8))
def test_calibrated_circuit_is_perfect(n):
    assert qcore.ghz_fidelity(qcore.prepare_ghz(n)) > 1 - 1e-12


def test_state_invariants():
    with pytest.raises(ValueError):
        EnsembleState(0, np.ones(1))
    with pytest.raises(ValueError):
        EnsembleState(2, np.ones(3))
    with pytest.raises(ValueError):
        EnsembleState(1, np.array([1.0, 1.0]))
    s = EnsembleState(1, np.array([np.sqrt(0.5), 0]), norm_deficit=0.5)
    assert s.norm_deficit == 0.5
