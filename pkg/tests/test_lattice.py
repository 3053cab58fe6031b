import numpy as np
import pytest

from ghzclock import lattice


@pytest.fixture(scope="module")
def bands():
    return lattice.solve_bands(lattice.depth_from_recoils(50.0))


def test_orthonormal_and_sorted(bands):
    assert bands.orthonormality_residual() < 1e-10
    assert np.all(np.diff(bands.energies, axis=1) >= 0)


def test_free_limit():
    b = lattice.solve_bands(1e-9, q_points=16, m_cutoff=6, check=False)
    np.testing.assert_allclose(b.energies[:, 0], b.qs**2, atol=1e-8)


def test_harmonic_spacing():
    # H = -(1/4 pi^2) d^2/dx^2 + D pi^2 x^2 near a minimum, so hbar omega = sqrt(D)
    for depth in (100.0, 400.0):
        b = lattice.solve_bands(depth, q_points=8, m_cutoff=20)
        gap = b.energies[4, 1] - b.energies[4, 0]
        assert gap == pytest.approx(np.sqrt(depth), rel=0.05)


def test_cutoff_too_small():
    with pytest.raises(lattice.LatticeError):
        lattice.solve_bands(1000.0, m_cutoff=5)
    with pytest.raises(lattice.LatticeError):
        lattice.solve_bands(10.0, m_cutoff=4)


def test_wannier_at_zero_time(bands):
    assert abs(lattice.wannier_overlap(bands, (0, 0), (0, 0), 0.0) - 1) < 1e-9
    for n, r in (((1, 0), (0, 0)), ((0, 0), (1, 0)), ((2, 1), (0, -1))):
        assert abs(lattice.wannier_overlap(bands, n, r, 0.0)) < 1e-9


def test_quadrature_refinement():
    depth = lattice.depth_from_recoils(50.0)
    coarse = lattice.solve_bands(depth, q_points=64)
    fine = lattice.solve_bands(depth, q_points=128)
    kick = lattice.uv_recoil()
    for t in (0.5, 2.0, 5.0):
        a = lattice.wannier_overlap(coarse, (0, 0), (0, 0), t, kick)
        b = lattice.wannier_overlap(fine, (0, 0), (0, 0), t, kick)
        assert abs(a - b) < 1e-6


def test_direct_integral_oracle(bands):
    # build Wannier and released functions on a real-space grid and integrate directly
    x = np.linspace(-30, 30, 6001)
    dx = x[1] - x[0]
    k = bands.qs[:, None] + bands.ms[None, :]
    t = 1.3
    waves = np.exp(2j * np.pi * np.einsum("qm,x->qmx", k, x))
    w0 = np.einsum("qm,qmx->x", bands.coeffs[:, :, 0], waves) / len(bands.qs)
    w1 = np.einsum("qm,qmx->x", bands.coeffs[:, :, 1], waves) / len(bands.qs)
    psi = np.einsum("qm,qmx->x", bands.coeffs[:, :, 0] * np.exp(-1j * k**2 * t), waves) / len(bands.qs)
    for n, w in ((0, w0), (1, w1)):
        direct = np.sum(w.conj() * psi) * dx
        ours = lattice.overlap_1d(bands, t, 0.0, 0, (0,))[n, 0]
        assert abs(direct - ours) < 1e-6


def test_recapture_basic(bands):
    kick = lattice.uv_recoil()
    assert lattice.recapture_probability(bands, 0.0) == pytest.approx(1, abs=1e-6)
    tu = lattice.time_unit()
    for t in (1e-6, 5e-6, 20e-6):
        p = lattice.recapture_probability(bands, t / tu, kick)
        assert 0 <= p <= 1


def test_short_time_quadratic():
    t = np.geomspace(1e-9, 1e-8, 10)
    curve = lattice.recapture_curve(50.0, t, with_recoil=False)
    assert lattice.short_time_exponent(t, curve.survival) == pytest.approx(2, abs=0.1)


def test_recoil_reduces_recapture(bands):
    kick = lattice.uv_recoil()
    tu = lattice.time_unit()
    for t in (0.5e-6, 2e-6, 8e-6, 25e-6):
        assert lattice.recapture_probability(bands, t / tu, kick) <= lattice.recapture_probability(bands, t / tu) + 1e-12


def test_unitarity(bands):
    kick = lattice.uv_recoil()
    tu = lattice.time_unit()
    # one full period of the site index (set by the q grid) is exact by Parseval
    for t in (1e-6, 10e-6):
        ov = lattice.overlap_1d(bands, t / tu, kick, 0, np.arange(-32, 32))
        assert (np.abs(ov) ** 2).sum() == pytest.approx(1, abs=1e-12)
    assert lattice.total_weight(bands, 1e-6 / tu, kick, radius=25) == pytest.approx(1, abs=1e-6)


def test_truncation_bound(bands):
    # weight beyond the truncation radius lives only in 1D bands above the barrier, which fly off
    kick = lattice.uv_recoil()
    tu = lattice.time_unit()
    top = int(np.sum(bands.mean_energy() < bands.depth)) - 1
    sites = np.arange(-32, 32)
    for t in (5e-6, 10e-6):
        w = np.abs(lattice.overlap_1d(bands, t / tu, kick, 0, sites)) ** 2
        far = np.abs(sites) > 15
        assert w[: top + 1, far].sum() < 1e-15
        untrapped = w[top + 1 :].sum()
        py = (np.abs(lattice.overlap_1d(bands, t / tu, 0.0, 0, sites)) ** 2)[:, np.abs(sites) <= 25].sum()
        assert 1 - lattice.total_weight(bands, t / tu, kick, radius=25) <= untrapped + (1 - py) + 1e-12


def test_mirror_sites_without_recoil(bands):
    # band n has Wannier parity (-1)^n and the released ground state stays even
    sites = (-3, -2, -1, 1, 2, 3)
    ov = lattice.overlap_1d(bands, 2.7, 0.0, 0, sites)
    sign = (-1.0) ** np.arange(bands.num_bands)
    np.testing.assert_allclose(ov[:, :3], sign[:, None] * ov[:, ::-1][:, :3], atol=1e-12)


def test_time_reversal_conjugates(bands):
    # odd-band Wannier states are purely imaginary in this gauge, hence the sign
    a = lattice.overlap_1d(bands, 2.7, 0.0, 0, (1,))[:, 0]
    k = bands.qs[:, None] + bands.ms[None, :]
    amp = np.einsum("qmn,qm->qn", bands.coeffs, bands.coeffs[:, :, 0] * np.exp(1j * k**2 * 2.7))
    back = np.einsum("qn,q->n", amp, np.exp(2j * np.pi * bands.qs)) / len(bands.qs)
    sign = (-1.0) ** np.arange(bands.num_bands)
    np.testing.assert_allclose(a.conj(), sign * back, atol=1e-12)


def test_mean_phonon(bands):
    kick = lattice.uv_recoil()
    tu = lattice.time_unit()
    assert lattice.mean_phonon(bands, 0.0, kick) == pytest.approx(0, abs=1e-9)
    n2 = lattice.mean_phonon(bands, 2e-6 / tu, kick)
    assert 0.05 <= n2 <= 0.2
    ts = np.array([0.2e-6, 0.4e-6])
    n = [lattice.mean_phonon(bands, t / tu, kick) for t in ts]
    assert n[1] / n[0] == pytest.approx(4, rel=0.1)


def test_thermal_average(bands):
    tu = lattice.time_unit()
    t = 3e-6 / tu
    ground = lattice.thermal_occupation(bands, 0.0)
    assert lattice.thermal_recapture(bands, ground, t) == pytest.approx(lattice.recapture_probability(bands, t))
    cold = lattice.thermal_occupation(bands, 5.0)
    hot = lattice.thermal_occupation(bands, 50.0)
    assert lattice.thermal_recapture(bands, hot, t) < lattice.thermal_recapture(bands, cold, t)
    with pytest.raises(lattice.LatticeError):
        lattice.thermal_recapture(bands, {(0, 0): 0.7}, t)


def test_trapped_band_rule(bands):
    e = bands.mean_energy()
    for i, j in lattice.trapped_bands(bands):
        assert e[i] + e[j] < 2 * bands.depth
    assert (0, 0) in lattice.trapped_bands(bands)


def test_gaussian_fit_recovers_tau():
    t = np.linspace(0, 20e-6, 41)
    assert lattice.gaussian_decay_time(t, np.exp(-((t / 9e-6) ** 2))) == pytest.approx(9e-6, rel=1e-6)
