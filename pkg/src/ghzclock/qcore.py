"""State-vector mechanics for small clock-qubit registers.

Basis states are indexed little-endian: atom ``j`` is bit ``j`` of the
integer index, so ``|b_{N-1} ... b_1 b_0>`` has index ``sum_j b_j 2**j``.
The Pauli-Z convention is ``sigma_z |1> = +|1>`` (the clock state is "up"),
which makes the parity operator ``prod_j sigma_z^j = (-1)**(N - n)`` and a
global rotation ``Z(theta)`` multiply a state with ``n`` excitations by
``exp(i theta (N - 2n) / 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

NORM_TOL = 1e-10


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleState:
    """Pure state of an ``N``-atom register over the computational basis.

    ``norm_deficit`` carries probability that has left the computational
    space (traced-out leakage), so ``|amplitudes|^2 + norm_deficit == 1``.
    """

    num_atoms: int
    amplitudes: np.ndarray = field(repr=False)
    norm_deficit: float = 0.0

    def __post_init__(self):
        if self.num_atoms < 1:
            raise StateError("an ensemble needs at least one atom")
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (2**self.num_atoms,):
            raise StateError(f"expected {2**self.num_atoms} amplitudes, got {amps.shape}")
        total = float(np.vdot(amps, amps).real) + self.norm_deficit
        if abs(total - 1.0) > NORM_TOL:
            raise StateError(f"state not normalized: |psi|^2 + deficit = {total!r}")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def ground(cls, num_atoms: int) -> EnsembleState:
        amps = np.zeros(2**num_atoms, dtype=complex)
        amps[0] = 1.0
        return cls(num_atoms, amps)

    @classmethod
    def basis(cls, num_atoms: int, index: int) -> EnsembleState:
        amps = np.zeros(2**num_atoms, dtype=complex)
        amps[index] = 1.0
        return cls(num_atoms, amps)

    @classmethod
    def ghz(cls, num_atoms: int, relative_phase: float = 0.0) -> EnsembleState:
        amps = np.zeros(2**num_atoms, dtype=complex)
        amps[0] = 1 / np.sqrt(2)
        amps[-1] = np.exp(1j * relative_phase) / np.sqrt(2)
        return cls(num_atoms, amps)

    def with_amplitudes(self, amps: np.ndarray) -> EnsembleState:
        return EnsembleState(self.num_atoms, amps, self.norm_deficit)

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.vdot(self.amplitudes, self.amplitudes).real))


Mixture = Sequence[tuple[float, EnsembleState]]
StateLike = Union[EnsembleState, Mixture]


def excitation_counts(num_atoms: int) -> np.ndarray:
    """Number of atoms in ``|1>`` for every basis index."""
    idx = np.arange(2**num_atoms)
    counts = np.zeros_like(idx)
    for j in range(num_atoms):
        counts += (idx >> j) & 1
    return counts


def apply_local_matrix(amps: np.ndarray, num_atoms: int, mat: np.ndarray, dim: int = 2) -> np.ndarray:
    """Apply the same ``dim x dim`` matrix to every atom of a product-basis vector.

    Works for any local dimension with little-endian digit ordering, so the
    three-level simulator shares it.
    """
    psi = np.asarray(amps, dtype=complex).reshape((dim,) * num_atoms)
    for axis in range(num_atoms):
        psi = np.moveaxis(np.tensordot(mat, psi, axes=([1], [axis])), 0, axis)
    return psi.reshape(-1)


def rx_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]])


def z_phases(num_atoms: int, theta: float) -> np.ndarray:
    n = excitation_counts(num_atoms)
    return np.exp(0.5j * theta * (num_atoms - 2 * n))


def apply_global_x(state: EnsembleState, theta: float) -> EnsembleState:
    """Rotate every atom by ``exp(-i theta sigma_x / 2)``."""
    return state.with_amplitudes(apply_local_matrix(state.amplitudes, state.num_atoms, rx_matrix(theta)))


def apply_global_z(state: EnsembleState, theta: float) -> EnsembleState:
    """Rotate every atom by ``exp(-i theta sigma_z / 2)``."""
    return state.with_amplitudes(state.amplitudes * z_phases(state.num_atoms, theta))


def collective_gate_phases(num_atoms: int) -> np.ndarray:
    """Diagonal of ``exp(i pi n^2 / 2)``."""
    n = excitation_counts(num_atoms)
    # n^2 mod 4 keeps the exponent exact for large n
    return np.exp(0.5j * np.pi * ((n * n) % 4))


def apply_collective_gate(state: EnsembleState) -> EnsembleState:
    return state.with_amplitudes(state.amplitudes * collective_gate_phases(state.num_atoms))


def parity_diagonal(num_atoms: int) -> np.ndarray:
    """Eigenvalues of ``prod_j sigma_z^j``: +1 for even ``N - n``."""
    n = excitation_counts(num_atoms)
    return np.where((num_atoms - n) % 2 == 0, 1.0, -1.0)


def collective_gate_from_parity(num_atoms: int) -> np.ndarray:
    """Diagonal of ``(1+i)/2 I + (1-i)/2 (-1)^N P_z``."""
    sign = (-1.0) ** num_atoms
    return (1 + 1j) / 2 + (1 - 1j) / 2 * sign * parity_diagonal(num_atoms)


def _check_pairs(num_atoms: int, pairs: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    seen = set()
    out = []
    for a, b in pairs:
        a, b = int(a), int(b)
        if a == b or not (0 <= a < num_atoms and 0 <= b < num_atoms):
            raise StateError(f"invalid CZ pair ({a}, {b}) for {num_atoms} atoms")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise StateError(f"duplicate CZ pair {key}")
        seen.add(key)
        out.append(key)
    return out


def apply_pairwise_cz(state: EnsembleState, pairs: Iterable[tuple[int, int]]) -> EnsembleState:
    """Apply ``exp(i pi n_a n_b)`` for every listed pair."""
    pairs = _check_pairs(state.num_atoms, pairs)
    idx = np.arange(2**state.num_atoms)
    sign = np.ones(idx.shape)
    for a, b in pairs:
        both = ((idx >> a) & 1) & ((idx >> b) & 1)
        sign = np.where(both == 1, -sign, sign)
    return state.with_amplitudes(state.amplitudes * sign)


def all_pairs(num_atoms: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(num_atoms) for b in range(a + 1, num_atoms)]


def collective_gate_via_cz(state: EnsembleState) -> EnsembleState:
    """``e^{i N pi/4} Z(-pi/2) prod_{j<k} CZ_{jk}``; equals :func:`apply_collective_gate`."""
    out = apply_global_z(apply_pairwise_cz(state, all_pairs(state.num_atoms)), -np.pi / 2)
    return out.with_amplitudes(out.amplitudes * np.exp(1j * state.num_atoms * np.pi / 4))


def ghz_phase_correction(num_atoms: int) -> float:
    """Z angle that maps the circuit output onto ``(|0..0> + |1..1>)/sqrt(2)``."""
    return -(num_atoms - 1) * np.pi / (2 * num_atoms)


def prepare_ghz(num_atoms: int, alpha_c: float = 0.0, correct_phase: bool = False) -> EnsembleState:
    """Run ``X(pi/2) Z(alpha_c) U X(pi/2)`` on ``|0>^N``.

    ``alpha_c = 0`` is the exact calibration for the ideal gate. With
    ``correct_phase`` the relative phase ``(-i)^(N-1)`` is removed by a final
    Z rotation.
    """
    psi = apply_global_x(EnsembleState.ground(num_atoms), np.pi / 2)
    psi = apply_global_z(apply_collective_gate(psi), alpha_c)
    psi = apply_global_x(psi, np.pi / 2)
    if correct_phase:
        psi = apply_global_z(psi, ghz_phase_correction(num_atoms))
    return psi


def analysis_rotation(state: EnsembleState, phi_c: float) -> EnsembleState:
    """Parity readout rotation ``X(pi/2) Z(phi_c)``."""
    return apply_global_x(apply_global_z(state, phi_c), np.pi / 2)


def _as_mixture(state_or_mixture: StateLike) -> list[tuple[float, EnsembleState]]:
    if isinstance(state_or_mixture, EnsembleState):
        return [(1.0, state_or_mixture)]
    members = [(float(w), s) for w, s in state_or_mixture]
    if not members:
        raise StateError("empty mixture")
    if any(w < 0 for w, _ in members):
        raise StateError("negative mixture weight")
    return members


def ghz_fidelity(state_or_mixture: StateLike) -> float:
    """Maximal overlap with the GHZ state under a global Z rotation.

    For a mixture with all-0 / all-1 amplitudes ``a_i``, ``b_i`` the
    maximization is analytic: ``(sum w|a|^2 + sum w|b|^2)/2 + |sum w a* b|``.
    """
    members = _as_mixture(state_or_mixture)
    total_w = sum(w for w, _ in members)
    pop = 0.0
    coh = 0.0j
    for w, s in members:
        norm2 = s.norm**2 + s.norm_deficit
        if abs(norm2 - 1.0) > NORM_TOL:
            raise StateError("unnormalized state in fidelity")
        a, b = s.amplitudes[0], s.amplitudes[-1]
        pop += w * (abs(a) ** 2 + abs(b) ** 2)
        coh += w * np.conj(a) * b
    if abs(total_w - 1.0) > NORM_TOL:
        raise StateError(f"mixture weights sum to {total_w}")
    return float(min(1.0, max(0.0, 0.5 * pop + abs(coh))))


def parity_expectation(state_or_mixture: StateLike) -> float:
    members = _as_mixture(state_or_mixture)
    value = 0.0
    for w, s in members:
        probs = np.abs(s.amplitudes) ** 2
        value += w * float(np.dot(probs, parity_diagonal(s.num_atoms)))
    return value


def ghz_populations(state: EnsembleState) -> float:
    """``p_0 + p_N``: probability of all atoms in ``|0>`` or all in ``|1>``."""
    return float(abs(state.amplitudes[0]) ** 2 + abs(state.amplitudes[-1]) ** 2)


def excitation_distribution(state: EnsembleState) -> np.ndarray:
    """Probability ``p_n`` of observing ``n`` atoms in ``|1>``."""
    probs = np.abs(state.amplitudes) ** 2
    return np.bincount(excitation_counts(state.num_atoms), weights=probs, minlength=state.num_atoms + 1)
