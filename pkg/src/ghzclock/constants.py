"""Physical constants and reference parameters for the Sr-88 clock-qubit array."""

import math

TWO_PI = 2.0 * math.pi

#: Sr-88 1S0 - 3P0 clock transition frequency [Hz]
NU0_SR88 = 429_228_066_418_012.0

#: lattice spacing of the square array [m]
A_LAT = 575e-9

#: van der Waals coefficient for the 47s 3S1 state [rad/s * m^6]
C6 = TWO_PI * 10.4e9 * 1e-36

#: default Rydberg Rabi frequency [rad/s]
OMEGA_R = TWO_PI * 4e6

#: phase update interval of the waveform generator [s]
DT_AWG = 6.5e-9

#: envelope rise time of the Rydberg beam [s]
TAU_RISE = 15e-9

#: Rydberg decay to detection-dark states [s]
TAU_RYD_DARK = 51e-6
#: Rydberg decay to detection-bright states [s]
TAU_RYD_BRIGHT = 86e-6

#: lattice Raman scattering rates [1/s]
RAMAN_1_TO_0 = 0.48
RAMAN_1_TO_2 = 0.26
RAMAN_2_TO_0 = 0.47

#: shot-to-shot Rydberg drive fluctuations
SIGMA_OMEGA_FRAC = 0.0055
SIGMA_DELTA = TWO_PI * 49e3

#: lattice wavelength [m] and UV Rydberg wavelength [m]
LAMBDA_LATTICE = 813.4275e-9
LAMBDA_UV = 317e-9

#: single-photon recoil energy of the lattice light, E_r / h [Hz]
E_RECOIL_HZ = 3.4e3

#: CSS single-atom coherence time (Gaussian 1/e) [s]
T1_CSS = 0.327


def gamma_rydberg(tau_dark: float = TAU_RYD_DARK, tau_bright: float = TAU_RYD_BRIGHT) -> float:
    """Total Rydberg decay rate [1/s] from the dark and bright lifetimes."""
    return 1.0 / tau_dark + 1.0 / tau_bright
