"""Physical constants and species data (SI units)."""
from scipy import constants as _sc

C = _sc.c
HBAR = _sc.hbar
KB = _sc.k
MU0 = _sc.mu_0
MU_B = _sc.physical_constants["Bohr magneton"][0]
G_EARTH = _sc.g

GAUSS = 1e-4  # T

# 87Rb
RB87_MASS = 1.443160648e-25  # kg
RB87_D2_WAVELENGTH = 780.241209686e-9  # m
RB87_D2_GAMMA = 2 * _sc.pi * 6.0666e6  # rad/s, FWHM
RB87_ISAT_CYCLING = 16.6933  # W/m^2, sigma+ (2,2)->(3',3')
