"""Physical constants (CODATA 2018 via scipy.constants)."""
from dataclasses import dataclass

import numpy as np
from scipy import constants as _sc

BE9_MASS_U = 9.0121831


@dataclass(frozen=True)
class PhysicalConstants:
    elementary_charge: float = _sc.e
    hbar: float = _sc.hbar
    vacuum_permittivity: float = _sc.epsilon_0
    ion_mass: float = BE9_MASS_U * _sc.atomic_mass

    def __post_init__(self):
        for name in ("elementary_charge", "hbar", "vacuum_permittivity", "ion_mass"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @classmethod
    def for_mass_u(cls, mass_u):
        return cls(ion_mass=float(mass_u) * _sc.atomic_mass)

    @property
    def q_over_m(self):
        return self.elementary_charge / self.ion_mass

    @property
    def coulomb_k(self):
        """k_e = 1/(4 pi eps0)."""
        return 1.0 / (4.0 * np.pi * self.vacuum_permittivity)

    def length_scale(self, omega):
        """Inverse of the alpha normalisation, sqrt(2 hbar / (m omega))."""
        return np.sqrt(2.0 * self.hbar / (self.ion_mass * omega))

    def alpha_scale(self, omega):
        """sqrt(m omega / 2 hbar), converts metres to coherent amplitude."""
        return np.sqrt(self.ion_mass * omega / (2.0 * self.hbar))


DEFAULT_CONSTANTS = PhysicalConstants()
