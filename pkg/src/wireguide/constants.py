"""Physical constants and unit conversions (SI throughout)."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class PhysicalConstants:
    mu0: float = 4.0e-7 * math.pi  # T m / A
    muB: float = 9.2740100783e-24  # J / T
    hbar: float = 1.054571817e-34  # J s
    kB: float = 1.380649e-23  # J / K
    g: float = 9.80665  # m / s^2

    def __post_init__(self):
        for name in ("mu0", "muB", "hbar", "kB", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"constant {name} must be positive")


CONSTANTS = PhysicalConstants()

# mu0 / (2 pi), kept as a literal so that wire fields are exact in binary
MU0_OVER_2PI = 2.0e-7

MU0 = CONSTANTS.mu0
MU_B = CONSTANTS.muB
HBAR = CONSTANTS.hbar
K_B = CONSTANTS.kB
G_EARTH = CONSTANTS.g

LI7_MASS = 1.165e-26  # kg

GAUSS = 1.0e-4  # T
MICRON = 1.0e-6  # m
MICROKELVIN = 1.0e-6  # K
MS = 1.0e-3  # s


def gauss_to_tesla(b):
    return b * GAUSS


def tesla_to_gauss(b):
    return b / GAUSS


def gradient_to_gauss_per_cm(grad):
    """Convert a field gradient in T/m to G/cm."""
    return grad / GAUSS / 100.0


def energy_to_microkelvin(e):
    return e / K_B / MICROKELVIN
