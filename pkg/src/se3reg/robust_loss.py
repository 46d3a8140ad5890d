"""Robust losses, their IRLS weights and the Geman-McClure scale schedule."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

# Residuals are clamped to FLOOR_FACTOR * scene scale before weighting. Smaller
# floors let a few exactly-fitted pairs dominate the L1/2 normal equations.
FLOOR_FACTOR = 1e-9


class LossKind(enum.Enum):
    L_HALF = "l12"
    L1 = "l1"
    GEMAN_MCCLURE = "gm"


@dataclass(frozen=True)
class Loss:
    """A robust loss. ``mu`` (length^2) is only meaningful for Geman-McClure."""

    kind: LossKind
    mu: float | None = None

    def __post_init__(self):
        if self.kind is LossKind.GEMAN_MCCLURE:
            if self.mu is None or not self.mu > 0:
                raise ValueError("Geman-McClure needs a positive scale mu")

    @classmethod
    def l_half(cls) -> Loss:
        return cls(LossKind.L_HALF)

    @classmethod
    def l1(cls) -> Loss:
        return cls(LossKind.L1)

    @classmethod
    def geman_mcclure(cls, mu: float) -> Loss:
        return cls(LossKind.GEMAN_MCCLURE, float(mu))

    @classmethod
    def parse(cls, name: str, mu: float | None = None) -> Loss:
        """Build a loss from its CLI name (``l12``, ``l1`` or ``gm``)."""
        try:
            kind = LossKind(name.lower())
        except ValueError:
            raise ValueError(f"unknown loss {name!r}; expected l12, l1 or gm") from None
        return cls(kind, mu if kind is LossKind.GEMAN_MCCLURE else None)

    def with_mu(self, mu: float) -> Loss:
        return Loss(self.kind, mu)


def loss_value(loss: Loss, e):
    """rho(e) for a scalar or array of nonnegative residual norms."""
    e = np.abs(np.asarray(e, dtype=float))
    if loss.kind is LossKind.L_HALF:
        return np.sqrt(e)
    if loss.kind is LossKind.L1:
        return e
    e2 = e * e
    return loss.mu * e2 / (loss.mu + e2)


def influence(loss: Loss, e):
    """rho'(e)."""
    e = np.asarray(e, dtype=float)
    if loss.kind is LossKind.L_HALF:
        return 0.5 / np.sqrt(e)
    if loss.kind is LossKind.L1:
        return np.ones_like(e)
    mu = loss.mu
    return 2.0 * mu * mu * e / (mu + e * e) ** 2


def weight(loss: Loss, e, floor: float = FLOOR_FACTOR):
    """IRLS weight ``rho'(e) / e`` evaluated at ``max(e, floor)``."""
    if not floor > 0:
        raise ValueError("floor must be positive")
    e = np.maximum(np.asarray(e, dtype=float), floor)
    if loss.kind is LossKind.L_HALF:
        return 0.5 * e ** -1.5
    if loss.kind is LossKind.L1:
        return 1.0 / e
    mu = loss.mu
    return 2.0 * mu * mu / (mu + e * e) ** 2


@dataclass(frozen=True)
class AnnealSchedule:
    """Divide ``mu`` by ``divisor`` every ``period`` outer iterations."""

    mu0: float
    divisor: float = 2.0
    period: int = 4
    mu_floor: float = 0.0

    def __post_init__(self):
        if not self.mu0 > 0:
            raise ValueError("mu0 must be positive")
        if not self.divisor > 1:
            raise ValueError("divisor must exceed 1")
        if self.period < 1:
            raise ValueError("period must be a positive integer")
        if self.mu_floor < 0 or self.mu_floor > self.mu0:
            raise ValueError("mu_floor must lie in [0, mu0]")

    @classmethod
    def for_diameter(cls, diameter: float) -> AnnealSchedule:
        """Defaults: start at D^2, halve every 4 iterations, stop at (1e-4 D)^2."""
        return cls(mu0=diameter**2, divisor=2.0, period=4, mu_floor=(1e-4 * diameter) ** 2)


def anneal(schedule: AnnealSchedule, mu: float, outer_iter: int) -> float:
    if not mu > 0:
        raise ValueError("mu must be positive")
    if outer_iter > 0 and outer_iter % schedule.period == 0:
        mu = mu / schedule.divisor
    return max(mu, schedule.mu_floor)
