"""Distribution of the drive/detuning ratio eta = Omega / |V - Delta|.

Omega ~ U[0, Omega_max] and Delta ~ U[-Delta_max, Delta_max] are independent;
V is the nearest-neighbour interaction V(d) = C6 / d^6.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evolution import DELTA_MAX, OMEGA_MAX
from .hamiltonian import DEFAULT_C6
from .statistics import summarize


@dataclass(frozen=True)
class EtaModel:
    v: float
    omega_max: float = OMEGA_MAX
    delta_max: float = DELTA_MAX

    def __post_init__(self):
        if not self.v > 0:
            raise ValueError(f"interaction energy must be positive, got {self.v}")
        if not (self.omega_max > 0 and self.delta_max > 0):
            raise ValueError("omega_max and delta_max must be positive")

    @classmethod
    def at_distance(cls, d: float, c6: float = DEFAULT_C6, omega_max: float = OMEGA_MAX,
                    delta_max: float = DELTA_MAX) -> "EtaModel":
        return cls(c6 / d**6, omega_max, delta_max)

    @property
    def case(self) -> str:
        """'A' when V > Delta_max (Delta never reaches V), else 'B'."""
        return "A" if self.v > self.delta_max else "B"

    @property
    def eta_minus(self) -> float:
        return self.omega_max / (self.v + self.delta_max)

    @property
    def eta_plus(self) -> float:
        gap = abs(self.v - self.delta_max)
        return np.inf if gap == 0 else self.omega_max / gap

    @property
    def plateau(self) -> float:
        """Constant density on [0, eta_minus]."""
        om, dm, v = self.omega_max, self.delta_max, self.v
        if self.case == "A":
            return v / om
        return (dm * dm + v * v) / (2 * om * dm)

    @property
    def _offset(self) -> float:
        # signed constant in the middle branch: -((V-Dm)/Om)^2 (A) or +((Dm-V)/Om)^2 (B)
        c = ((self.v - self.delta_max) / self.omega_max) ** 2
        return -c if self.case == "A" else c


def eta_pdf(eta, model: EtaModel):
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < 0):
        raise ValueError("eta must be non-negative")
    om, dm = model.omega_max, model.delta_max
    em, ep = model.eta_minus, model.eta_plus
    out = np.zeros_like(eta)
    low = eta <= em
    mid = (eta > em) & (eta <= ep)
    out[low] = model.plateau
    with np.errstate(divide="ignore"):
        out[mid] = om / (4 * dm) * (1.0 / eta[mid] ** 2 + model._offset)
        if model.case == "B":
            high = eta > ep
            out[high] = om / (2 * dm) / eta[high] ** 2
    return out if out.ndim else float(out)


def eta_cdf(eta, model: EtaModel):
    """Closed-form antiderivative of :func:`eta_pdf`."""
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < 0):
        raise ValueError("eta must be non-negative")
    om, dm = model.omega_max, model.delta_max
    em, ep = model.eta_minus, model.eta_plus
    c = model._offset

    def middle(x):
        return model.plateau * em + om / (4 * dm) * ((1.0 / em - 1.0 / x) + c * (x - em))

    out = np.empty_like(eta)
    low = eta <= em
    out[low] = model.plateau * eta[low]
    mid = (eta > em) & (eta <= ep)
    out[mid] = middle(eta[mid])
    high = eta > ep
    if model.case == "A":
        out[high] = 1.0
    else:
        out[high] = middle(ep) + om / (2 * dm) * (1.0 / ep - 1.0 / eta[high])
    return out if out.ndim else float(out)


def sample_eta(rng: np.random.Generator, model: EtaModel, size: int) -> np.ndarray:
    omega = rng.uniform(0.0, model.omega_max, size)
    delta = rng.uniform(-model.delta_max, model.delta_max, size)
    return omega / np.abs(model.v - delta)


def characteristic_distance(c6: float = DEFAULT_C6, omega_max: float = OMEGA_MAX,
                            delta_max: float = DELTA_MAX) -> float:
    """Shortest spacing at which sampled pulses reach eta ~ 1, (C6 / (Om + Dm))^(1/6)."""
    if not (c6 > 0 and omega_max > 0 and delta_max > 0):
        raise ValueError("inputs must be positive")
    return (c6 / (omega_max + delta_max)) ** (1.0 / 6.0)


def blockade_diagnostic(nn_values) -> dict:
    """Median and central 68% band of <n_0 n_1> over one ensemble cell."""
    med, (lo, hi) = summarize(nn_values)
    return {"median": med, "p16": lo, "p84": hi, "n": int(np.size(nn_values))}


def eta_grid(model: EtaModel, eta_max: float = 3.0, n_points: int = 601):
    """(eta, pdf, cdf) arrays for plotting."""
    eta = np.linspace(0.0, eta_max, n_points)
    return eta, eta_pdf(eta, model), eta_cdf(eta, model)
