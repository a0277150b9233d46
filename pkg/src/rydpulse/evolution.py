"""Random pulse sequences and exact piecewise-constant propagation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import SectorBasis, basis_state
from .hamiltonian import DriveAmplitudes, SectorOperators, assemble, assemble_batch

OMEGA_MAX = 12.0  # rad/µs
DELTA_MAX = 20.0  # rad/µs
M_SEGMENTS = 30


@dataclass(frozen=True)
class PulseConstraints:
    omega_max: float = OMEGA_MAX
    delta_max: float = DELTA_MAX
    m_segments: int = M_SEGMENTS
    t_final: float = 1.0

    def __post_init__(self):
        for name in ("omega_max", "delta_max", "m_segments", "t_final"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PulseSequence:
    """Piecewise-constant controls: durations (µs), Rabi and detuning (rad/µs)."""

    dt: np.ndarray
    rabi: np.ndarray
    detuning: np.ndarray

    def __post_init__(self):
        dt, rabi, det = (np.asarray(a, dtype=float) for a in (self.dt, self.rabi, self.detuning))
        if not (dt.ndim == rabi.ndim == det.ndim == 1) or not (len(dt) == len(rabi) == len(det)):
            raise ValueError("dt, rabi and detuning must be 1-D arrays of equal length")
        if len(dt) < 1:
            raise ValueError("a pulse sequence needs at least one segment")
        if np.any(dt <= 0):
            raise ValueError("segment durations must be positive")
        if np.any(rabi < 0):
            raise ValueError("Rabi amplitudes must be non-negative")
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "rabi", rabi)
        object.__setattr__(self, "detuning", det)

    @property
    def m_segments(self) -> int:
        return len(self.dt)

    @property
    def total_time(self) -> float:
        return float(np.sum(self.dt))

    def segments(self):
        return zip(self.dt, self.rabi, self.detuning)

    def to_json(self) -> dict:
        return {
            "segments": [
                {"dt_us": float(t), "omega": float(o), "delta": float(d)} for t, o, d in self.segments()
            ]
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PulseSequence":
        segs = doc["segments"]
        return cls(
            np.array([s["dt_us"] for s in segs]),
            np.array([s["omega"] for s in segs]),
            np.array([s["delta"] for s in segs]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "PulseSequence":
        return cls.from_json(json.loads(Path(path).read_text()))


def sample_random_pulses(rng: np.random.Generator, constraints: PulseConstraints) -> PulseSequence:
    """Equal durations T_f / M, Omega ~ U[0, Omega_max], Delta ~ U[-Delta_max, Delta_max]."""
    m = constraints.m_segments
    rabi = rng.uniform(0.0, constraints.omega_max, m)
    det = rng.uniform(-constraints.delta_max, constraints.delta_max, m)
    return PulseSequence(np.full(m, constraints.t_final / m), rabi, det)


def sample_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent stream for one work unit, keyed by (master_seed, *key)."""
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key)))


def default_initial(basis: SectorBasis) -> np.ndarray:
    """All atoms in the ground state: unit amplitude on the all-down orbit."""
    return basis_state(basis, 0)


def propagator(h: np.ndarray, dt: float) -> np.ndarray:
    """exp(-i dt H) for real symmetric / Hermitian ``h`` via eigendecomposition."""
    lam, vec = np.linalg.eigh(h)
    return (vec * np.exp(-1j * dt * lam)) @ vec.conj().T


def segment_propagate(state: np.ndarray, drive: DriveAmplitudes, dt: float, ops: SectorOperators) -> np.ndarray:
    if not dt > 0:
        raise ValueError(f"segment duration must be positive, got {dt}")
    lam, vec = np.linalg.eigh(assemble(drive, ops))
    return vec @ (np.exp(-1j * dt * lam) * (vec.T @ state))


def evolve(initial: np.ndarray, seq: PulseSequence, ops: SectorOperators) -> np.ndarray:
    """Apply the segments of ``seq`` in time order."""
    psi = np.asarray(initial, dtype=complex)
    for dt, rabi, det in seq.segments():
        psi = segment_propagate(psi, DriveAmplitudes(rabi, det), dt, ops)
    return psi


def evolve_batch(initial: np.ndarray, dt: np.ndarray, rabi: np.ndarray, detuning: np.ndarray,
                 ops: SectorOperators) -> np.ndarray:
    """Evolve a batch of pulse sequences, each array of shape ``(batch, M)``.

    ``initial`` is either a single state or one state per batch member.
    Every member goes through the same per-matrix LAPACK call as in
    :func:`evolve`, so results do not depend on how samples are batched.
    """
    dt = np.atleast_2d(dt)
    rabi = np.atleast_2d(rabi)
    detuning = np.atleast_2d(detuning)
    batch, m = dt.shape
    psi = np.broadcast_to(np.asarray(initial, dtype=complex), (batch, ops.dim)).copy()
    for k in range(m):
        lam, vec = np.linalg.eigh(assemble_batch(rabi[:, k], detuning[:, k], ops))
        coef = np.einsum("bji,bj->bi", vec, psi)
        coef *= np.exp(-1j * dt[:, k, None] * lam)
        psi = np.einsum("bij,bj->bi", vec, coef)
    return psi
