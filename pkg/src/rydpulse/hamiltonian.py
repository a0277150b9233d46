"""Van der Waals Ising drift plus global drive, in sector and full bases.

Units: energies and drive amplitudes are angular frequencies in rad/µs,
lengths in µm, times in µs (hbar = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RingGeometry, SectorBasis

DEFAULT_C6 = 5_420_503.0  # rad µs^-1 µm^6


@dataclass(frozen=True)
class PhysicalParams:
    geometry: RingGeometry
    c6: float = DEFAULT_C6

    def __post_init__(self):
        if not self.c6 > 0:
            raise ValueError(f"c6 must be positive, got {self.c6}")

    @property
    def v_nn(self) -> float:
        """Nearest-neighbour interaction V(d) = C6 / d^6."""
        return self.c6 / self.geometry.spacing**6

    def couplings(self) -> np.ndarray:
        """Pair couplings V(d) (r_ij / d)^-6, zero on the diagonal."""
        r = self.geometry.distances / self.geometry.spacing
        with np.errstate(divide="ignore"):
            j = self.v_nn * r**-6.0
        np.fill_diagonal(j, 0.0)
        return j


@dataclass(frozen=True)
class DriveAmplitudes:
    rabi: float
    detuning: float

    def __post_init__(self):
        if self.rabi < 0:
            raise ValueError(f"Rabi frequency must be non-negative, got {self.rabi}")


@dataclass(frozen=True)
class SectorOperators:
    """Collective operators restricted to the trivial sector.

    ``jx`` is real symmetric in the orbit basis, so every assembled
    Hamiltonian is real symmetric.
    """

    h0_diag: np.ndarray
    n_diag: np.ndarray
    jx: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.h0_diag)


def occupations(bitstrings, n_atoms: int) -> np.ndarray:
    """Site occupations, shape ``(len(bitstrings), N)``, site i from bit N-1-i."""
    b = np.asarray(bitstrings, dtype=np.int64)
    shifts = n_atoms - 1 - np.arange(n_atoms)
    return ((b[..., None] >> shifts) & 1).astype(float)


def interaction_energy(bitstring, params: PhysicalParams) -> float | np.ndarray:
    """Eigenvalue of H0 on computational basis state(s) ``bitstring``."""
    occ = occupations(bitstring, params.geometry.n_atoms)
    j = params.couplings()
    # sum_{i<j} J_ij n_i n_j
    return 0.5 * np.einsum("...i,ij,...j->...", occ, j, occ)


def build_sector_operators(basis: SectorBasis, params: PhysicalParams) -> SectorOperators:
    n = basis.n_atoms
    if params.geometry.n_atoms != n:
        raise ValueError(f"basis has N={n} but geometry has N={params.geometry.n_atoms}")
    reps = basis.representatives
    h0 = np.asarray(interaction_energy(reps, params), dtype=float)
    n_diag = basis.popcounts().astype(float)

    # J_x|o> in orbit basis: each representative's N single flips, counted
    # per target orbit and reweighted by sqrt(size_o / size_o').
    sizes = basis.orbit_sizes.astype(float)
    jx = np.zeros((basis.dim, basis.dim))
    for o, rep in enumerate(reps):
        for i in range(n):
            target = basis.orbit_index[int(rep) ^ (1 << i)]
            jx[target, o] += 0.5 * np.sqrt(sizes[o] / sizes[target])
    # both triangles agree to rounding; mirror the lower one so H is exactly symmetric
    jx = np.tril(jx) + np.tril(jx, -1).T
    h0.setflags(write=False)
    n_diag.setflags(write=False)
    jx.setflags(write=False)
    return SectorOperators(h0, n_diag, jx)


def assemble(drive: DriveAmplitudes, ops: SectorOperators) -> np.ndarray:
    """H = H0 + Omega J_x - Delta N as a dense real symmetric matrix."""
    h = drive.rabi * ops.jx
    h[np.diag_indices_from(h)] += ops.h0_diag - drive.detuning * ops.n_diag
    return h


def assemble_batch(rabi: np.ndarray, detuning: np.ndarray, ops: SectorOperators) -> np.ndarray:
    """Stack of Hamiltonians for arrays of drive amplitudes (same shape)."""
    rabi = np.asarray(rabi, dtype=float)
    detuning = np.asarray(detuning, dtype=float)
    h = rabi[..., None, None] * ops.jx
    diag = ops.h0_diag - detuning[..., None] * ops.n_diag
    idx = np.arange(ops.dim)
    h[..., idx, idx] += diag
    return h


# --- full-space reference operators (small N oracle) -----------------------


def full_operators(params: PhysicalParams):
    """Dense (h0_diag, n_diag, jx) over all 2^N bitstrings."""
    n = params.geometry.n_atoms
    states = np.arange(1 << n)
    h0 = np.asarray(interaction_energy(states, params), dtype=float)
    n_diag = occupations(states, n).sum(axis=1)
    jx = np.zeros((1 << n, 1 << n))
    for i in range(n):
        jx[states ^ (1 << i), states] += 0.5
    return SectorOperators(h0, n_diag, jx)


# --- observables -----------------------------------------------------------


def nn_correlation(state: np.ndarray, n_atoms: int, site: int = 0) -> float:
    """<n_i n_{i+1}> of a full-basis state (default i = 0)."""
    p = np.abs(np.asarray(state)) ** 2
    occ = occupations(np.arange(len(p)), n_atoms)
    j = (site + 1) % n_atoms
    return float(p @ (occ[:, site] * occ[:, j]))


def mean_excitation(state: np.ndarray, n_atoms: int) -> float:
    """<N> / N of a full-basis state."""
    p = np.abs(np.asarray(state)) ** 2
    counts = occupations(np.arange(len(p)), n_atoms).sum(axis=1)
    return float(p @ counts) / n_atoms


def sector_observables(basis: SectorBasis):
    """Diagonal sector weights for ``<n_0 n_1>`` and ``<N>/N``.

    Both operators are diagonal; on sector states their expectation is
    ``sum_o |c_o|^2 * w_o`` with ``w_o`` the orbit average of the observable.
    Translation averaging makes <n_0 n_1> equal to the orbit mean of the
    nearest-neighbour pair density.
    """
    n = basis.n_atoms
    occ = occupations(np.arange(basis.full_dim), n)
    pair = (occ * np.roll(occ, -1, axis=1)).mean(axis=1)
    dens = occ.mean(axis=1)
    sizes = basis.orbit_sizes
    w_pair = np.bincount(basis.orbit_index, weights=pair) / sizes
    w_dens = np.bincount(basis.orbit_index, weights=dens) / sizes
    return w_pair, w_dens
