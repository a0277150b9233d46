"""Ring geometry, dihedral symmetry sector and sector <-> full basis maps.

Bitstring convention: site ``i`` is stored in bit ``N - 1 - i`` of the integer
label, so the binary representation read left to right lists sites
``0, 1, ..., N-1``. With this convention the lexicographic order of bitstrings
coincides with integer order, and ``amplitudes.reshape((2,) * N)`` puts site
``i`` on axis ``i``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_FULL_SITES = 20


@dataclass(frozen=True)
class RingGeometry:
    """Regular N-gon of atoms with nearest-neighbour spacing ``spacing`` (µm)."""

    n_atoms: int
    spacing: float
    distances: np.ndarray = field(repr=False)

    def ring_distance(self, i: int, j: int) -> int:
        k = abs(i - j) % self.n_atoms
        return min(k, self.n_atoms - k)


def build_ring(n_atoms: int, spacing: float) -> RingGeometry:
    """Build a ring of ``n_atoms`` atoms with chord distances of a regular polygon.

    ``distances[i, j] = spacing * sin(pi k / N) / sin(pi / N)`` with ``k`` the
    ring distance between sites, so ``distances[0, 1] == spacing`` exactly.
    """
    if int(n_atoms) != n_atoms or n_atoms < 3:
        raise ValueError(f"a ring needs at least 3 atoms, got {n_atoms}")
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    n = int(n_atoms)
    idx = np.arange(n)
    k = np.abs(idx[:, None] - idx[None, :])
    k = np.minimum(k, n - k)
    chord = np.sin(np.pi * k / n) / np.sin(np.pi / n)
    dist = spacing * chord
    dist[k == 1] = spacing
    dist[k == 0] = 0.0
    dist.setflags(write=False)
    return RingGeometry(n, float(spacing), dist)


# --- dihedral group action on integer bitstrings ---------------------------


def _rotate(x: np.ndarray, shift: int, n: int) -> np.ndarray:
    """Translate every configuration by ``shift`` sites (site i -> i + shift)."""
    shift %= n
    if shift == 0:
        return x.copy()
    mask = (1 << n) - 1
    # site i lives in bit n-1-i, so moving sites forward is a right rotation
    return ((x >> shift) | (x << (n - shift))) & mask


def _reflect(x: np.ndarray, n: int) -> np.ndarray:
    """Apply the reflection i -> -i (mod N)."""
    out = np.zeros_like(x)
    for i in range(n):
        bit = (x >> (n - 1 - i)) & 1
        j = (-i) % n
        out |= bit << (n - 1 - j)
    return out


def group_images(x: np.ndarray, n: int) -> np.ndarray:
    """Return the 2N images of ``x`` under D_N, shape ``(2N,) + x.shape``.

    Row ``k`` (``k < N``) is the translation by ``k``; row ``N + k`` is the
    reflection followed by translation by ``k``.
    """
    x = np.asarray(x, dtype=np.int64)
    refl = _reflect(x, n)
    rows = [_rotate(x, k, n) for k in range(n)] + [_rotate(refl, k, n) for k in range(n)]
    return np.stack(rows)


def site_permutations(n: int) -> np.ndarray:
    """Site maps of the 2N elements of D_N, in the order used by :func:`group_images`."""
    idx = np.arange(n)
    perms = [(idx + k) % n for k in range(n)]
    perms += [(-idx + k) % n for k in range(n)]
    return np.array(perms)


@dataclass(frozen=True)
class SectorBasis:
    """Orbit basis of the trivial irrep of the dihedral group D_N.

    Basis vector ``o`` is the normalised uniform superposition of the
    bitstrings in orbit ``o``. Orbits are ordered by their canonical
    representative (the smallest bitstring in the orbit).
    """

    n_atoms: int
    representatives: np.ndarray
    orbit_sizes: np.ndarray
    orbit_index: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.representatives)

    @property
    def full_dim(self) -> int:
        return 1 << self.n_atoms

    def index_of(self, bitstring: int) -> int:
        return int(self.orbit_index[bitstring])

    def popcounts(self) -> np.ndarray:
        return np.array([bin(int(r)).count("1") for r in self.representatives])

    def to_json(self) -> dict:
        return {
            "n_atoms": self.n_atoms,
            "representatives": [int(r) for r in self.representatives],
            "orbit_sizes": [int(s) for s in self.orbit_sizes],
        }

    def save(self, directory) -> Path:
        path = Path(directory) / f"sector_N{self.n_atoms}.json"
        path.write_text(json.dumps(self.to_json()))
        return path

    @classmethod
    def from_json(cls, doc: dict) -> "SectorBasis":
        n = int(doc["n_atoms"])
        reps = np.array(doc["representatives"], dtype=np.int64)
        sizes = np.array(doc["orbit_sizes"], dtype=np.int64)
        canon = group_images(np.arange(1 << n, dtype=np.int64), n).min(axis=0)
        index = np.searchsorted(reps, canon)
        if not np.array_equal(reps[index], canon):
            raise ValueError("representatives are not the canonical orbit minima")
        if sizes.sum() != 1 << n or not np.array_equal(np.bincount(index), sizes):
            raise ValueError("orbit sizes inconsistent with representatives")
        return cls(n, reps, sizes, index)

    @classmethod
    def load(cls, path) -> "SectorBasis":
        return cls.from_json(json.loads(Path(path).read_text()))


_SECTOR_CACHE: dict[int, SectorBasis] = {}


def dihedral_orbits(n_atoms: int) -> SectorBasis:
    """Enumerate the D_N orbits of all 2^N bitstrings."""
    if n_atoms < 3:
        raise ValueError(f"need n_atoms >= 3, got {n_atoms}")
    if n_atoms > MAX_FULL_SITES:
        raise ValueError(f"full-space enumeration is capped at N={MAX_FULL_SITES}")
    if n_atoms in _SECTOR_CACHE:
        return _SECTOR_CACHE[n_atoms]
    n = n_atoms
    states = np.arange(1 << n, dtype=np.int64)
    canon = states.copy()
    refl = _reflect(states, n)
    for k in range(n):
        np.minimum(canon, _rotate(states, k, n), out=canon)
        np.minimum(canon, _rotate(refl, k, n), out=canon)
    reps, index, sizes = np.unique(canon, return_inverse=True, return_counts=True)
    for arr in (reps, index, sizes):
        arr.setflags(write=False)
    basis = SectorBasis(n, reps, sizes, index)
    _SECTOR_CACHE[n] = basis
    return basis


def burnside_count(n: int) -> int:
    """Number of binary bracelets of length n, from fixed-point counting."""
    images = group_images(np.arange(1 << n, dtype=np.int64), n)
    fixed = (images == np.arange(1 << n)[None, :]).sum()
    return int(fixed) // (2 * n)


# --- change of representation ----------------------------------------------


def embed(state: np.ndarray, basis: SectorBasis) -> np.ndarray:
    """Map sector amplitudes to the full 2^N computational basis (isometry)."""
    state = np.asarray(state)
    if state.shape[-1] != basis.dim:
        raise ValueError(f"sector state has length {state.shape[-1]}, basis dim is {basis.dim}")
    scaled = state / np.sqrt(basis.orbit_sizes)
    return scaled[..., basis.orbit_index]


def project(state: np.ndarray, basis: SectorBasis) -> np.ndarray:
    """Project a full-basis state onto the trivial sector (not renormalised)."""
    state = np.asarray(state)
    if state.shape[-1] != basis.full_dim:
        raise ValueError(f"full state has length {state.shape[-1]}, expected {basis.full_dim}")
    flat = state.reshape(-1, basis.full_dim)
    out = np.zeros((flat.shape[0], basis.dim), dtype=np.result_type(state, np.float64))
    for row, src in zip(out, flat):
        np.add.at(row, basis.orbit_index, src)
    out /= np.sqrt(basis.orbit_sizes)
    return out.reshape(state.shape[:-1] + (basis.dim,))


def basis_state(basis: SectorBasis, bitstring: int = 0) -> np.ndarray:
    psi = np.zeros(basis.dim, dtype=complex)
    psi[basis.index_of(bitstring)] = 1.0
    return psi


def haar_sector(rng: np.random.Generator, basis: SectorBasis, size: int | None = None) -> np.ndarray:
    """Draw Haar-random states of the trivial sector.

    Real and imaginary parts are i.i.d. N(0, 1/2) before normalisation. With
    ``size`` given, returns a ``(size, dim)`` array.
    """
    shape = (basis.dim,) if size is None else (size, basis.dim)
    return haar_vectors(rng, shape)


def haar_full(rng: np.random.Generator, n_atoms: int, size: int | None = None) -> np.ndarray:
    shape = (1 << n_atoms,) if size is None else (size, 1 << n_atoms)
    return haar_vectors(rng, shape)


def haar_vectors(rng: np.random.Generator, shape) -> np.ndarray:
    scale = np.sqrt(0.5)
    z = rng.normal(0.0, scale, shape) + 1j * rng.normal(0.0, scale, shape)
    return z / np.linalg.norm(z, axis=-1, keepdims=True)
