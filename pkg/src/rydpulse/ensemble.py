"""Generation and analysis of state ensembles (random-pulse or Haar-sector).

Every sample owns an RNG stream keyed by ``(master_seed, stream, cell, sample_id)``,
so results do not depend on batching, worker count or resume points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .evolution import PulseConstraints, default_initial, evolve_batch, sample_random_pulses, sample_rng
from .geometry import SectorBasis, embed, haar_sector
from .hamiltonian import SectorOperators, sector_observables
from .statistics import (
    SCHMIDT_FLOOR,
    Bipartition,
    Histogram,
    coefficient_matrix,
    entropy_from_schmidt,
    find_asymmetric_bipartition,
    gap_ratios,
    js_divergence,
    porter_thomas_masses,
    s_max,
    summarize,
    wigner_dyson_pdf,
)

PULSE_STREAM = 0
HAAR_STREAM = 1


@dataclass(frozen=True)
class AnalysisOptions:
    entropy_bins: int = 50
    omega_bins: int = 60
    omega_upper: float = 8.0
    ratio_bins: int = 40
    keep_central: float = 0.75
    smax_convention: str = "floor_half_n"
    bipartition: tuple[int, ...] | None = None
    store_omegas: bool = False

    def partition(self, n_atoms: int) -> Bipartition:
        if self.bipartition is None:
            return find_asymmetric_bipartition(n_atoms)
        return Bipartition(n_atoms, tuple(self.bipartition))

    @property
    def entropy_edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.entropy_bins + 1)

    @property
    def omega_edges(self) -> np.ndarray:
        return np.linspace(0.0, self.omega_upper, self.omega_bins + 1)

    @property
    def ratio_edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.ratio_bins + 1)


def pulse_states(master_seed: int, cell: int, sample_ids, basis: SectorBasis, ops: SectorOperators,
                 constraints: PulseConstraints) -> np.ndarray:
    """Sector states reached from the all-down state by one random pulse per sample."""
    seqs = [sample_random_pulses(sample_rng(master_seed, PULSE_STREAM, cell, int(i)), constraints)
            for i in sample_ids]
    if not seqs:
        return np.empty((0, basis.dim), dtype=complex)
    dt = np.array([s.dt for s in seqs])
    rabi = np.array([s.rabi for s in seqs])
    det = np.array([s.detuning for s in seqs])
    return evolve_batch(default_initial(basis), dt, rabi, det, ops)


def haar_states(master_seed: int, cell: int, sample_ids, basis: SectorBasis) -> np.ndarray:
    rows = [haar_sector(sample_rng(master_seed, HAAR_STREAM, cell, int(i)), basis) for i in sample_ids]
    return np.array(rows).reshape(-1, basis.dim)


def analyze_states(states: np.ndarray, basis: SectorBasis, options: AnalysisOptions) -> list[dict]:
    """Per-sample diagnostics of sector states, one dict per row."""
    n = basis.n_atoms
    part = options.partition(n)
    full = embed(states, basis)
    lam = np.linalg.svd(coefficient_matrix(full, part), compute_uv=False) ** 2
    entropy = entropy_from_schmidt(lam)
    smax = s_max(n, options.smax_convention)
    probs = np.abs(states) ** 2
    w_pair, w_dens = sector_observables(basis)
    # row-wise reductions: a BLAS product would make the last bit depend on batch shape
    nn = np.sum(probs * w_pair, axis=1)
    dens = np.sum(probs * w_dens, axis=1)
    omegas = (1 << n) * np.abs(full) ** 2
    edges = options.omega_edges
    out = []
    for k in range(len(states)):
        kept = lam[k][lam[k] > SCHMIDT_FLOOR]
        ratios = gap_ratios(-np.log(kept), options.keep_central) if len(kept) >= 4 else np.empty(0)
        hist = Histogram.from_samples(omegas[k], edges)
        row = {
            "entropy": float(entropy[k]),
            "normalized_entropy": float(entropy[k] / smax),
            "nn_correlation": float(nn[k]),
            "mean_excitation": float(dens[k]),
            "gap_ratios": ratios.tolist(),
            "schmidt_sq": lam[k].tolist(),
            "omega_counts": hist.counts.tolist() + [hist.overflow],
        }
        if options.store_omegas:
            row["omegas"] = omegas[k].tolist()
        out.append(row)
    return out


def ratio_masses(edges, beta: int) -> np.ndarray:
    """Surmise probability of each ratio bin."""
    return np.array([integrate.quad(wigner_dyson_pdf, a, b, args=(beta,))[0] for a, b in zip(edges[:-1], edges[1:])])


@dataclass
class CellSummary:
    """Histograms and medians of one (d, T_f) ensemble cell."""

    n_samples: int
    entropy: Histogram
    omega: Histogram
    ratio: Histogram
    medians: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[dict], options: AnalysisOptions) -> "CellSummary":
        if not rows:
            raise ValueError("cannot summarise an empty cell")
        s = np.array([r["normalized_entropy"] for r in rows])
        entropy = Histogram.from_samples(s, options.entropy_edges)
        counts = np.sum([r["omega_counts"] for r in rows], axis=0)
        omega = Histogram(options.omega_edges, counts[:-1], int(counts[-1]))
        ratios = np.concatenate([np.asarray(r["gap_ratios"], dtype=float) for r in rows])
        ratio = Histogram.from_samples(ratios, options.ratio_edges)
        medians = {}
        for key in ("normalized_entropy", "nn_correlation", "mean_excitation"):
            med, (lo, hi) = summarize([r[key] for r in rows])
            medians[key] = {"median": med, "p16": lo, "p84": hi}
        medians["gap_ratio_mean"] = float(ratios.mean()) if ratios.size else float("nan")
        return cls(len(rows), entropy, omega, ratio, medians)

    def js_porter_thomas(self) -> float:
        return js_divergence(self.omega.masses(), porter_thomas_masses(self.omega.bin_edges))

    def js_entropy(self, reference: "CellSummary") -> float:
        return js_divergence(self.entropy, reference.entropy)

    def js_ratio(self, beta: int = 2) -> float:
        return js_divergence(self.ratio.masses(overflow=False), ratio_masses(self.ratio.bin_edges, beta))
