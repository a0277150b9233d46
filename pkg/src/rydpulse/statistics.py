"""Entanglement, level-spacing and Born-probability diagnostics."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import digamma

from .geometry import site_permutations

log = logging.getLogger(__name__)

SCHMIDT_FLOOR = 1e-14
NORM_TOL = 1e-8
SMAX_CONVENTIONS = ("floor_half_n", "half_n")


# --- bipartitions ----------------------------------------------------------


@dataclass(frozen=True)
class Bipartition:
    """Subsystem A of a ring of ``n_atoms`` sites; B is the complement."""

    n_atoms: int
    sites: tuple[int, ...]

    def __post_init__(self):
        sites = tuple(sorted(set(int(s) for s in self.sites)))
        if not sites or len(sites) >= self.n_atoms:
            raise ValueError("subsystem A must be a non-empty proper subset")
        if sites[0] < 0 or sites[-1] >= self.n_atoms:
            raise ValueError(f"sites out of range for N={self.n_atoms}")
        object.__setattr__(self, "sites", sites)

    @property
    def complement(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_atoms) if i not in self.sites)

    @property
    def mask(self) -> str:
        return "".join("A" if i in self.sites else "B" for i in range(self.n_atoms))

    @classmethod
    def contiguous(cls, n_atoms: int) -> "Bipartition":
        return cls(n_atoms, tuple(range(n_atoms // 2)))


@dataclass(frozen=True)
class BipartitionClass:
    exchange: bool
    internal: bool

    @property
    def label(self) -> str:
        # internal symmetry makes rho_A block diagonal, which dominates the
        # level statistics, so it is reported first
        if self.internal:
            return "internal-symmetry"
        if self.exchange:
            return "exchange-symmetry"
        return "no-symmetry"


def classify_bipartition(part: Bipartition) -> BipartitionClass:
    a = frozenset(part.sites)
    b = frozenset(part.complement)
    exchange = internal = False
    for k, perm in enumerate(site_permutations(part.n_atoms)):
        image = frozenset(int(perm[s]) for s in a)
        exchange |= image == b
        internal |= k != 0 and image == a
    return BipartitionClass(exchange, internal)


def exchange_map(part: Bipartition) -> np.ndarray | None:
    """Site permutation of D_N mapping A onto B, or None."""
    a = frozenset(part.sites)
    b = frozenset(part.complement)
    for perm in site_permutations(part.n_atoms):
        if frozenset(int(perm[s]) for s in a) == b:
            return perm
    return None


def find_asymmetric_bipartition(n_atoms: int, size: int | None = None) -> Bipartition:
    """First subset (lexicographic order) with neither exchange nor internal symmetry."""
    if n_atoms < 5:
        raise ValueError("asymmetric bipartitions need N >= 5")
    size = n_atoms // 2 if size is None else size
    for sites in itertools.combinations(range(n_atoms), size):
        part = Bipartition(n_atoms, sites)
        if classify_bipartition(part).label == "no-symmetry":
            return part
    raise ValueError(f"no asymmetric bipartition of size {size} for N={n_atoms}")


# --- Schmidt decomposition -------------------------------------------------


@dataclass(frozen=True)
class EntanglementData:
    schmidt_sq: np.ndarray
    entropy: float
    s_max: float

    @property
    def normalized_entropy(self) -> float:
        return self.entropy / self.s_max

    @property
    def log_spectrum(self) -> np.ndarray:
        """Entanglement spectrum -log(lambda^2), dropping values below the floor."""
        lam = self.schmidt_sq[self.schmidt_sq > SCHMIDT_FLOOR]
        return -np.log(lam)


def s_max(n_atoms: int, convention: str = "floor_half_n") -> float:
    """Entropy normalisation: floor(N/2) ln 2 or (N/2) ln 2."""
    if convention == "floor_half_n":
        return (n_atoms // 2) * np.log(2.0)
    if convention == "half_n":
        return 0.5 * n_atoms * np.log(2.0)
    raise ValueError(f"unknown S_max convention {convention!r}; use one of {SMAX_CONVENTIONS}")


def coefficient_matrix(state: np.ndarray, part: Bipartition, b_order=None) -> np.ndarray:
    """Reshape full amplitudes into C[i_A, i_B].

    Rows enumerate A configurations with A sites in ascending order; columns
    use ``b_order`` (default: B sites ascending). Works on stacks of states.
    """
    n = part.n_atoms
    state = np.asarray(state)
    lead = state.shape[:-1]
    b_sites = list(part.complement) if b_order is None else list(b_order)
    axes = [len(lead) + s for s in list(part.sites) + b_sites]
    t = state.reshape(lead + (2,) * n).transpose(list(range(len(lead))) + axes)
    return t.reshape(lead + (1 << len(part.sites), 1 << len(b_sites)))


def entropy_from_schmidt(schmidt_sq: np.ndarray) -> np.ndarray:
    p = np.asarray(schmidt_sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def schmidt_spectra(states: np.ndarray, part: Bipartition) -> np.ndarray:
    """Descending squared Schmidt values for a stack of full-basis states."""
    c = coefficient_matrix(states, part)
    sv = np.linalg.svd(c, compute_uv=False)
    return sv**2


def schmidt_decompose(state: np.ndarray, part: Bipartition, smax_convention: str = "floor_half_n") -> EntanglementData:
    state = np.asarray(state)
    norm = np.linalg.norm(state)
    if abs(norm - 1.0) > NORM_TOL:
        raise ValueError(f"state is not normalised (norm = {norm:.12g})")
    lam = schmidt_spectra(state, part)
    return EntanglementData(lam, float(entropy_from_schmidt(lam)), s_max(part.n_atoms, smax_convention))


def page_entropy(d_a: int, d_b: int) -> float:
    """Mean entanglement entropy of Haar-random states in C^{d_a} x C^{d_b}, d_a <= d_b."""
    if d_a > d_b:
        d_a, d_b = d_b, d_a
    return float(digamma(d_a * d_b + 1) - digamma(d_b + 1) - (d_a - 1) / (2 * d_b))


# --- level-spacing ratios --------------------------------------------------


def trim_central(levels: np.ndarray, keep_central: float = 0.75) -> np.ndarray:
    """Sort and keep the central round(keep * n) levels, trimming both ends equally.

    When n - kept is odd the extra level is dropped from the top.
    """
    s = np.sort(np.asarray(levels, dtype=float))
    n = len(s)
    kept = int(np.floor(keep_central * n + 0.5))
    lo = (n - kept) // 2
    return s[lo:lo + kept]


def gap_ratios(levels, keep_central: float = 0.75, return_degenerate: bool = False):
    """Consecutive-gap ratios min(g_n/g_{n+1}, g_{n+1}/g_n) of the central levels.

    ``levels`` may be an :class:`EntanglementData` (its log spectrum is used)
    or any 1-D array. Zero gaps give a ratio of 0; with
    ``return_degenerate=True`` a boolean mask marking those ratios is also
    returned.
    """
    if isinstance(levels, EntanglementData):
        levels = levels.log_spectrum
    s = trim_central(levels, keep_central)
    if len(s) < 4:
        raise ValueError(f"need at least 4 retained levels, got {len(s)}")
    g = np.diff(s)
    lo = np.minimum(g[:-1], g[1:])
    hi = np.maximum(g[:-1], g[1:])
    degenerate = hi <= 0.0
    r = np.divide(lo, hi, out=np.zeros_like(lo), where=~degenerate)
    if degenerate.any():
        log.debug("%d degenerate gap ratios set to 0", degenerate.sum())
    return (r, degenerate) if return_degenerate else r


def pooled_ratios(spectra, keep_central: float = 0.75) -> np.ndarray:
    """Concatenate gap ratios of many squared-Schmidt spectra (floor applied)."""
    out = []
    for lam in spectra:
        lam = np.asarray(lam)
        lam = lam[lam > SCHMIDT_FLOOR]
        out.append(gap_ratios(-np.log(lam), keep_central))
    return np.concatenate(out) if out else np.empty(0)


_WD_NORM = {1: 8.0 / 27.0, 2: 4.0 * np.pi / (81.0 * np.sqrt(3.0))}


def wigner_dyson_pdf(r, beta: int = 2):
    """Ratio surmise density on [0, 1] for beta = 1 (GOE) or 2 (GUE)."""
    if beta not in _WD_NORM:
        raise ValueError(f"unsupported beta {beta}")
    r = np.asarray(r, dtype=float)
    return 2.0 * (r + r * r) ** beta / (_WD_NORM[beta] * (1.0 + r + r * r) ** (1.0 + 1.5 * beta))


def poisson_ratio_pdf(r):
    """Folded ratio density for uncorrelated levels, 2 / (1 + r)^2."""
    r = np.asarray(r, dtype=float)
    return 2.0 / (1.0 + r) ** 2


@lru_cache(maxsize=None)
def surmise_mean(beta: int) -> float:
    val, _ = integrate.quad(lambda r: r * wigner_dyson_pdf(r, beta), 0.0, 1.0, epsabs=1e-13, epsrel=1e-13)
    return val


POISSON_RATIO_MEAN = 2.0 * math.log(2.0) - 1.0

_ENSEMBLES = {"complex": "complex", "gue": "complex", "gue-ginibre": "complex",
              "real": "real", "goe": "real", "goe-real-ginibre": "real",
              "poisson": "poisson"}


def wishart_reference_ratios(rng: np.random.Generator, d_a: int, d_b: int, ensemble: str = "complex",
                             n_samples: int = 1000, keep_central: float = 0.75) -> np.ndarray:
    """Pooled gap ratios of normalised Wishart spectra XX^dag / tr(XX^dag).

    ``ensemble``: ``complex`` (Ginibre, beta=2), ``real`` (real Ginibre,
    beta=1), or ``poisson`` (control: d_a levels of a Poisson process).
    """
    if d_a > d_b:
        raise ValueError("need d_a <= d_b")
    kind = _ENSEMBLES.get(ensemble.lower())
    if kind is None:
        raise ValueError(f"unknown ensemble {ensemble!r}")
    if kind == "poisson":
        levels = np.cumsum(rng.exponential(1.0, (n_samples, d_a)), axis=1)
        return np.concatenate([gap_ratios(lv, keep_central) for lv in levels])
    x = rng.normal(size=(n_samples, d_a, d_b))
    if kind == "complex":
        x = x + 1j * rng.normal(size=(n_samples, d_a, d_b))
    sv = np.linalg.svd(x, compute_uv=False) ** 2
    sv /= sv.sum(axis=1, keepdims=True)
    return pooled_ratios(sv, keep_central)


def symmetric_coefficient_check(state: np.ndarray, part: Bipartition) -> float:
    """max |C - C^T| with columns ordered by the image of A under the exchange map."""
    g = exchange_map(part)
    if g is None:
        raise ValueError(f"bipartition {part.mask} has no A<->B exchange symmetry")
    c = coefficient_matrix(state, part, b_order=[int(g[s]) for s in part.sites])
    return float(np.max(np.abs(c - np.swapaxes(c, -1, -2))))


# --- Born probabilities ----------------------------------------------------


def bitstring_omegas(state: np.ndarray) -> np.ndarray:
    """Rescaled Born probabilities omega = D p(sigma)."""
    p = np.abs(np.asarray(state)) ** 2
    return p * p.shape[-1]


def porter_thomas_pdf(omega):
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0):
        raise ValueError("omega must be non-negative")
    return np.exp(-omega)


def porter_thomas_masses(edges, overflow: bool = True) -> np.ndarray:
    """Exact bin integrals of exp(-omega) over ``edges`` (plus the tail if overflow)."""
    edges = np.asarray(edges, dtype=float)
    cdf = -np.expm1(-edges)
    masses = np.diff(cdf)
    if overflow:
        masses = np.append(masses, np.exp(-edges[-1]))
    return masses


# --- histograms and divergences --------------------------------------------


@dataclass(frozen=True)
class Histogram:
    """Binned sample; ``overflow`` counts values above the last edge."""

    bin_edges: np.ndarray
    counts: np.ndarray
    overflow: int = 0
    underflow: int = 0

    @classmethod
    def from_samples(cls, values, edges) -> "Histogram":
        values = np.asarray(values, dtype=float).ravel()
        edges = np.asarray(edges, dtype=float)
        counts, _ = np.histogram(values, bins=edges)
        return cls(edges, counts, int(np.sum(values > edges[-1])), int(np.sum(values < edges[0])))

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.overflow + self.underflow

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    @property
    def density(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros(len(self.counts))
        return self.counts / (self.total * self.widths)

    def masses(self, overflow: bool = True) -> np.ndarray:
        """Bin probabilities; the overflow bin is appended when requested."""
        c = self.counts.astype(float)
        if overflow:
            c = np.append(c, self.overflow)
        return c / max(c.sum(), 1.0)

    def __add__(self, other: "Histogram") -> "Histogram":
        if not np.array_equal(self.bin_edges, other.bin_edges):
            raise ValueError("cannot add histograms with different binning")
        return Histogram(self.bin_edges, self.counts + other.counts,
                         self.overflow + other.overflow, self.underflow + other.underflow)

    def rebin(self, edges) -> "Histogram":
        """Merge bins onto ``edges``, which must be a subset of the current edges."""
        edges = np.asarray(edges, dtype=float)
        pos = np.searchsorted(self.bin_edges, edges)
        if np.any(pos >= len(self.bin_edges)) or not np.allclose(self.bin_edges[pos], edges, rtol=0, atol=1e-12):
            raise ValueError("new edges must be a subset of the existing edges")
        cum = np.concatenate([[0], np.cumsum(self.counts)])
        counts = np.diff(cum[pos])
        below = int(cum[pos[0]])
        above = int(cum[-1] - cum[pos[-1]])
        return Histogram(edges, counts, self.overflow + above, self.underflow + below)


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / m[nz])))


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence (nats) between two binned distributions.

    Accepts :class:`Histogram` objects with identical edges or probability
    vectors of equal length.
    """
    if isinstance(p, Histogram) and isinstance(q, Histogram):
        if not np.array_equal(p.bin_edges, q.bin_edges):
            raise ValueError("histograms have different bin edges; rebin one of them first")
        p, q = p.masses(), q.masses()
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions must have the same number of bins")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)
    return max(0.5 * _kl(p, m) + 0.5 * _kl(q, m), 0.0)


def summarize(values):
    """Median and central 68% interval (16th, 84th percentiles)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("cannot summarise an empty sample")
    lo, med, hi = np.percentile(v, [16.0, 50.0, 84.0])
    return float(med), (float(lo), float(hi))


def entropy_edges(n_bins: int = 50) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_bins + 1)


def omega_edges(n_bins: int = 60, upper: float = 8.0) -> np.ndarray:
    return np.linspace(0.0, upper, n_bins + 1)


def ratio_edges(n_bins: int = 40) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_bins + 1)


# --- per-sample record -----------------------------------------------------


@dataclass
class EnsembleRecord:
    sample_id: int
    seed: int
    t_final: float
    spacing: float
    entropy: float
    normalized_entropy: float
    nn_correlation: float
    mean_excitation: float
    gap_ratios: list = field(default_factory=list)
    schmidt_sq: list = field(default_factory=list)
    omegas: list | None = None
    config_hash: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        if self.omegas is None:
            d.pop("omegas")
        return d
