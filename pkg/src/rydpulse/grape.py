"""Fixed-time state preparation by gradient-based pulse optimisation.

The cost is ``F = C_phys + C_pulse + C_amp`` with

* ``C_phys = -log |<target| U |psi0>|^2``,
* ``C_pulse = a1 * sum_k [(dDelta_k)^2 + (dOmega_k)^2] / tau_k + a2 * exp((sum dt / T_max)^alpha)``,
  where ``tau_k`` is the mean duration of the two segments at interface k,
* ``C_amp = a3 * sum_k [max(0, |Delta_k| - Delta_max)^2 + max(0, Omega_k - Omega_max)^2]``.

Gradients of ``C_phys`` are exact: forward states and backward costates,
with the derivative of each segment propagator taken in the eigenbasis of
its Hamiltonian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize as sopt

from .evolution import DELTA_MAX, M_SEGMENTS, OMEGA_MAX, PulseSequence, sample_rng
from .hamiltonian import SectorOperators, assemble_batch

log = logging.getLogger(__name__)

OVERLAP_FLOOR = 1e-300
DEGENERACY_TOL = 1e-10
OPTIMIZERS = ("lbfgs", "gd")


@dataclass(frozen=True)
class GrapeConfig:
    m_segments: int = M_SEGMENTS
    t_max: float = 6.0
    a1: float = 1e-4
    a2: float = 1e-2
    a3: float = 10.0
    alpha: float = 4.0
    omega_max: float = OMEGA_MAX
    delta_max: float = DELTA_MAX
    n_restarts: int = 16
    optimizer: str = "lbfgs"
    max_iters: int = 3000
    grad_tol: float = 1e-10
    init_scheme: str = "uniform"

    def __post_init__(self):
        if min(self.a1, self.a2, self.a3) < 0:
            raise ValueError("penalty weights must be non-negative")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if self.n_restarts < 1 or self.m_segments < 1:
            raise ValueError("n_restarts and m_segments must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.init_scheme not in ("uniform",):
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")


# --- cost terms ------------------------------------------------------------


def _propagate(seq: PulseSequence, ops: SectorOperators, initial: np.ndarray):
    lam, vec = np.linalg.eigh(assemble_batch(seq.rabi, seq.detuning, ops))
    phases = np.exp(-1j * seq.dt[:, None] * lam)
    psi = np.asarray(initial, dtype=complex)
    forward = [psi]
    for k in range(seq.m_segments):
        psi = vec[k] @ (phases[k] * (vec[k].T @ psi))
        forward.append(psi)
    return lam, vec, phases, forward


def final_state(seq: PulseSequence, ops: SectorOperators, initial: np.ndarray) -> np.ndarray:
    return _propagate(seq, ops, initial)[3][-1]


def infidelity(seq: PulseSequence, target: np.ndarray, ops: SectorOperators, initial: np.ndarray) -> float:
    overlap = np.vdot(target, final_state(seq, ops, initial))
    return float(max(0.0, 1.0 - abs(overlap) ** 2))


def cost_phys(seq: PulseSequence, target: np.ndarray, ops: SectorOperators, initial: np.ndarray) -> float:
    overlap = np.vdot(target, final_state(seq, ops, initial))
    return float(-np.log(max(abs(overlap) ** 2, OVERLAP_FLOOR)))


def _smoothness(seq: PulseSequence):
    d_rabi = np.diff(seq.rabi)
    d_det = np.diff(seq.detuning)
    tau = 0.5 * (seq.dt[1:] + seq.dt[:-1])
    return d_rabi, d_det, tau


def cost_pulse(seq: PulseSequence, config: GrapeConfig) -> float:
    if np.any(seq.dt <= 0):
        raise ValueError("segment durations must be positive")
    d_rabi, d_det, tau = _smoothness(seq)
    smooth = np.sum((d_det**2 + d_rabi**2) / tau) if seq.m_segments > 1 else 0.0
    x = seq.total_time / config.t_max
    return float(config.a1 * smooth + config.a2 * np.exp(x**config.alpha))


def cost_amp(seq: PulseSequence, config: GrapeConfig) -> float:
    over_d = np.maximum(0.0, np.abs(seq.detuning) - config.delta_max)
    over_o = np.maximum(0.0, seq.rabi - config.omega_max)
    return float(config.a3 * np.sum(over_d**2 + over_o**2))


def total_cost(seq: PulseSequence, target: np.ndarray, config: GrapeConfig, ops: SectorOperators,
               initial: np.ndarray) -> float:
    return cost_phys(seq, target, ops, initial) + cost_pulse(seq, config) + cost_amp(seq, config)


# --- gradients -------------------------------------------------------------


def phys_value_and_gradient(seq: PulseSequence, target: np.ndarray, ops: SectorOperators,
                            initial: np.ndarray):
    """C_phys and its gradient as three length-M arrays (d/dOmega, d/dDelta, d/ddt)."""
    lam, vec, phases, forward = _propagate(seq, ops, initial)
    m = seq.m_segments
    overlap = np.vdot(target, forward[-1])
    fid = abs(overlap) ** 2
    value = float(-np.log(max(fid, OVERLAP_FLOOR)))

    # backward costates: chi_k = U_{k+1}^dag ... U_M^dag |target>
    chis = [None] * m
    chi = np.asarray(target, dtype=complex)
    for k in range(m - 1, -1, -1):
        chis[k] = chi
        chi = vec[k] @ (np.conj(phases[k]) * (vec[k].T @ chi))

    # divided differences of x -> exp(-i dt x) over eigenvalue pairs, with
    # the confluent limit -i dt exp(-i dt x) on (near-)degenerate pairs
    gap = lam[:, :, None] - lam[:, None, :]
    confluent = np.abs(gap) < DEGENERACY_TOL
    num = phases[:, :, None] - phases[:, None, :]
    kernel = np.divide(num, np.where(confluent, 1.0, gap))
    if confluent.any():
        diag_like = np.broadcast_to((-1j * seq.dt[:, None] * phases)[:, :, None], kernel.shape)
        kernel[confluent] = diag_like[confluent]

    vt = np.swapaxes(vec, 1, 2)
    jx_eig = vt @ ops.jx @ vec
    n_eig = vt @ (ops.n_diag[:, None] * vec)

    a = (vt @ np.array(forward[:-1])[:, :, None])[:, :, 0]  # eigen coefficients of psi_{k-1}
    bc = np.conj((vt @ np.array(chis)[:, :, None])[:, :, 0])  # conjugated coefficients of chi_k

    d_rabi = np.einsum("ka,ka->k", bc, ((kernel * jx_eig) @ a[:, :, None])[:, :, 0])
    d_det = -np.einsum("ka,ka->k", bc, ((kernel * n_eig) @ a[:, :, None])[:, :, 0])
    d_dt = -1j * np.einsum("ka,ka->k", bc, lam * phases * a)

    if fid < OVERLAP_FLOOR:
        zero = np.zeros(m)
        return value, (zero, zero.copy(), zero.copy())
    scale = -2.0 / fid
    grads = tuple(scale * np.real(np.conj(overlap) * dc) for dc in (d_rabi, d_det, d_dt))
    return value, grads


def penalty_value_and_gradient(seq: PulseSequence, config: GrapeConfig):
    m = seq.m_segments
    g_rabi = np.zeros(m)
    g_det = np.zeros(m)
    g_dt = np.zeros(m)
    value = 0.0

    if m > 1 and config.a1 > 0:
        d_rabi, d_det, tau = _smoothness(seq)
        sq = d_rabi**2 + d_det**2
        value += config.a1 * np.sum(sq / tau)
        for diff, g in ((d_rabi, g_rabi), (d_det, g_det)):
            w = 2.0 * config.a1 * diff / tau
            g[1:] += w
            g[:-1] -= w
        w = -0.5 * config.a1 * sq / tau**2
        g_dt[1:] += w
        g_dt[:-1] += w

    x = seq.total_time / config.t_max
    wall = config.a2 * np.exp(x**config.alpha)
    value += wall
    g_dt += wall * config.alpha * x ** (config.alpha - 1) / config.t_max

    over_d = np.maximum(0.0, np.abs(seq.detuning) - config.delta_max)
    over_o = np.maximum(0.0, seq.rabi - config.omega_max)
    value += config.a3 * np.sum(over_d**2 + over_o**2)
    g_det += 2.0 * config.a3 * over_d * np.sign(seq.detuning)
    g_rabi += 2.0 * config.a3 * over_o
    return float(value), (g_rabi, g_det, g_dt)


def cost_and_gradient(seq: PulseSequence, target: np.ndarray, config: GrapeConfig, ops: SectorOperators,
                      initial: np.ndarray):
    """F and dF/d(Omega, Delta, dt), the latter as a ``(3, M)`` array."""
    phys, g_phys = phys_value_and_gradient(seq, target, ops, initial)
    pen, g_pen = penalty_value_and_gradient(seq, config)
    grad = np.array([gp + gq for gp, gq in zip(g_phys, g_pen)])
    return phys + pen, grad


def gradient(seq: PulseSequence, target: np.ndarray, config: GrapeConfig, ops: SectorOperators,
             initial: np.ndarray) -> np.ndarray:
    """Flat gradient ordered as (Omega_1..M, Delta_1..M, dt_1..M)."""
    return cost_and_gradient(seq, target, config, ops, initial)[1].ravel()


# --- positivity-preserving parameterisation --------------------------------


def _softplus(z):
    return np.logaddexp(0.0, z)


def _inv_softplus(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 30, x, np.log(np.expm1(np.minimum(x, 30))))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class Parameterization:
    """Smooth bijection between unconstrained z and (Omega >= 0, Delta, dt > 0).

    Omega = omega_scale * softplus(u), Delta = delta_scale * v,
    dt = dt_scale * softplus(w).
    """

    omega_scale: float
    delta_scale: float
    dt_scale: float

    @classmethod
    def for_config(cls, config: GrapeConfig) -> "Parameterization":
        return cls(config.omega_max, config.delta_max, config.t_max / config.m_segments)

    def to_sequence(self, z: np.ndarray) -> PulseSequence:
        u, v, w = np.asarray(z).reshape(3, -1)
        return PulseSequence(self.dt_scale * _softplus(w), self.omega_scale * _softplus(u), self.delta_scale * v)

    def from_sequence(self, seq: PulseSequence) -> np.ndarray:
        rabi = np.maximum(seq.rabi, 1e-6 * self.omega_scale)
        u = _inv_softplus(rabi / self.omega_scale)
        w = _inv_softplus(seq.dt / self.dt_scale)
        return np.concatenate([u, seq.detuning / self.delta_scale, w])

    def chain(self, z: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Pull back a (3, M) physical gradient to z."""
        u, _, w = np.asarray(z).reshape(3, -1)
        return np.concatenate([
            grad[0] * self.omega_scale * _sigmoid(u),
            grad[1] * self.delta_scale,
            grad[2] * self.dt_scale * _sigmoid(w),
        ])


# --- optimisation ----------------------------------------------------------


@dataclass
class RestartTrace:
    restart_id: int
    final_cost: float
    infidelity: float
    iterations: int
    t_opt: float
    converged: bool
    message: str = ""
    failed: bool = False


@dataclass
class GrapeResult:
    best_sequence: PulseSequence
    best_infidelity: float
    t_opt: float
    restarts: list[RestartTrace] = field(default_factory=list)
    target_meta: dict = field(default_factory=dict)

    @property
    def n_converged(self) -> int:
        return sum(r.converged for r in self.restarts)

    def to_json(self) -> dict:
        return {
            "best_infidelity": self.best_infidelity,
            "t_opt": self.t_opt,
            "pulse": self.best_sequence.to_json(),
            "restarts": [vars(r) for r in self.restarts],
            "target": self.target_meta,
        }


def initial_guess(rng: np.random.Generator, config: GrapeConfig) -> PulseSequence:
    m = config.m_segments
    rabi = rng.uniform(0.0, config.omega_max, m)
    det = rng.uniform(-config.delta_max, config.delta_max, m)
    return PulseSequence(np.full(m, config.t_max / m), rabi, det)


def clip_to_bounds(seq: PulseSequence, config: GrapeConfig) -> PulseSequence:
    return PulseSequence(seq.dt, np.clip(seq.rabi, 0.0, config.omega_max),
                         np.clip(seq.detuning, -config.delta_max, config.delta_max))


def _gradient_descent(fun, z0, config: GrapeConfig, callback=None):
    """Steepest descent with Armijo backtracking; returns (z, f, iterations, converged)."""
    z = np.array(z0, dtype=float)
    f, g = fun(z)
    step = 1.0
    for it in range(1, config.max_iters + 1):
        gnorm2 = float(g @ g)
        if np.sqrt(gnorm2) < config.grad_tol:
            return z, f, it - 1, True
        step *= 2.0
        while True:
            z_new = z - step * g
            f_new, g_new = fun(z_new)
            if f_new <= f - 1e-4 * step * gnorm2:
                break
            step *= 0.5
            if step < 1e-16:
                return z, f, it, False
        z, f, g = z_new, f_new, g_new
        if callback is not None:
            callback(z, f)
    return z, f, config.max_iters, False


def run_restart(target: np.ndarray, config: GrapeConfig, ops: SectorOperators, initial: np.ndarray,
                start: PulseSequence, restart_id: int = 0, history: list | None = None):
    """Optimise from one starting sequence; returns (clipped sequence, RestartTrace)."""
    param = Parameterization.for_config(config)
    evals = {}

    def fun(z):
        seq = param.to_sequence(z)
        f, g = cost_and_gradient(seq, target, config, ops, initial)
        evals["last"] = (z.copy(), f)
        return f, param.chain(z, g)

    z0 = param.from_sequence(start)
    if history is not None:
        history.append(fun(z0)[0])

    def record(z, f=None):
        if history is not None:
            history.append(f if f is not None else fun(z)[0])

    if config.optimizer == "lbfgs":
        res = sopt.minimize(fun, z0, jac=True, method="L-BFGS-B",
                            callback=(lambda intermediate_result: record(intermediate_result.x, intermediate_result.fun))
                            if history is not None else None,
                            options={"maxiter": config.max_iters, "gtol": config.grad_tol, "ftol": 1e-14,
                                     "maxcor": 20})
        z, f, nit, ok, msg = res.x, float(res.fun), int(res.nit), bool(res.success), str(res.message)
    else:
        z, f, nit, ok = _gradient_descent(fun, z0, config, callback=record if history is not None else None)
        msg = "converged" if ok else "stopped"
    seq = clip_to_bounds(param.to_sequence(z), config)
    inf = infidelity(seq, target, ops, initial)
    trace = RestartTrace(restart_id, f, inf, nit, seq.total_time, ok, msg)
    return seq, trace


def optimize(target: np.ndarray, config: GrapeConfig, ops: SectorOperators, initial: np.ndarray,
             master_seed: int = 0, target_id: int = 0, target_meta: dict | None = None) -> GrapeResult:
    """Multi-start optimisation; the best restart is chosen by infidelity.

    Restart ``r`` draws its starting pulses from the stream
    ``(master_seed, target_id, r)``, so results do not depend on execution order.
    """
    target = np.asarray(target, dtype=complex)
    if abs(np.linalg.norm(target) - 1.0) > 1e-8:
        raise ValueError("target state must be normalised")
    best = None
    traces = []
    for r in range(config.n_restarts):
        rng = sample_rng(master_seed, target_id, r)
        start = initial_guess(rng, config)
        try:
            seq, trace = run_restart(target, config, ops, initial, start, restart_id=r)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            log.warning("restart %d of target %d failed: %s", r, target_id, exc)
            traces.append(RestartTrace(r, np.inf, 1.0, 0, 0.0, False, str(exc), failed=True))
            continue
        traces.append(trace)
        if best is None or trace.infidelity < best[1].infidelity:
            best = (seq, trace)
    if best is None:
        raise RuntimeError(f"all {config.n_restarts} restarts failed for target {target_id}")
    seq, trace = best
    return GrapeResult(seq, trace.infidelity, seq.total_time, traces, dict(target_meta or {}))


# --- target selection and success statistics -------------------------------


def stratified_targets(entropies, groups=None, n_bins: int = 30, per_bin: int = 1, edges=None):
    """Pick up to ``per_bin`` pool indices in each of ``n_bins`` uniform entropy bins.

    Within a bin, candidates are taken round-robin across ``groups`` (e.g.
    generation times) in order of first appearance, preserving pool order
    inside each group. Returns ``(selected_indices, empty_bins, edges)``.
    """
    s = np.asarray(entropies, dtype=float)
    if s.size == 0:
        raise ValueError("empty target pool")
    groups = np.zeros(len(s), dtype=int) if groups is None else np.asarray(groups)
    if edges is None:
        lo, hi = float(s.min()), float(s.max())
        if hi == lo:
            hi = lo + 1e-12
        edges = np.linspace(lo, hi, n_bins + 1)
    edges = np.asarray(edges, dtype=float)
    n_bins = len(edges) - 1
    bins = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, n_bins - 1)
    inside = (s >= edges[0]) & (s <= edges[-1])
    group_order = list(dict.fromkeys(groups.tolist()))

    selected = []
    empty = []
    for b in range(n_bins):
        members = np.flatnonzero((bins == b) & inside)
        if members.size == 0:
            empty.append(b)
            continue
        queues = [[i for i in members if groups[i] == g] for g in group_order]
        queues = [q for q in queues if q]
        picked = []
        while len(picked) < per_bin and any(queues):
            for q in queues:
                if q and len(picked) < per_bin:
                    picked.append(int(q.pop(0)))
        selected.extend(picked)
    return selected, empty, edges


def success_curve(entropies, infidelities, gamma: float = 1e-2, delta_s: float = 0.0309, lo: float | None = None):
    """Per-bin success probability P(I <= gamma) and median infidelity with 68% band.

    Bins are ``[S - delta_s/2, S + delta_s/2)`` on a grid starting at ``lo``
    (default: the smallest entropy).
    """
    from .statistics import summarize

    s = np.asarray(entropies, dtype=float)
    inf = np.asarray(infidelities, dtype=float)
    if s.size == 0:
        raise ValueError("no results to summarise")
    lo = float(s.min()) if lo is None else lo
    n_bins = max(1, int(np.floor((s.max() - lo) / delta_s)) + 1)
    rows = []
    for b in range(n_bins):
        left = lo + b * delta_s
        sel = (s >= left) & (s < left + delta_s)
        if not sel.any():
            continue
        med, (p16, p84) = summarize(inf[sel])
        rows.append({"center": left + 0.5 * delta_s, "count": int(sel.sum()),
                     "success_probability": float(np.mean(inf[sel] <= gamma)),
                     "median_infidelity": med, "p16": p16, "p84": p84})
    return rows


def with_time_budget(config: GrapeConfig, t_max: float) -> GrapeConfig:
    return replace(config, t_max=t_max)
