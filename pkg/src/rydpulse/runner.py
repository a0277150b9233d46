"""Execution of configured experiments and all file outputs.

Work is split into units (a chunk of sample ids, or one optimisation target)
that are evaluated by a process pool and written back in submission order by
the parent, one ``os.write`` per JSON line. Because every unit draws from its
own RNG streams, data files do not depend on the worker count.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import itertools
import json
import logging
import multiprocessing as mp
import os
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .blockade import EtaModel, characteristic_distance, eta_cdf, eta_grid, sample_eta
from .config import ExperimentConfig
from .ensemble import AnalysisOptions, CellSummary, analyze_states, haar_states, pulse_states, ratio_masses
from .evolution import PulseConstraints, default_initial, sample_rng
from .geometry import SectorBasis, build_ring, dihedral_orbits, embed, project, site_permutations
from .grape import GrapeConfig, optimize, stratified_targets, success_curve
from .hamiltonian import PhysicalParams, build_sector_operators
from .statistics import (
    POISSON_RATIO_MEAN,
    Bipartition,
    Histogram,
    classify_bipartition,
    entropy_from_schmidt,
    page_entropy,
    porter_thomas_masses,
    pooled_ratios,
    s_max,
    schmidt_spectra,
    surmise_mean,
    symmetric_coefficient_check,
    wishart_reference_ratios,
)

log = logging.getLogger(__name__)

RECORDS = "records.jsonl"
GRAPE_RECORDS = "grape_results.jsonl"
WISHART_STREAM = 2
TARGET_STREAM = 3


# --- shared state for workers ----------------------------------------------


@lru_cache(maxsize=None)
def _system(n_atoms: int, spacing: float, c6: float):
    basis = dihedral_orbits(n_atoms)
    return basis, build_sector_operators(basis, PhysicalParams(build_ring(n_atoms, spacing), c6))


def _options(cfg: ExperimentConfig) -> AnalysisOptions:
    a = cfg.data["analysis"]
    mask = a["bipartition"]
    return AnalysisOptions(a["entropy_bins"], a["omega_bins"], float(a["omega_upper"]), a["ratio_bins"],
                           float(a["keep_central"]), a["smax_convention"],
                           tuple(sorted(mask)) if mask is not None else None, a["store_omegas"])


def _constraints(cfg: ExperimentConfig, t_final: float) -> PulseConstraints:
    p = cfg.data["pulses"]
    return PulseConstraints(float(p["omega_max"]), float(p["delta_max"]), int(p["m_segments"]), float(t_final))


# --- state files -------------------------------------------------------------


def save_state(path, state: np.ndarray, basis: SectorBasis, meta: dict | None = None) -> Path:
    """Write a sector state as JSON (real and imaginary parts listed separately)."""
    path = Path(path)
    doc = {"n_atoms": basis.n_atoms, "basis": "sector", "dim": basis.dim,
           "real": np.real(state).tolist(), "imag": np.imag(state).tolist(), "meta": meta or {}}
    _atomic_write(path, json.dumps(doc, indent=1) + "\n")
    return path


def load_state(path) -> tuple[np.ndarray, SectorBasis, dict]:
    """Read a state file; full-space states are projected onto the symmetric sector."""
    doc = json.loads(Path(path).read_text())
    try:
        n = int(doc["n_atoms"])
        amp = np.asarray(doc["real"], dtype=float) + 1j * np.asarray(doc.get("imag", [0.0] * len(doc["real"])))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed state file ({exc})") from None
    basis = dihedral_orbits(n)
    kind = doc.get("basis", "sector")
    if kind == "full":
        if amp.size != 1 << n:
            raise ValueError(f"{path}: expected {1 << n} amplitudes, got {amp.size}")
        sector = project(amp, basis)
        lost = np.linalg.norm(amp) ** 2 - np.linalg.norm(sector) ** 2
        if lost > 1e-8:
            raise ValueError(f"{path}: state has weight {lost:.3g} outside the symmetric sector")
        amp = sector
    elif kind != "sector":
        raise ValueError(f"{path}: unknown basis {kind!r}")
    if amp.size != basis.dim:
        raise ValueError(f"{path}: expected {basis.dim} sector amplitudes, got {amp.size}")
    norm = np.linalg.norm(amp)
    if abs(norm - 1.0) > 1e-8:
        raise ValueError(f"{path}: state is not normalised (norm {norm:.12g})")
    return amp, basis, doc.get("meta", {})


# --- file helpers ------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RecordWriter:
    """Append-only JSON-lines file; each record goes out in a single write call."""

    def __init__(self, path: Path, config_hash: str, resume: bool, key=("cell", "sample_id")):
        self.path = path
        self.key = key
        self.done: set = set()
        if resume and path.exists():
            self._recover(config_hash)
        else:
            path.write_text("")
        self._fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)

    def _recover(self, config_hash: str) -> None:
        data = self.path.read_bytes()
        good = 0
        for line in data.splitlines(keepends=True):
            if not line.endswith(b"\n"):
                break
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                break
            if row.get("config_hash") != config_hash:
                raise RuntimeError(f"{self.path} was written by a different configuration "
                                   f"({row.get('config_hash')} != {config_hash}); rerun without --resume")
            self.done.add(tuple(row[k] for k in self.key))
            good += len(line)
        if good < len(data):
            log.warning("dropping %d bytes of incomplete output at the end of %s", len(data) - good, self.path)
            with open(self.path, "r+b") as fh:
                fh.truncate(good)

    def append(self, row: dict) -> None:
        os.write(self._fd, (json.dumps(row) + "\n").encode())

    def close(self) -> None:
        os.fsync(self._fd)
        os.close(self._fd)


def read_records(path: Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


class Outputs:
    """Collects artifacts and writes CSVs with a provenance preamble."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.dir = out_dir
        self.artifacts: list[dict] = []

    def preamble(self) -> list[str]:
        d = self.cfg.data
        return [
            f"# config_hash={self.cfg.hash}",
            f"# master_seed={self.cfg.seed}",
            f"# experiment={self.cfg.kind}",
            f"# n_atoms={d['physics']['n_atoms']}",
            f"# spacings_um={json.dumps(d['physics']['spacings'])}",
            f"# t_finals_us={json.dumps(d['pulses']['t_finals'])}",
            f"# m_segments={d['pulses']['m_segments']}",
        ]

    def csv(self, name: str, header: list[str], rows: list) -> Path:
        buf = io.StringIO()
        buf.write("\n".join(self.preamble()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header + ["config_hash", "master_seed"])
        for r in rows:
            w.writerow([_fmt(v) for v in r] + [self.cfg.hash, self.cfg.seed])
        path = self.dir / name
        _atomic_write(path, buf.getvalue())
        self.register(path, len(rows))
        return path

    def json(self, name: str, doc) -> Path:
        path = self.dir / name
        _atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
        self.register(path)
        return path

    def register(self, path: Path, rows: int | None = None) -> None:
        entry = {"path": str(path.relative_to(self.dir)), "config_hash": self.cfg.hash}
        if rows is not None:
            entry["rows"] = rows
        self.artifacts.append(entry)

    def manifest(self, extra: dict | None = None) -> Path:
        for a in self.artifacts:
            a["sha256"] = _sha256(self.dir / a["path"])
        doc = {
            "config_hash": self.cfg.hash,
            "master_seed": self.cfg.seed,
            "experiment": self.cfg.kind,
            "version": __version__,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "config": self.cfg.resolved(),
            "warnings": list(self.cfg.warnings),
            "artifacts": self.artifacts,
        }
        doc.update(extra or {})
        path = self.dir / "manifest.json"
        _atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# --- pool plumbing -----------------------------------------------------------


def _map_ordered(func, tasks, workers: int):
    """Yield ``func(task)`` in task order using up to ``workers`` processes."""
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        for t in tasks:
            yield func(t)
        return
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
    with ctx.Pool(min(workers, len(tasks))) as pool:
        yield from pool.imap(func, tasks)


# --- ensemble-type experiments ---------------------------------------------


def _ensemble_unit(task):
    source, seed, cell, ids, n, spacing, c6, constraints, options = task
    basis, ops = _system(n, spacing if spacing is not None else 1.0, c6)
    if source == "haar":
        states = haar_states(seed, cell, ids, basis)
    else:
        states = pulse_states(seed, cell, ids, basis, ops, constraints)
    return ids, analyze_states(states, basis, options)


def _cells(cfg: ExperimentConfig) -> list[dict]:
    """Pulse cells over the (d, T_f) grid plus the Haar-sector reference cell."""
    d = cfg.data
    cells = []
    if cfg.kind not in ("haar-baseline", "ratio-stats"):
        grid = itertools.product(d["physics"]["spacings"], d["pulses"]["t_finals"])
        for i, (spacing, tf) in enumerate(grid):
            cells.append({"cell": i, "source": "pulse", "spacing": float(spacing), "t_final": float(tf),
                          "samples": d["samples"]})
    ref = d["samples"] if cfg.kind in ("haar-baseline", "ratio-stats") else d["analysis"]["reference_samples"]
    cells.append({"cell": 0, "source": "haar", "spacing": None, "t_final": None, "samples": ref})
    return cells


def _generate(cfg: ExperimentConfig, out: Outputs, resume: bool, workers: int) -> list[dict]:
    d = cfg.data
    n, c6 = d["physics"]["n_atoms"], float(d["physics"]["c6"])
    options = _options(cfg)
    writer = RecordWriter(out.dir / RECORDS, cfg.hash, resume, key=("source", "cell", "sample_id"))
    cells = _cells(cfg)
    tasks, meta = [], []
    chunk = d["chunk_size"]
    for c in cells:
        todo = [i for i in range(c["samples"]) if (c["source"], c["cell"], i) not in writer.done]
        for start in range(0, len(todo), chunk):
            ids = todo[start:start + chunk]
            constraints = _constraints(cfg, c["t_final"]) if c["source"] == "pulse" else None
            tasks.append((c["source"], cfg.seed, c["cell"], ids, n, c["spacing"], c6, constraints, options))
            meta.append(c)
    if writer.done:
        log.info("resuming: %d records already present, %d units to run", len(writer.done), len(tasks))
    try:
        for c, (ids, rows) in zip(meta, _map_ordered(_ensemble_unit, tasks, workers)):
            for i, row in zip(ids, rows):
                record = {"config_hash": cfg.hash, "master_seed": cfg.seed, "source": c["source"],
                          "cell": c["cell"], "sample_id": i, "spacing": c["spacing"], "t_final": c["t_final"]}
                record.update(row)
                writer.append(record)
    finally:
        writer.close()
    out.register(out.dir / RECORDS, sum(c["samples"] for c in cells))
    return cells


def _group(rows: list[dict]) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["source"], r["cell"]), []).append(r)
    for v in groups.values():
        v.sort(key=lambda r: r["sample_id"])
    return groups


def _ensemble_outputs(cfg: ExperimentConfig, out: Outputs, cells: list[dict]) -> dict:
    options = _options(cfg)
    groups = _group(read_records(out.dir / RECORDS))
    summaries = {}
    for c in cells:
        summaries[(c["source"], c["cell"])] = CellSummary.from_rows(groups[(c["source"], c["cell"])], options)
    haar = summaries[("haar", 0)]

    header = ["source", "cell", "spacing_um", "t_final_us", "n_samples", "mean_entropy",
              "median_S_norm", "p16_S_norm", "p84_S_norm", "median_nn", "p16_nn", "p84_nn",
              "median_density", "p16_density", "p84_density", "mean_gap_ratio",
              "js_entropy_vs_haar", "js_porter_thomas", "js_ratio_vs_beta2"]
    rows = []
    for c in cells:
        key = (c["source"], c["cell"])
        s = summaries[key]
        m = s.medians
        mean_entropy = float(np.mean([r["entropy"] for r in groups[key]]))
        rows.append([c["source"], c["cell"], c["spacing"], c["t_final"], s.n_samples, mean_entropy,
                     m["normalized_entropy"]["median"], m["normalized_entropy"]["p16"],
                     m["normalized_entropy"]["p84"], m["nn_correlation"]["median"], m["nn_correlation"]["p16"],
                     m["nn_correlation"]["p84"], m["mean_excitation"]["median"], m["mean_excitation"]["p16"],
                     m["mean_excitation"]["p84"], m["gap_ratio_mean"], s.js_entropy(haar),
                     s.js_porter_thomas(), s.js_ratio(2)])
    out.csv("summary.csv", header, rows)

    pt = porter_thomas_masses(options.omega_edges)
    wd = ratio_masses(options.ratio_edges, 2)
    hist_rows = []
    for c in cells:
        s = summaries[(c["source"], c["cell"])]
        for name, h, ref in (("normalized_entropy", s.entropy, haar.entropy.masses()),
                             ("omega", s.omega, pt), ("gap_ratio", s.ratio, np.append(wd, 0.0))):
            masses = h.masses()
            edges = h.bin_edges
            for b in range(len(edges) - 1):
                hist_rows.append([c["source"], c["cell"], c["spacing"], c["t_final"], name, float(edges[b]),
                                  float(edges[b + 1]), int(h.counts[b]), float(masses[b]), float(ref[b])])
            hist_rows.append([c["source"], c["cell"], c["spacing"], c["t_final"], name, float(edges[-1]), "inf",
                              int(h.overflow), float(masses[-1]), float(ref[-1])])
    out.csv("histograms.csv", ["source", "cell", "spacing_um", "t_final_us", "quantity", "bin_lo", "bin_hi",
                               "count", "mass", "reference_mass"], hist_rows)
    return summaries


def _blockade_outputs(cfg: ExperimentConfig, out: Outputs, cells: list[dict], summaries: dict) -> None:
    p = cfg.data["pulses"]
    c6 = float(cfg.data["physics"]["c6"])
    rows = []
    for c in cells:
        if c["source"] != "pulse":
            continue
        model = EtaModel.at_distance(c["spacing"], c6, float(p["omega_max"]), float(p["delta_max"]))
        m = summaries[("pulse", c["cell"])].medians["nn_correlation"]
        rows.append([c["spacing"], c["t_final"], m["median"], m["p16"], m["p84"], model.v, model.case,
                     model.eta_minus, model.eta_plus])
    out.csv("blockade.csv", ["spacing_um", "t_final_us", "median_nn", "p16_nn", "p84_nn", "v_nn", "case",
                             "eta_minus", "eta_plus"], rows)
    out.json("crossover.json", {"d_tilde_um": characteristic_distance(c6, float(p["omega_max"]),
                                                                      float(p["delta_max"]))})


def _haar_outputs(cfg: ExperimentConfig, out: Outputs, summaries: dict) -> None:
    n = cfg.data["physics"]["n_atoms"]
    part = _options(cfg).partition(n)
    rows = read_records(out.dir / RECORDS)
    ent = np.array([r["entropy"] for r in rows if r["source"] == "haar"])
    d_a, d_b = 1 << len(part.sites), 1 << len(part.complement)
    smax = s_max(n, cfg.data["analysis"]["smax_convention"])
    out.json("baseline.json", {
        "bipartition": list(part.sites),
        "mean_entropy": float(ent.mean()),
        "mean_normalized_entropy": float(ent.mean() / smax),
        "page_entropy_full_space": page_entropy(d_a, d_b),
        "page_normalized_full_space": page_entropy(d_a, d_b) / smax,
        "mean_gap_ratio": summaries[("haar", 0)].medians["gap_ratio_mean"],
    })


def _ratio_outputs(cfg: ExperimentConfig, out: Outputs, summaries: dict) -> None:
    n = cfg.data["physics"]["n_atoms"]
    a = cfg.data["analysis"]
    part = _options(cfg).partition(n)
    d_a, d_b = 1 << len(part.sites), 1 << len(part.complement)
    edges = _options(cfg).ratio_edges
    rows, hist_rows = [], []
    sources = [("haar-sector", None)]
    for k, ens in enumerate(("complex", "real", "poisson")):
        sources.append((f"wishart-{ens}", wishart_reference_ratios(sample_rng(cfg.seed, WISHART_STREAM, k), d_a, d_b,
                                                                    ens, a["reference_samples"],
                                                                    float(a["keep_central"]))))
    for name, ratios in sources:
        h = summaries[("haar", 0)].ratio if ratios is None else Histogram.from_samples(ratios, edges)
        mean = summaries[("haar", 0)].medians["gap_ratio_mean"] if ratios is None else float(np.mean(ratios))
        rows.append([name, int(h.total), mean, surmise_mean(1), surmise_mean(2), POISSON_RATIO_MEAN])
        dens = h.density
        for b in range(len(edges) - 1):
            hist_rows.append([name, float(edges[b]), float(edges[b + 1]), int(h.counts[b]), float(dens[b])])
    out.csv("ratio_stats.csv", ["source", "n_ratios", "mean_ratio", "surmise_beta1", "surmise_beta2",
                                "poisson_mean"], rows)
    out.csv("ratio_histograms.csv", ["source", "bin_lo", "bin_hi", "count", "density"], hist_rows)


# --- eta distribution ------------------------------------------------------


def _run_eta(cfg: ExperimentConfig, out: Outputs) -> None:
    d = cfg.data
    c6 = float(d["physics"]["c6"])
    om, dm = float(d["pulses"]["omega_max"]), float(d["pulses"]["delta_max"])
    summary = []
    for k, spacing in enumerate(d["physics"]["spacings"]):
        model = EtaModel.at_distance(float(spacing), c6, om, dm)
        eta, pdf, cdf = eta_grid(model, float(d["analysis"]["eta_max"]), d["analysis"]["eta_points"])
        out.csv(f"eta_d{spacing:g}.csv", ["eta", "pdf", "cdf"],
                [[float(x), float(p), float(c)] for x, p, c in zip(eta, pdf, cdf)])
        samples = np.sort(sample_eta(sample_rng(cfg.seed, 4, k), model, d["samples"]))
        ecdf = np.arange(1, len(samples) + 1) / len(samples)
        model_cdf = eta_cdf(samples, model)
        ks = float(max(np.max(ecdf - model_cdf), np.max(model_cdf - ecdf + 1 / len(samples))))
        summary.append([float(spacing), model.v, model.case, model.eta_minus, model.eta_plus, model.plateau,
                        d["samples"], ks])
    out.csv("eta_summary.csv", ["spacing_um", "v_nn", "case", "eta_minus", "eta_plus", "plateau_density",
                                "mc_samples", "ks_distance"], summary)
    out.json("crossover.json", {"d_tilde_um": characteristic_distance(c6, om, dm)})


# --- bipartition scan --------------------------------------------------------


def _mask_orbit_representatives(n: int, size: int) -> list[tuple[int, ...]]:
    perms = site_permutations(n)
    reps = set()
    for sites in itertools.combinations(range(n), size):
        images = [tuple(sorted(int(p[s]) for s in sites)) for p in perms]
        reps.add(min(images))
    return sorted(reps)


def _run_bipartition_scan(cfg: ExperimentConfig, out: Outputs, resume: bool, workers: int) -> None:
    n = cfg.data["physics"]["n_atoms"]
    _generate(cfg, out, resume, workers)
    basis = dihedral_orbits(n)
    keep = float(cfg.data["analysis"]["keep_central"])
    rows = [r for r in read_records(out.dir / RECORDS) if r["source"] == "haar"]
    rows.sort(key=lambda r: r["sample_id"])
    states = haar_states(cfg.seed, 0, [r["sample_id"] for r in rows], basis)
    full = embed(states, basis)
    table = []
    for sites in _mask_orbit_representatives(n, n // 2):
        part = Bipartition(n, sites)
        flags = classify_bipartition(part)
        lam = schmidt_spectra(full, part)
        ratios = pooled_ratios(lam, keep)
        sym = max(symmetric_coefficient_check(psi, part) for psi in full[:200]) if flags.exchange else float("nan")
        table.append([part.mask, "-".join(map(str, sites)), flags.exchange, flags.internal, flags.label,
                      float(np.mean(entropy_from_schmidt(lam))), float(ratios.mean()), int(ratios.size), sym])
    out.csv("bipartition_scan.csv", ["mask", "sites", "exchange_symmetric", "internal_symmetric", "label",
                                     "mean_entropy", "mean_gap_ratio", "n_ratios", "max_abs_c_minus_ct"], table)


# --- optimal control ---------------------------------------------------------


def _grape_unit(task):
    target_id, seed, amp, n, spacing, c6, gcfg, meta = task
    basis, ops = _system(n, spacing, c6)
    result = optimize(np.asarray(amp), gcfg, ops, default_initial(basis), master_seed=seed, target_id=target_id,
                      target_meta=meta)
    return target_id, result.to_json()


def _targets(cfg: ExperimentConfig, out: Outputs) -> list[dict]:
    d = cfg.data
    g = d["grape"]
    n, c6 = d["physics"]["n_atoms"], float(d["physics"]["c6"])
    basis, ops = _system(n, float(g["target_spacing"]), c6)
    options = _options(cfg)
    pool = []
    if cfg.kind == "grape-benchmark":
        constraints = _constraints(cfg, float(g["t_max"]))
        states = pulse_states(cfg.seed, TARGET_STREAM, range(g["n_targets"]), basis, ops, constraints)
        stats = analyze_states(states, basis, options)
        for i, (psi, st) in enumerate(zip(states, stats)):
            pool.append({"state": psi, "normalized_entropy": st["normalized_entropy"],
                         "generation_t_final": float(g["t_max"]), "pool_index": i})
        selected = list(range(len(pool)))
        empty: list = []
        edges = None
    else:
        groups = []
        for k, tf in enumerate(g["target_t_finals"]):
            states = pulse_states(cfg.seed, TARGET_STREAM + 1 + k, range(g["pool_size"]), basis, ops,
                                  _constraints(cfg, float(tf)))
            stats = analyze_states(states, basis, options)
            for i, (psi, st) in enumerate(zip(states, stats)):
                pool.append({"state": psi, "normalized_entropy": st["normalized_entropy"],
                             "generation_t_final": float(tf), "pool_index": i})
                groups.append(k)
        selected, empty, edges = stratified_targets([p["normalized_entropy"] for p in pool], groups,
                                                    n_bins=g["n_bins"], per_bin=g["per_bin"])
        if empty:
            log.warning("%d of %d entropy bins are empty: %s", len(empty), g["n_bins"], empty)
    targets = []
    tdir = out.dir / "targets"
    tdir.mkdir(exist_ok=True)
    for tid, idx in enumerate(selected):
        p = pool[idx]
        meta = {"target_id": tid, "normalized_entropy": p["normalized_entropy"],
                "generation_t_final": p["generation_t_final"], "generation_spacing": float(g["target_spacing"]),
                "pool_index": p["pool_index"]}
        path = save_state(tdir / f"target_{tid:04d}.json", p["state"], basis, meta)
        out.register(path)
        targets.append({"target_id": tid, "state": p["state"], "meta": meta})
    out.json("selection.json", {"selected_pool_indices": [int(i) for i in selected], "empty_bins": empty,
                                "bin_edges": None if edges is None else [float(e) for e in edges]})
    return targets


def _run_grape(cfg: ExperimentConfig, out: Outputs, resume: bool, workers: int) -> None:
    d = cfg.data
    n, c6 = d["physics"]["n_atoms"], float(d["physics"]["c6"])
    spacing = float(d["physics"]["spacings"][0])
    gcfg: GrapeConfig = cfg.grape_config()
    targets = _targets(cfg, out)
    writer = RecordWriter(out.dir / GRAPE_RECORDS, cfg.hash, resume, key=("target_id",))
    tasks = [(t["target_id"], cfg.seed, t["state"], n, spacing, c6, gcfg, t["meta"])
             for t in targets if (t["target_id"],) not in writer.done]
    try:
        for tid, doc in _map_ordered(_grape_unit, tasks, workers):
            failed = sum(r["failed"] for r in doc["restarts"])
            if failed:
                log.warning("target %d: %d of %d restarts failed", tid, failed, len(doc["restarts"]))
            row = {"config_hash": cfg.hash, "master_seed": cfg.seed, "target_id": tid,
                   "preparation_spacing": spacing, "t_max": gcfg.t_max}
            row.update(doc)
            writer.append(row)
            log.info("target %d: best infidelity %.3e (t_opt %.3f us)", tid, doc["best_infidelity"], doc["t_opt"])
    finally:
        writer.close()
    out.register(out.dir / GRAPE_RECORDS, len(targets))

    results = sorted(read_records(out.dir / GRAPE_RECORDS), key=lambda r: r["target_id"])
    table = []
    for r in results:
        restarts = r["restarts"]
        table.append([r["target_id"], r["target"]["normalized_entropy"], r["target"]["generation_t_final"],
                      r["best_infidelity"], r["t_opt"], sum(x["converged"] for x in restarts),
                      sum(x["failed"] for x in restarts), len(restarts)])
    out.csv("grape_study.csv", ["target_id", "normalized_entropy", "generation_t_final_us", "best_infidelity",
                                "t_opt_us", "n_restarts_converged", "n_restarts_failed", "n_restarts"], table)
    if results:
        curve = success_curve([r["target"]["normalized_entropy"] for r in results],
                              [r["best_infidelity"] for r in results], float(d["analysis"]["gamma"]),
                              float(d["analysis"]["delta_s"]))
        out.csv("success_curve.csv", ["bin_center", "count", "success_probability", "median_infidelity", "p16",
                                      "p84"],
                [[c["center"], c["count"], c["success_probability"], c["median_infidelity"], c["p16"], c["p84"]]
                 for c in curve])


# --- entry point -------------------------------------------------------------


def run(cfg: ExperimentConfig, resume: bool = False, workers: int | None = None,
        output_dir: str | os.PathLike | None = None) -> Path:
    """Execute ``cfg`` and return the path of the manifest."""
    out_dir = Path(output_dir or cfg.data["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = int(workers or cfg.data["workers"])
    out = Outputs(cfg, out_dir)
    kind = cfg.kind
    log.info("running %s (config %s, seed %d, %d workers) into %s", kind, cfg.hash, cfg.seed, workers, out_dir)
    if kind in ("ensemble", "porter-thomas", "blockade", "haar-baseline", "ratio-stats"):
        cells = _generate(cfg, out, resume, workers)
        summaries = _ensemble_outputs(cfg, out, cells)
        if kind == "blockade":
            _blockade_outputs(cfg, out, cells, summaries)
        elif kind == "haar-baseline":
            _haar_outputs(cfg, out, summaries)
        elif kind == "ratio-stats":
            _ratio_outputs(cfg, out, summaries)
    elif kind == "eta-pdf":
        _run_eta(cfg, out)
    elif kind == "bipartition-scan":
        _run_bipartition_scan(cfg, out, resume, workers)
    else:
        _run_grape(cfg, out, resume, workers)
    return out.manifest()


def grape_single(target_path, spacing: float, c6: float, config: GrapeConfig, seed: int) -> dict:
    """Optimise towards one target file; returns the result document."""
    amp, basis, meta = load_state(target_path)
    _, ops = _system(basis.n_atoms, spacing, c6)
    result = optimize(amp, config, ops, default_initial(basis), master_seed=seed, target_meta=meta)
    doc = result.to_json()
    doc.update({"preparation_spacing": spacing, "t_max": config.t_max, "master_seed": seed})
    return doc
