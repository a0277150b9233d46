import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from rydpulse.cli import main
from rydpulse.config import ConfigError, ExperimentConfig, key_line

SMALL = {
    "experiment": "ensemble",
    "seed": 11,
    "samples": 24,
    "chunk_size": 7,
    "physics": {"n_atoms": 7, "spacings": [5.0, 10.0]},
    "pulses": {"t_finals": [1.0, 3.0]},
    "analysis": {"reference_samples": 30},
}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def invoke(*args, env=None):
    result = CliRunner().invoke(main, [str(a) for a in args], env=env or {"RYDPULSE_SEED": ""})
    return result


def data_files(out: Path) -> dict:
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def csv_rows(path):
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


# --- validate -----------------------------------------------------------------


def test_validate_default_prints_resolved_values(tmp_path):
    cfg = write_config(tmp_path, {})
    first = invoke("validate", cfg)
    assert first.exit_code == 0, first.output
    report = json.loads(first.output)
    assert report["resolved"]["bipartition"]["sites"] == [0, 1, 2, 4]
    assert report["resolved"]["bipartition"]["symmetry"] == "no-symmetry"
    assert report["resolved"]["c6"] == pytest.approx(5_420_503.0)
    assert report["resolved"]["alpha"] == 4.0
    assert {"a1", "a2", "a3"} <= set(report["resolved"])
    assert invoke("validate", cfg).output == first.output


def test_zero_spacing_is_an_error_with_line(tmp_path):
    text = '{\n  "seed": 1,\n  "physics": {\n    "spacings": [0]\n  }\n}\n'
    cfg = tmp_path / "bad.json"
    cfg.write_text(text)
    result = invoke("validate", cfg)
    assert result.exit_code != 0
    assert f"{cfg}:4: physics.spacings" in result.output


def test_spacing_outside_band_warns(tmp_path):
    cfg = write_config(tmp_path, {"physics": {"spacings": [12.0]}})
    result = invoke("validate", cfg)
    assert result.exit_code == 0
    assert "warning" in result.output and "12" in result.output


@pytest.mark.parametrize("doc, key", [
    ({"pulses": {"omega_max": -1.0}}, "pulses.omega_max"),
    ({"samples": 0}, "samples"),
    ({"pulses": {"m_segments": 0}}, "pulses.m_segments"),
    ({"physicss": {}}, "physicss"),
    ({"experiment": "nope"}, "experiment"),
    ({"analysis": {"bipartition": [0, 0, 1]}}, "analysis.bipartition"),
])
def test_invalid_values_are_rejected(tmp_path, doc, key):
    cfg = write_config(tmp_path, doc)
    result = invoke("validate", cfg)
    assert result.exit_code != 0
    assert key in result.output


def test_malformed_json_reports_line(tmp_path):
    cfg = tmp_path / "broken.json"
    cfg.write_text('{\n  "seed": 1,\n  "samples": ,\n}\n')
    result = invoke("validate", cfg)
    assert result.exit_code != 0
    assert f"{cfg}:3" in result.output


def test_ring_without_asymmetric_cut_needs_explicit_mask(tmp_path):
    cfg = write_config(tmp_path, {"physics": {"n_atoms": 8}})
    assert invoke("validate", cfg).exit_code != 0
    cfg = write_config(tmp_path, {"physics": {"n_atoms": 8}, "analysis": {"bipartition": [0, 1, 2, 3]}})
    assert invoke("validate", cfg).exit_code == 0


def test_key_line_follows_nesting():
    text = '{\n "a": 1,\n "physics": {\n  "x": 2,\n  "spacings": [1]\n },\n "spacings": 3\n}'
    assert key_line(text, ("physics", "spacings")) == 5
    assert key_line(text, ("missing",)) is None


def test_override_precedence():
    text = json.dumps({"seed": 1})
    assert ExperimentConfig.from_text(text, env={}).seed == 1
    assert ExperimentConfig.from_text(text, env={"RYDPULSE_SEED": "5"}).seed == 5
    assert ExperimentConfig.from_text(text, overrides=["seed=9"], env={"RYDPULSE_SEED": "5"}).seed == 9
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text, env={"RYDPULSE_SEED": "x"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text, overrides=["physics.nope=1"], env={})


def test_hash_ignores_execution_settings():
    a = ExperimentConfig.from_text(json.dumps({"workers": 1, "output_dir": "a"}), env={})
    b = ExperimentConfig.from_text(json.dumps({"workers": 3, "output_dir": "b"}), env={})
    c = ExperimentConfig.from_text(json.dumps({"samples": 7}), env={})
    assert a.hash == b.hash != c.hash


# --- run ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ref")
    cfg = write_config(tmp, SMALL)
    out = tmp / "out"
    result = invoke("run", cfg, "--out", out)
    assert result.exit_code == 0, result.output
    return cfg, out


def test_run_writes_manifest_with_hashes(reference_run):
    _, out = reference_run
    manifest = json.loads((out / "manifest.json").read_text())
    cfg_hash = manifest["config_hash"]
    listed = {a["path"] for a in manifest["artifacts"]}
    assert listed == set(data_files(out))
    for a in manifest["artifacts"]:
        assert a["config_hash"] == cfg_hash
        assert a["sha256"] == hashlib.sha256((out / a["path"]).read_bytes()).hexdigest()


def test_every_row_carries_provenance(reference_run):
    _, out = reference_run
    manifest = json.loads((out / "manifest.json").read_text())
    records = [json.loads(l) for l in (out / "records.jsonl").read_text().splitlines()]
    assert len(records) == 4 * SMALL["samples"] + SMALL["analysis"]["reference_samples"]
    assert all(r["config_hash"] == manifest["config_hash"] and r["master_seed"] == 11 for r in records)
    assert len({(r["source"], r["cell"], r["sample_id"]) for r in records}) == len(records)
    for name in ("summary.csv", "histograms.csv"):
        rows = csv_rows(out / name)
        assert rows and all(r["config_hash"] == manifest["config_hash"] and r["master_seed"] == "11" for r in rows)


def test_rerun_is_byte_identical(reference_run, tmp_path):
    cfg, out = reference_run
    again = tmp_path / "again"
    assert invoke("run", cfg, "--out", again).exit_code == 0
    assert data_files(again) == data_files(out)


def test_worker_count_does_not_change_data(reference_run, tmp_path):
    cfg, out = reference_run
    par = tmp_path / "par"
    result = invoke("run", cfg, "--out", par, "--workers", 2)
    assert result.exit_code == 0, result.output
    assert data_files(par) == data_files(out)


def test_resume_after_truncation(reference_run, tmp_path):
    cfg, out = reference_run
    part = tmp_path / "part"
    part.mkdir()
    full = (out / "records.jsonl").read_bytes()
    lines = full.splitlines(keepends=True)
    # keep 40 complete records and half of the next one, as a crash would
    (part / "records.jsonl").write_bytes(b"".join(lines[:40]) + lines[40][: len(lines[40]) // 2])
    result = invoke("run", cfg, "--out", part, "--resume")
    assert result.exit_code == 0, result.output
    assert data_files(part) == data_files(out)


def test_resume_refuses_other_config(reference_run, tmp_path):
    cfg, out = reference_run
    part = tmp_path / "other"
    part.mkdir()
    (part / "records.jsonl").write_bytes((out / "records.jsonl").read_bytes().splitlines(keepends=True)[0])
    result = invoke("run", cfg, "--out", part, "--resume", "--set", "seed=12")
    assert result.exit_code != 0
    assert "different configuration" in result.output


def test_seed_from_environment(tmp_path):
    doc = dict(SMALL, experiment="haar-baseline", samples=5)
    cfg = write_config(tmp_path, doc)
    outs = {}
    for label, env in (("file", {"RYDPULSE_SEED": ""}), ("env", {"RYDPULSE_SEED": "77"})):
        outs[label] = tmp_path / label
        assert invoke("run", cfg, "--out", outs[label], env=env).exit_code == 0
    seeds = {k: json.loads((v / "manifest.json").read_text())["master_seed"] for k, v in outs.items()}
    assert seeds == {"file": 11, "env": 77}
    assert (outs["file"] / "records.jsonl").read_bytes() != (outs["env"] / "records.jsonl").read_bytes()
    flag = tmp_path / "flag"
    assert invoke("run", cfg, "--out", flag, "--seed", 5, env={"RYDPULSE_SEED": "77"}).exit_code == 0
    assert json.loads((flag / "manifest.json").read_text())["master_seed"] == 5


@pytest.mark.parametrize("kind, expected", [
    ("haar-baseline", {"baseline.json", "summary.csv"}),
    ("ratio-stats", {"ratio_stats.csv", "ratio_histograms.csv"}),
    ("porter-thomas", {"summary.csv", "histograms.csv"}),
    ("blockade", {"blockade.csv", "crossover.json"}),
    ("eta-pdf", {"eta_d5.csv", "eta_d10.csv", "eta_summary.csv", "crossover.json"}),
    ("bipartition-scan", {"bipartition_scan.csv"}),
])
def test_each_kind_produces_its_tables(tmp_path, kind, expected):
    cfg = write_config(tmp_path, dict(SMALL, experiment=kind, samples=8))
    out = tmp_path / "o"
    result = invoke("run", cfg, "--out", out)
    assert result.exit_code == 0, result.output
    assert expected <= set(data_files(out))


def test_grape_kinds_and_single_target(tmp_path):
    doc = {"experiment": "grape-benchmark", "seed": 2, "physics": {"n_atoms": 7, "spacings": [10.0]},
           "grape": {"n_targets": 2, "n_restarts": 2, "max_iters": 15, "t_max": 2.0}}
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "g"
    result = invoke("run", cfg, "--out", out)
    assert result.exit_code == 0, result.output
    rows = csv_rows(out / "grape_study.csv")
    assert [r["target_id"] for r in rows] == ["0", "1"]
    assert all(0.0 <= float(r["best_infidelity"]) <= 1.0 for r in rows)

    target = out / "targets" / "target_0000.json"
    single = tmp_path / "single.json"
    result = invoke("grape", "--target", target, "--restarts", 2, "--max-iters", 15, "--t-max", 2.0,
                    "--seed", 2, "--out", single)
    assert result.exit_code == 0, result.output
    doc = json.loads(single.read_text())
    assert len(doc["restarts"]) == 2
    # same seed, target id and settings as target 0 of the run
    recorded = json.loads((out / "grape_results.jsonl").read_text().splitlines()[0])
    assert doc["best_infidelity"] == pytest.approx(recorded["best_infidelity"], rel=1e-12)

    study = {"experiment": "grape-study", "seed": 2, "physics": {"n_atoms": 7},
             "grape": {"pool_size": 20, "n_bins": 3, "n_restarts": 1, "max_iters": 5, "t_max": 2.0,
                       "target_t_finals": [1.0, 2.0]}}
    cfg = write_config(tmp_path, study, "study.json")
    out = tmp_path / "s"
    result = invoke("run", cfg, "--out", out)
    assert result.exit_code == 0, result.output
    assert {"success_curve.csv", "selection.json", "grape_study.csv"} <= set(data_files(out))


def test_grape_accepts_full_space_state(tmp_path):
    from rydpulse.geometry import dihedral_orbits, embed
    from rydpulse.runner import load_state

    n = 5
    basis = dihedral_orbits(n)
    rng = np.random.default_rng(0)
    amp = rng.normal(size=basis.dim) + 1j * rng.normal(size=basis.dim)
    amp /= np.linalg.norm(amp)
    full = embed(amp, basis)
    path = tmp_path / "full.json"
    path.write_text(json.dumps({"n_atoms": n, "basis": "full", "real": full.real.tolist(),
                                "imag": full.imag.tolist()}))
    loaded, _, _ = load_state(path)
    assert np.allclose(loaded, amp, atol=1e-12)
    result = invoke("grape", "--target", path, "--restarts", 1, "--max-iters", 5)
    assert result.exit_code == 0, result.output

    broken = full.copy()
    broken[1] += 0.3  # breaks the ring symmetry
    broken /= np.linalg.norm(broken)
    path.write_text(json.dumps({"n_atoms": n, "basis": "full", "real": broken.real.tolist(),
                                "imag": broken.imag.tolist()}))
    result = invoke("grape", "--target", path, "--restarts", 1, "--max-iters", 5)
    assert result.exit_code != 0


# --- eta ----------------------------------------------------------------------


def test_eta_csv_on_stdout():
    result = invoke("eta", "--d", 7, "--d", 10, "--points", 2001, "--eta-max", 40)
    assert result.exit_code == 0, result.output
    rows = list(csv.DictReader(io.StringIO(result.output)))
    assert {r["spacing_um"] for r in rows} == {"7.0", "10.0"}
    for d in ("7.0", "10.0"):
        cdf = np.array([float(r["cdf"]) for r in rows if r["spacing_um"] == d])
        assert cdf[0] == 0.0 and np.all(np.diff(cdf) >= -1e-15) and cdf[-1] > 0.95


def test_eta_rejects_bad_spacing():
    assert invoke("eta", "--d", 0).exit_code != 0
