import csv
import json
from pathlib import Path

import numpy as np
import pytest

from bkmrsim import harness
from bkmrsim.errors import InvalidInputError, ManifestMismatchError
from bkmrsim.harness import (
    TABLE_FILES, RunConfig, cmd_report, cmd_run, derive_seed, run_replicate,
)
from bkmrsim.designs import select_designs
from bkmrsim.simgen import load_params

SMALL = dict(designs=["Normal High", "test-size:method2:sd=15"], regimes=["diagonal"],
             replicates=2, n=40, iterations=100, seed=3)


def outputs(root: Path) -> dict:
    """Contents of every replicate file and table under a result directory."""
    files = sorted(list((root / "designs").rglob("*.json")) + list((root / "tables").glob("*.csv")))
    return {str(p.relative_to(root)): p.read_bytes() for p in files}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "a"
    failures = cmd_run(RunConfig(**SMALL, output=str(out)))
    assert failures == 0
    return out


def test_config_presets():
    cfg = RunConfig(designs=["Normal High"])
    assert (cfg.replicates, cfg.n, cfg.iterations) == (20, 300, 2000)
    cfg = RunConfig(designs=["Normal High"], scale="paper", replicates=3)
    assert (cfg.replicates, cfg.n, cfg.iterations) == (3, 2934, 10000)


@pytest.mark.parametrize("bad", [dict(replicates=0), dict(n=5), dict(workers=0),
                                 dict(scale="huge"), dict(designs=["nope"]),
                                 dict(thresholds=[1.5]), dict(mcmc={"r_prior": "x"})])
def test_config_validation(bad):
    with pytest.raises(InvalidInputError):
        RunConfig(**{**SMALL, **bad})


def test_config_from_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({**SMALL, "output": "x"}))
    cfg = RunConfig.from_file(path, seed=9)
    assert cfg.seed == 9 and cfg.n == 40
    path.write_text(json.dumps({"colour": 1}))
    with pytest.raises(InvalidInputError):
        RunConfig.from_file(path)


def test_derive_seed_is_stable_and_distinct():
    a = derive_seed(0, "diagonal/Normal High", 1)
    assert a == derive_seed(0, "diagonal/Normal High", 1)
    assert a != derive_seed(0, "diagonal/Normal High", 2)
    assert a != derive_seed(1, "diagonal/Normal High", 1)
    assert 0 <= a < 2 ** 63


def test_replicate_is_deterministic():
    cfg = RunConfig(**SMALL)
    d = cfg.selected()[0]
    params = load_params()
    a = run_replicate(d, 0, cfg, params)
    b = run_replicate(d, 0, cfg, params)
    assert a == b
    assert len(a["pips"]) == 5 and all(0 <= p <= 1 for p in a["pips"])


@pytest.mark.parametrize("shared", [True, False])
def test_shared_noise_toggle(shared, monkeypatch):
    cfg = RunConfig(**{**SMALL, "designs": ["Normal High", "Skewed High"], "replicates": 1},
                    shared_noise=shared)
    seen = {}
    real = harness.fit

    def capture(data, mcfg):
        seen[len(seen)] = data
        return real(data, mcfg)

    monkeypatch.setattr(harness, "fit", capture)
    params = load_params()
    designs = cfg.selected()
    for d in designs:
        run_replicate(d, 0, cfg, params)
    eps = [seen[i].y - d.signal(seen[i].column("lead"), seen[i].column("mercury"))
           for i, d in enumerate(designs)]
    assert np.allclose(eps[0], eps[1]) == shared


def test_run_layout(small_run):
    man = json.loads((small_run / "manifest.json").read_text())
    assert set(man["designs"]) == {"diagonal/Normal High",
                                   "diagonal/test-size:method2:sd=15"}
    for entry in man["designs"].values():
        assert entry["status"] == "complete" and entry["completed"] == 2
        assert len(entry["replicate_seeds"]) == 2
    for fname in TABLE_FILES.values():
        assert (small_run / "tables" / fname).exists()
    for rel, digest in man["files"].items():
        assert harness.sha256_file(small_run / rel) == digest


def test_tables_content(small_run):
    with open(small_run / "tables" / "table4_power_diagonal.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["design", "cadmium", "lead", "manganese", "mercury", "selenium"]
    assert rows[1][0] == "Normal High"
    rates = [float(v) for v in rows[1][1:]]
    assert all(v in (0.0, 0.5, 1.0) for v in rates)
    with open(small_run / "tables" / "table1_power_unstructured.csv") as fh:
        assert len(list(csv.reader(fh))) == 1
    with open(small_run / "tables" / "test_size.csv") as fh:
        ts = list(csv.DictReader(fh))
    assert len(ts) == 5 and float(ts[0]["cv"]) == 15.0


def test_rerun_is_byte_identical(small_run, tmp_path):
    out = tmp_path / "b"
    cmd_run(RunConfig(**SMALL, output=str(out)))
    assert outputs(out) == outputs(small_run)


def test_worker_count_invariance(small_run, tmp_path):
    out = tmp_path / "w"
    cmd_run(RunConfig(**SMALL, output=str(out), workers=2))
    assert outputs(out) == outputs(small_run)


def test_resume_skips_completed(small_run, tmp_path, monkeypatch):
    out = tmp_path / "r"
    cfg = RunConfig(**SMALL, output=str(out))
    cmd_run(cfg)
    victim = next((out / "designs").rglob("rep_0001.json"))
    victim.unlink()
    calls = []
    real = harness.run_replicate
    monkeypatch.setattr(harness, "run_replicate",
                        lambda d, r, *a, **k: calls.append((d.design_id, r)) or real(d, r, *a, **k))
    cmd_run(cfg)
    assert len(calls) == 1 and calls[0][1] == 1
    assert outputs(out) == outputs(small_run)


def test_changed_config_invalidates_replicates(tmp_path, monkeypatch):
    out = tmp_path / "c"
    cmd_run(RunConfig(**{**SMALL, "designs": ["Normal High"], "replicates": 1}, output=str(out)))
    calls = []
    real = harness.run_replicate
    monkeypatch.setattr(harness, "run_replicate",
                        lambda *a, **k: calls.append(1) or real(*a, **k))
    cmd_run(RunConfig(**{**SMALL, "designs": ["Normal High"], "replicates": 1, "seed": 4},
                      output=str(out)))
    assert calls == [1]


def test_failed_replicate_is_recorded(tmp_path, monkeypatch):
    out = tmp_path / "f"

    def boom(*a, **k):
        raise FloatingPointError("synthetic failure")

    monkeypatch.setattr(harness, "fit", boom)
    cfg = RunConfig(**{**SMALL, "designs": ["Normal High"]}, output=str(out))
    assert cmd_run(cfg) == 2
    entry = json.loads((out / "manifest.json").read_text())["designs"]["diagonal/Normal High"]
    assert entry["status"] == "incomplete"
    assert "synthetic failure" in entry["failed"]["0"]["error"]
    assert entry["failed"]["0"]["seed"] == derive_seed(3, "diagonal/Normal High", 0)


def test_report_rebuilds_tables(small_run, tmp_path):
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(small_run, copy)
    before = outputs(copy)
    for p in (copy / "tables").glob("*.csv"):
        p.unlink()
    cmd_report(copy)
    assert outputs(copy) == before


def test_report_detects_tampering(small_run, tmp_path):
    import shutil
    copy = tmp_path / "t"
    shutil.copytree(small_run, copy)
    rep = next((copy / "designs").rglob("rep_0000.json"))
    doc = json.loads(rep.read_text())
    doc["pips"][0] = 1.0 - doc["pips"][0]
    rep.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with pytest.raises(ManifestMismatchError, match="checksum"):
        cmd_report(copy)


def test_report_needs_manifest(tmp_path):
    with pytest.raises(ManifestMismatchError):
        cmd_report(tmp_path)


def test_selection_by_glob():
    assert len(select_designs(["test-size:*"], ["diagonal"])) == 27
    cfg = RunConfig(designs=["Skewed*"], regimes=["unstructured"], replicates=1, n=20,
                    iterations=100)
    assert [d.name for d in cfg.selected()] == ["Skewed Low", "Skewed Medium", "Skewed High"]


def test_workers_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.WORKERS_ENV, "1")
    out = tmp_path / "e"
    cfg = RunConfig(**{**SMALL, "designs": ["Normal High"], "replicates": 1}, output=str(out),
                    workers=4)
    assert cmd_run(cfg) == 0
    assert np.isfinite(json.loads(next((out / "designs").rglob("rep_0000.json")).read_text())
                       ["pips"]).all()
