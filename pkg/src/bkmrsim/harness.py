"""Simulation-study orchestration: replicates, persistence, tables, manifest.

Layout of a result directory::

    config.json               effective RunConfig
    manifest.json             seeds, status, timing, sha256 of every result file
    designs/<slug>/rep_0000.json   per-replicate PIPs (+ optional chain files)
    tables/*.csv              power / confusion / metrics / test-size tables

Every replicate's RNG streams are derived from (master seed, design id,
replicate index), so results do not depend on worker count or scheduling.
Replicate files are written atomically and reused on rerun, which makes an
interrupted run resumable.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .designs import (
    NoiseSpec, PowerDesign, TestSizeDesign, build_design_registry,
    generate_null_response, generate_signal_response, select_designs,
)
from .errors import InvalidInputError, ManifestMismatchError
from .evaluation import (
    DEFAULT_THRESHOLD_GRID, DetectionRule, confusion_from_rates, detect,
    metrics_from_confusion, rejection_rates, test_size_report,
)
from .sampler import McmcConfig, fit, posterior_inclusion_probabilities
from .simgen import REGIMES, SimulationSpec, StratumParams, load_params, simulate_dataset

logger = logging.getLogger(__name__)

WORKERS_ENV = "BKMRSIM_WORKERS"
PRESETS = {
    "desk": {"replicates": 20, "n": 300, "iterations": 2000},
    "paper": {"replicates": 100, "n": 2934, "iterations": 10000},
}
# sampler defaults used by the harness; see README for the prior choices
DEFAULT_MCMC = {"r_prior": "invunif", "birth_proposal": "prior"}


@dataclass
class RunConfig:
    designs: List[str] = field(default_factory=lambda: ["*"])
    regimes: Optional[List[str]] = None
    scale: str = "desk"
    replicates: Optional[int] = None
    n: Optional[int] = None
    iterations: Optional[int] = None
    burn_in: Optional[int] = None
    seed: int = 0
    workers: int = 1
    output: str = "results"
    thresholds: List[float] = field(default_factory=lambda: [0.5])
    shared_noise: bool = False
    noise_sd: float = 2.0
    params_path: Optional[str] = None
    save_chains: bool = False
    mcmc: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scale not in PRESETS:
            raise InvalidInputError(f"scale must be one of {sorted(PRESETS)}")
        for k, v in PRESETS[self.scale].items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        if isinstance(self.designs, str):
            self.designs = [self.designs]
        if isinstance(self.regimes, str):
            self.regimes = [self.regimes]
        if self.replicates < 1:
            raise InvalidInputError("replicates must be >= 1")
        if self.n < 10:
            raise InvalidInputError("n must be >= 10")
        if self.iterations < 100:
            raise InvalidInputError("iterations must be >= 100")
        if self.workers < 1:
            raise InvalidInputError("workers must be >= 1")
        if not self.thresholds:
            raise InvalidInputError("at least one detection threshold is required")
        self.thresholds = [DetectionRule(float(t)).pip_threshold for t in self.thresholds]
        self.selected()  # every pattern must match the registry
        self.mcmc_config(0)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        doc = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**doc)

    def selected(self):
        return select_designs(self.designs, self.regimes)

    def mcmc_config(self, seed: int) -> McmcConfig:
        opts = {**DEFAULT_MCMC, **self.mcmc}
        return McmcConfig(iterations=self.iterations, burn_in=self.burn_in, seed=seed, **opts)

    def fingerprint(self) -> str:
        """Hash of every input that affects replicate results."""
        keys = ("n", "iterations", "burn_in", "seed", "shared_noise", "noise_sd", "mcmc")
        doc = {k: getattr(self, k) for k in keys}
        doc["mcmc_defaults"] = DEFAULT_MCMC
        doc["params"] = {k: p.to_dict() for k, p in load_params(self.params_path).items()}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labelled parts."""
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- one replicate ----------------------------------------------------------

def run_replicate(design, replicate: int, config: RunConfig,
                  params: Dict[str, StratumParams], chain_dir: Optional[Path] = None) -> dict:
    """Generate exposures and response, fit, and summarise one replicate."""
    seed = derive_seed(config.seed, design.design_id, replicate)
    exposure_ss, response_ss, mcmc_ss = np.random.SeedSequence(seed).spawn(3)
    data = simulate_dataset(params, SimulationSpec.with_total(config.n, design.regime),
                            np.random.default_rng(exposure_ss))
    if isinstance(design, TestSizeDesign):
        y = generate_null_response(data.n, design, np.random.default_rng(response_ss))
    else:
        noise = NoiseSpec(sd=config.noise_sd)
        eps = None
        if config.shared_noise:
            noise_rng = np.random.default_rng(
                derive_seed(config.seed, "noise", design.regime, replicate))
            eps = noise_rng.normal(noise.mean, noise.sd, size=data.n)
        y = generate_signal_response(design, data.column("lead"), data.column("mercury"),
                                     noise, np.random.default_rng(response_ss), eps=eps)
    mcmc_seed = int(mcmc_ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
    mcfg = config.mcmc_config(mcmc_seed)
    with threadpool_limits(1):
        chain = fit(data.with_response(y), mcfg)
    if chain_dir is not None:
        chain.save(chain_dir / f"chain_{replicate:04d}.csv")
    pips = posterior_inclusion_probabilities(chain)
    return {
        "design": design.design_id,
        "replicate": replicate,
        "seed": seed,
        "mcmc_seed": mcmc_seed,
        "names": list(data.names),
        "pips": [float(p) for p in pips],
        "acceptance_rates": {k: (None if np.isnan(v) else v)
                             for k, v in chain.acceptance_rates().items()},
        "fingerprint": config.fingerprint(),
    }


def _task(args):
    design, replicate, config, params, chain_dir = args
    t0 = time.perf_counter()
    try:
        result = run_replicate(design, replicate, config, params, chain_dir)
        return design.design_id, replicate, result, None, time.perf_counter() - t0
    except Exception as exc:  # recorded in the manifest; the run continues
        logger.exception("replicate %s #%d failed", design.design_id, replicate)
        return design.design_id, replicate, None, f"{type(exc).__name__}: {exc}", \
            time.perf_counter() - t0


# --- run --------------------------------------------------------------------

def _replicate_path(out: Path, design, replicate: int) -> Path:
    return out / "designs" / design.slug / f"rep_{replicate:04d}.json"


def _load_existing(path: Path, fingerprint: str) -> Optional[dict]:
    if not path.exists():
        return None
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError:
        return None
    if doc.get("fingerprint") != fingerprint:
        logger.warning("%s was produced by a different configuration; recomputing", path)
        return None
    return doc


def cmd_run(config: RunConfig, progress=None) -> int:
    """Run every selected design x replicate, then write tables and manifest.

    Returns the number of failed replicates (0 on success).
    """
    out = Path(config.output)
    (out / "designs").mkdir(parents=True, exist_ok=True)
    _write_atomic(out / "config.json", json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    params = load_params(config.params_path)
    designs = config.selected()
    fingerprint = config.fingerprint()
    workers = int(os.environ.get(WORKERS_ENV, config.workers))

    status: Dict[str, dict] = {d.design_id: {"completed": [], "failed": {}, "seconds": 0.0}
                               for d in designs}
    todo = []
    for d in designs:
        ddir = out / "designs" / d.slug
        ddir.mkdir(parents=True, exist_ok=True)
        for rep in range(config.replicates):
            if _load_existing(_replicate_path(out, d, rep), fingerprint) is not None:
                status[d.design_id]["completed"].append(rep)
            else:
                todo.append((d, rep, config, params, ddir if config.save_chains else None))

    by_id = {d.design_id: d for d in designs}

    def record(design_id, rep, result, error, seconds):
        st = status[design_id]
        st["seconds"] += seconds
        if error is not None:
            st["failed"][str(rep)] = {"seed": derive_seed(config.seed, design_id, rep),
                                      "error": error}
            return
        path = _replicate_path(out, by_id[design_id], rep)
        _write_atomic(path, json.dumps(result, indent=2, sort_keys=True) + "\n")
        st["completed"].append(rep)
        if progress:
            progress(design_id, rep)

    if workers == 1 or len(todo) <= 1:
        for task in todo:
            record(*_task(task))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for fut in as_completed([pool.submit(_task, t) for t in todo]):
                record(*fut.result())

    failures = sum(len(s["failed"]) for s in status.values())
    tables = write_tables(out, designs, config)
    write_manifest(out, config, designs, status, tables)
    return failures


def write_manifest(out: Path, config: RunConfig, designs, status, tables) -> None:
    files = {}
    for d in designs:
        for rep in sorted(status[d.design_id]["completed"]):
            p = _replicate_path(out, d, rep)
            files[str(p.relative_to(out))] = sha256_file(p)
    for p in tables:
        files[str(p.relative_to(out))] = sha256_file(p)
    manifest = {
        "version": __version__,
        "config": asdict(config),
        "fingerprint": config.fingerprint(),
        "designs": {
            d.design_id: {
                "slug": d.slug,
                "replicate_seeds": [derive_seed(config.seed, d.design_id, r)
                                    for r in range(config.replicates)],
                "completed": len(status[d.design_id]["completed"]),
                "failed": status[d.design_id]["failed"],
                "status": ("complete" if len(status[d.design_id]["completed"]) == config.replicates
                           else "incomplete"),
                "seconds": round(status[d.design_id]["seconds"], 3),
            }
            for d in designs
        },
        "files": dict(sorted(files.items())),
    }
    _write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --- aggregation and tables ---------------------------------------------------

def collect_pips(out: Path, design, replicates: int) -> Optional[np.ndarray]:
    rows = []
    for rep in range(replicates):
        p = _replicate_path(out, design, rep)
        if not p.exists():
            return None
        rows.append(json.loads(p.read_text())["pips"])
    return np.array(rows)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        # repr round-trips, so values read back from a table are exact
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


TABLE_FILES = {
    ("power", "unstructured"): "table1_power_unstructured.csv",
    ("confusion", "unstructured"): "table2_confusion_unstructured.csv",
    ("metrics", "unstructured"): "table3_metrics_unstructured.csv",
    ("power", "diagonal"): "table4_power_diagonal.csv",
    ("confusion", "diagonal"): "table5_confusion_diagonal.csv",
    ("metrics", "diagonal"): "table6_metrics_diagonal.csv",
}


def write_tables(out: Path, designs, config: RunConfig) -> List[Path]:
    """Aggregate completed designs into CSV tables; returns written paths.

    Only designs with every replicate present contribute rows.
    """
    tdir = out / "tables"
    tdir.mkdir(exist_ok=True)
    names = None
    pips_by_design = {}
    for d in designs:
        pips = collect_pips(out, d, config.replicates)
        if pips is not None:
            pips_by_design[d] = pips
            if names is None:
                names = json.loads(_replicate_path(out, d, 0).read_text())["names"]
    names = names or list(load_params(config.params_path)["female"].names)
    primary = config.thresholds[0]
    rule = DetectionRule(primary)

    written = []
    power = {(k, r): [] for (k, r) in TABLE_FILES}
    ts_rates = {}
    sweep_rows = []
    for d, pips in pips_by_design.items():
        rates = rejection_rates(detect(pips, rule))
        for t in sorted(set(config.thresholds) | set(DEFAULT_THRESHOLD_GRID)):
            sweep = rejection_rates(detect(pips, DetectionRule(t)))
            sweep_rows += [[d.regime, d.name, t, m, float(v)] for m, v in zip(names, sweep)]
        if isinstance(d, PowerDesign):
            c = confusion_from_rates(rates, d.treated, names)
            mset = metrics_from_confusion(c)
            power[("power", d.regime)].append([d.name] + [float(v) for v in rates])
            power[("confusion", d.regime)].append([d.name, c.tp, c.fp, c.fn, c.tn])
            power[("metrics", d.regime)].append(
                [d.name, mset.accuracy, mset.precision, mset.recall, mset.f1,
                 ";".join(mset.flags)])
        else:
            ts_rates[d] = rates

    headers = {
        "power": ["design"] + names,
        "confusion": ["design", "true_positive", "false_positive",
                      "false_negative", "true_negative"],
        "metrics": ["design", "accuracy", "precision", "recall", "f1", "flags"],
    }
    order = {d.design_id: i for i, d in enumerate(build_design_registry())}
    for (kind, regime), fname in TABLE_FILES.items():
        rows = sorted(power[(kind, regime)],
                      key=lambda r: order[f"{regime}/{r[0]}"])
        p = tdir / fname
        _write_atomic(p, _csv_text(headers[kind], rows))
        written.append(p)

    report = test_size_report(ts_rates, names)
    design_lookup = {d.name: d for d in ts_rates}
    p = tdir / "test_size.csv"
    _write_atomic(p, _csv_text(
        ["regime", "design", "method", "mean", "sd", "cv", "metal", "rate", "uncontrolled"],
        [[r.regime, r.design, design_lookup[r.design].method, design_lookup[r.design].mean,
          design_lookup[r.design].sd, r.cv, r.metal, r.rate, int(r.uncontrolled)]
         for r in report]))
    written.append(p)
    p = tdir / "cv_plot.csv"
    _write_atomic(p, _csv_text(["cv", "metal", "regime", "rate"],
                               [[r.cv, r.metal, r.regime, r.rate] for r in report]))
    written.append(p)
    p = tdir / "threshold_sweep.csv"
    _write_atomic(p, _csv_text(["regime", "design", "threshold", "metal", "rate"], sweep_rows))
    written.append(p)
    return written


def cmd_report(result_dir) -> List[Path]:
    """Verify a completed run against its manifest and rebuild its tables."""
    out = Path(result_dir)
    mpath = out / "manifest.json"
    if not mpath.exists():
        raise ManifestMismatchError(f"no manifest in {out}")
    manifest = json.loads(mpath.read_text())
    config = RunConfig(**manifest["config"])
    designs = config.selected()
    for d in designs:
        entry = manifest["designs"].get(d.design_id)
        if entry is None or entry["status"] != "complete":
            raise ManifestMismatchError(f"design {d.design_id!r} is not complete")
    for rel, digest in manifest["files"].items():
        if not rel.startswith("designs/"):
            continue  # tables are rebuilt and compared below
        p = out / rel
        if not p.exists():
            raise ManifestMismatchError(f"missing artifact {rel}")
        if sha256_file(p) != digest:
            raise ManifestMismatchError(f"checksum mismatch for {rel}")
    for d in designs:
        for rep in range(config.replicates):
            rel = str(_replicate_path(out, d, rep).relative_to(out))
            if rel not in manifest["files"]:
                raise ManifestMismatchError(f"replicate {rel} is not in the manifest")
    tables = write_tables(out, designs, config)
    for p in tables:
        rel = str(p.relative_to(out))
        if rel in manifest["files"] and sha256_file(p) != manifest["files"][rel]:
            raise ManifestMismatchError(f"rebuilt table {rel} differs from the manifest")
    return tables
