"""Command-line entry point: ``bkmrsim {ingest,simulate,fit,run,report,designs}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .designs import export_registry
from .errors import BKMRError
from .harness import DEFAULT_MCMC, PRESETS, RunConfig, cmd_report, cmd_run
from .kernel import ExposureDataset
from .sampler import McmcConfig, fit, posterior_inclusion_probabilities
from .simgen import (
    METALS, SimulationSpec, estimate_stratum_params, load_params, read_exposure_csv,
    sample_skewness, save_params, simulate_dataset, transform_exposures,
)

log = logging.getLogger("bkmrsim")


def cmd_ingest(csv_path, out_path, metals=METALS) -> dict:
    """Estimate per-sex parameters from a raw-concentration CSV and save them."""
    raw, sex, names = read_exposure_csv(csv_path, metals)
    Z = transform_exposures(raw)
    params = estimate_stratum_params(Z, sex, names)
    save_params(params, out_path, notes=f"estimated from {Path(csv_path).name}")
    summary = {}
    for label, p in params.items():
        rows = Z[(sex == label) & np.all(np.isfinite(Z), axis=1)]
        off = p.corr[np.triu_indices(len(names), 1)]
        summary[label] = {
            "n_complete": int(p.n_stratum),
            "mean": dict(zip(names, p.mu.round(4).tolist())),
            "sd": dict(zip(names, p.sigma.round(4).tolist())),
            "skewness": {m: round(sample_skewness(rows[:, j]), 4) for j, m in enumerate(names)},
            "gamma_skewness": dict(zip(names, p.implied_skewness.round(4).tolist())),
            "correlation_range": [round(float(off.min()), 4), round(float(off.max()), 4)],
        }
    return summary


def cmd_simulate(out_csv, params_path=None, n=2934, regime="unstructured", seed=0):
    params = load_params(params_path)
    ds = simulate_dataset(params, SimulationSpec.with_total(n, regime, seed))
    df = pd.DataFrame(ds.Z, columns=ds.names)
    df["sex"] = ds.sex
    df.to_csv(out_csv, index=False, float_format="%.10g")
    return ds


def cmd_fit(csv_path, response="y", iterations=2000, seed=0, chain_out=None,
            mcmc_options=None):
    df = pd.read_csv(csv_path)
    if response not in df.columns:
        raise BKMRError(f"CSV has no response column {response!r}")
    names = [c for c in df.columns if c.lower() in METALS]
    if not names:
        raise BKMRError("CSV has no exposure columns")
    covars = [c for c in df.columns if c not in names + [response, "sex"]]
    data = ExposureDataset(df[names].to_numpy(float), names,
                           X=df[covars].to_numpy(float) if covars else None,
                           y=df[response].to_numpy(float))
    cfg = McmcConfig(iterations=iterations, seed=seed, **{**DEFAULT_MCMC, **(mcmc_options or {})})
    chain = fit(data, cfg)
    if chain_out:
        chain.save(chain_out)
    return dict(zip(names, posterior_inclusion_probabilities(chain).tolist()))


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bkmrsim", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="estimate stratum parameters from a CSV")
    p.add_argument("csv")
    p.add_argument("-o", "--output", default="params.json")

    p = sub.add_parser("simulate", help="draw one exposure dataset")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--params")
    p.add_argument("--n", type=int, default=2934)
    p.add_argument("--regime", choices=["diagonal", "unstructured"], default="unstructured")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("fit", help="fit BKMR to a CSV with exposures and a response")
    p.add_argument("csv")
    p.add_argument("--response", default="y")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chain", help="write the chain to this CSV")

    p = sub.add_parser("run", help="run a simulation study")
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--design", action="append", dest="designs",
                   help="design name or glob, e.g. 'Normal High' or 'test-size:*' (repeatable)")
    p.add_argument("--regime", action="append", dest="regimes",
                   choices=["diagonal", "unstructured"])
    p.add_argument("--scale", choices=sorted(PRESETS))
    p.add_argument("--replicates", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", type=int, dest="burn_in")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output", "-o")
    p.add_argument("--threshold", type=float, action="append", dest="thresholds")
    p.add_argument("--shared-noise", action="store_true", default=None, dest="shared_noise")
    p.add_argument("--noise-sd", type=float, dest="noise_sd")
    p.add_argument("--params", dest="params_path")
    p.add_argument("--mcmc", type=json.loads,
                   help='sampler options as JSON, e.g. \'{"lambda_prior": "gamma"}\'')
    p.add_argument("--save-chains", action="store_true", default=None, dest="save_chains")

    p = sub.add_parser("report", help="verify a run and rebuild its tables")
    p.add_argument("result_dir")

    p = sub.add_parser("designs", help="export the experiment registry as JSON")
    p.add_argument("-o", "--output", default="-")
    return ap


RUN_KEYS = ("designs", "regimes", "scale", "replicates", "n", "iterations", "burn_in", "seed",
            "workers", "output", "thresholds", "shared_noise", "noise_sd", "params_path",
            "save_chains", "mcmc")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "ingest":
            summary = cmd_ingest(args.csv, args.output)
            print(json.dumps(summary, indent=2))
        elif args.command == "simulate":
            ds = cmd_simulate(args.output, args.params, args.n, args.regime, args.seed)
            print(f"wrote {ds.n} rows to {args.output}")
        elif args.command == "fit":
            pips = cmd_fit(args.csv, args.response, args.iterations, args.seed, args.chain)
            print(json.dumps({"pip": pips}, indent=2))
        elif args.command == "run":
            overrides = {k: getattr(args, k) for k in RUN_KEYS}
            if args.config:
                config = RunConfig.from_file(args.config, **overrides)
            else:
                config = RunConfig(**{k: v for k, v in overrides.items() if v is not None})

            def progress(design_id, rep):
                log.info("done %s replicate %d", design_id, rep)

            failures = cmd_run(config, progress)
            print(f"results in {config.output}; {failures} failed replicate(s)")
            return 1 if failures else 0
        elif args.command == "report":
            for p in cmd_report(args.result_dir):
                print(p)
        elif args.command == "designs":
            if args.output == "-":
                export_registry("/dev/stdout")
            else:
                export_registry(args.output)
    except BKMRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
