"""Command-line entry point.

    buda gen-data --out DIR [--spec FILE] [--seed N]
    buda run --data DIR --out DIR [--mode M] [--config FILE] [--seed N]
    buda sweep --param {p,private-count} --values V,... --seeds S,... --out DIR
    buda eval --data DIR --model CKPT --out FILE
    buda gradcheck

Exit codes: 0 success, 1 gradient check above tolerance, 2 bad arguments,
spec, config, checkpoint or file format, 3 dataset failed validation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import gradcheck, plotting
from .errors import BudaError, ContractError, FormatError
from .metrics import METRIC_FIELDS, MetricsReport, reports_to_csv
from .models import Segmenter, load_checkpoint
from .pipeline import MODES, PipelineConfig, evaluate, run_experiment
from .scenario import Dataset, ScenarioSpec, generate_scenario, load_dataset, save_dataset, validate_scenario

log = logging.getLogger("buda")

EXIT_OK, EXIT_GRADCHECK, EXIT_USAGE, EXIT_INVALID_DATA = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message, code)
        self.code = code

    def __str__(self) -> str:
        return str(self.args[0])


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    if not isinstance(data, dict):
        raise CliError(f"{path}: expected a JSON object")
    return data


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_spec(path, seed: int | None = None, **overrides) -> ScenarioSpec:
    d = _read_json(path) if path else {}
    d.update(overrides)
    if seed is not None:
        d["seed"] = seed
    try:
        return ScenarioSpec.from_dict(d)
    except (ContractError, TypeError) as exc:
        raise CliError(f"invalid scenario spec: {exc}") from None


def _load_config(path, **overrides) -> PipelineConfig:
    d = _read_json(path) if path else {}
    d.update(overrides)
    try:
        return PipelineConfig.from_dict(d)
    except (ContractError, TypeError) as exc:
        raise CliError(f"invalid pipeline config: {exc}") from None


def _gate(ds: Dataset, where: str, check_oracle: bool = False) -> None:
    problems = validate_scenario(ds, check_oracle=check_oracle or None)
    if problems:
        for p in problems[:10]:
            log.error("%s: %s", where, p)
        raise CliError(f"{where}: dataset failed validation ({len(problems)} violations)", EXIT_INVALID_DATA)


def _open_dataset(path, check_oracle: bool = False) -> Dataset:
    try:
        ds = load_dataset(path)
    except (FormatError, OSError) as exc:
        raise CliError(f"cannot load dataset: {exc}") from None
    _gate(ds, str(path), check_oracle)
    return ds


def _report_row(report: MetricsReport, **meta) -> dict:
    return {**meta, **report.metrics()}


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    spec = _load_spec(args.spec, args.seed)
    ds = generate_scenario(spec)
    _gate(ds, "generated scenario")
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {spec.n_shared} shared + {spec.n_private} private classes, "
          f"{spec.n_source}/{spec.n_target_train}/{spec.n_target_test} grids")
    return EXIT_OK


# ---------------------------------------------------------------- run

def cmd_run(args) -> int:
    t0 = time.time()
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    cfg = _load_config(args.config, **({"mode": args.mode} if args.mode else {}))
    ds = _open_dataset(args.data, check_oracle=cfg.use_oracle_labels)
    report, arts = run_experiment(ds, cfg, seed=args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpts = arts.write(out / "checkpoints")
    meta = {"mode": cfg.mode, "seed": args.seed, "version": __version__}
    paths = {
        "report_json": str(out / "report.json"),
        "report_csv": str(out / "report.csv"),
        "run_log": str(out / "run_log.json"),
        "curves_png": str(out / "curves.png"),
        "checkpoints": ckpts,
    }
    _write_atomic(out / "report.json", _dump({**report.to_dict(), **meta, "config": cfg.to_dict()}))
    _write_atomic(out / "report.csv", reports_to_csv([_report_row(report, **meta)], ["mode", "seed", *METRIC_FIELDS]))
    _write_atomic(out / "run_log.json", _dump(arts.log))
    plotting.plot_curves(arts.log["curve"], out / "curves.png")
    manifest = {
        **meta,
        "config": cfg.to_dict(),
        "dataset": str(Path(args.data).resolve()),
        "command": ["run", "--data", str(args.data), "--mode", cfg.mode, "--seed", str(args.seed)],
        "started": started,
        "wall_clock_s": round(time.time() - t0, 3),
        "outputs": paths,
    }
    _write_atomic(out / "run_manifest.json", _dump(manifest))
    print(f"{cfg.mode} seed={args.seed}  {report.table_row()}")
    return EXIT_OK


# ---------------------------------------------------------------- sweep

def _number(text: str):
    v = float(text)
    return int(v) if v.is_integer() else v


def _parse_list(text: str, cast=_number) -> list:
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"cannot parse list {text!r}") from None


def _sweep_job(job: dict) -> dict:
    """One (value, seed) run; top level so worker processes can import it."""
    if job["data"]:
        ds = load_dataset(job["data"])
    else:
        ds = generate_scenario(ScenarioSpec.from_dict(job["spec"]))
    cfg = PipelineConfig.from_dict(job["config"])
    problems = validate_scenario(ds, check_oracle=cfg.use_oracle_labels or None)
    if problems:
        raise CliError(f"sweep dataset failed validation: {problems[0]}", EXIT_INVALID_DATA)
    report, _ = run_experiment(ds, cfg, seed=job["seed"])
    return _report_row(report, value=job["value"], seed=job["seed"])


def _sweep_jobs(args) -> list[dict]:
    base_cfg = _load_config(args.config, **({"mode": args.mode} if args.mode else {}))
    seeds = _parse_list(args.seeds, int)
    if not seeds:
        raise CliError("--seeds is empty")
    if args.param == "p":
        values: list = _parse_list(args.values)
        if any(not 0 < v <= 100 for v in values):
            raise CliError("p values must lie in (0, 100]")
        if args.oracle:
            values.append("GT")
    else:
        values = _parse_list(args.values, int)
        if any(v < 1 for v in values):
            raise CliError("private-count values must be >= 1")
        if args.data:
            raise CliError("--param private-count generates its own datasets; use --spec")
        if args.oracle:
            raise CliError("--oracle only applies to --param p")
    if args.data:
        _open_dataset(args.data)
    jobs = []
    for v in values:
        cfg = base_cfg.to_dict()
        over = {}
        if args.param == "p":
            if v == "GT":
                cfg["use_oracle_labels"] = True
            else:
                cfg["p_pct"] = v
        else:
            over["n_private"] = v
        for s in seeds:
            spec = None if args.data else _load_spec(args.spec, s, **over).to_dict()
            jobs.append({"value": v, "seed": s, "config": cfg, "data": args.data, "spec": spec})
    return jobs


def _aggregate(rows: list[dict]) -> list[dict]:
    out = []
    for v in dict.fromkeys(r["value"] for r in rows):
        group = [r for r in rows if r["value"] == v]
        agg = {"value": v, "n_seeds": len(group)}
        agg.update({k: float(np.mean([r[k] for r in group])) for k in METRIC_FIELDS})
        out.append(agg)
    return out


def cmd_sweep(args) -> int:
    jobs = _sweep_jobs(args)
    workers = max(1, int(os.environ.get("BUDA_THREADS", "1") or 1))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_sweep_job(job))
            log.info("value=%s seed=%s hIoU=%.2f", job["value"], job["seed"], rows[-1]["hIoU"])
    agg = _aggregate(rows)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_atomic(out / "sweep.csv", reports_to_csv(agg, ["value", "n_seeds", *METRIC_FIELDS]))
    _write_atomic(out / "sweep_per_seed.csv", reports_to_csv(rows, ["value", "seed", *METRIC_FIELDS]))
    plotting.plot_sweep(agg, args.param, out / "sweep.png")
    _write_atomic(out / "sweep_manifest.json", _dump({
        "param": args.param, "values": [r["value"] for r in agg], "seeds": _parse_list(args.seeds, int),
        "config": jobs[0]["config"], "data": args.data, "spec": args.spec, "version": __version__,
    }))
    for r in agg:
        print(f"{args.param}={r['value']}: shared_mIoU={r['shared_mIoU']:.1f} "
              f"private_mIoU={r['private_mIoU']:.1f} hIoU={r['hIoU']:.1f}")
    return EXIT_OK


# ---------------------------------------------------------------- eval / gradcheck

def cmd_eval(args) -> int:
    ds = _open_dataset(args.data)
    try:
        model = load_checkpoint(args.model)
    except (FormatError, OSError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}") from None
    if not isinstance(model, Segmenter):
        raise CliError(f"{args.model} holds a {model.kind}, not a segmenter")
    spec = ds.spec
    if model.n_classes != spec.n_classes or model.d_in != spec.d_in:
        raise CliError(f"checkpoint has {model.n_classes} classes / {model.d_in} inputs, "
                       f"dataset has {spec.n_classes} / {spec.d_in}")
    report = evaluate(model, ds.target_test, spec.shared_ids, spec.private_ids)
    text = report.to_json()
    if args.out:
        _write_atomic(Path(args.out), text + "\n")
    print(report.table_row())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.configs, args.seed)
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err <= gradcheck.TOLERANCE else "FAIL"
        print(f"{name:34s} max rel err {err:.2e}  {status}")
        worst = max(worst, err)
    return EXIT_OK if worst <= gradcheck.TOLERANCE else EXIT_GRADCHECK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="buda", description="Boundless domain adaptation on synthetic pixel grids.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and validate a scenario dataset")
    p.add_argument("--spec", help="scenario spec JSON (defaults apply to missing keys)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="overrides the spec seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="train one pipeline variant and evaluate it")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", help=f"one of {', '.join(MODES)} (overrides the config)")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="runs over a grid of values and seeds")
    p.add_argument("--param", choices=("p", "private-count"), required=True)
    p.add_argument("--values", required=True, help="comma-separated")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated")
    p.add_argument("--mode", help="pipeline mode (default from config)")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--oracle", action="store_true", help="add a row trained on oracle target labels")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="fixed dataset for every run")
    src.add_argument("--spec", help="scenario spec; one dataset is generated per seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a segmenter checkpoint on target_test")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss and network")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except BudaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
