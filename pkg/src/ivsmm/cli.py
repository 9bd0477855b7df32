"""Command-line interface.

Subcommands ``simulate``, ``fit``, ``mc-study`` and ``print-config``. Every
output table starts with a ``# manifest:`` line naming the manifest that
describes the run. Failures print one JSON line to stderr and exit with
2 (validation), 3 (weak instrument), 4 (non-convergence) or 5 (numerical).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd

from . import __version__
from .data import AdherenceMode, load_trial, save_trial, sidecar_path
from .errors import ConvergenceError, SmmError, ValidationError
from .estimation import FitConfig
from .parallel import available_workers
from .pipeline import AnalysisConfig, analyze
from .rng import DEFAULT_SEED
from .simulation import SimConfig, mc_study, simulate

log = logging.getLogger("ivsmm")

MANIFEST = "manifest.json"

FIT_DEFAULTS = {
    "model": AdherenceMode.BOTH_ARMS.value,
    "covariates": "none",
    "mi": None,
    "complete_case": False,
    "draws": 10_000,
    "seed": DEFAULT_SEED,
    "chained_iterations": 10,
    "donors": 5,
    "max_iterations": FitConfig.max_iterations,
    "objective_tolerance": FitConfig.objective_tolerance,
    "parameter_tolerance": FitConfig.parameter_tolerance,
    "n_restarts": FitConfig.n_restarts,
}


def _sim_defaults():
    return {f.name: f.default for f in dataclasses.fields(SimConfig)}


def _study_defaults():
    return {**_sim_defaults(), "reps": 1000, "model": None}


DEFAULTS = {"simulate": _sim_defaults, "fit": lambda: dict(FIT_DEFAULTS), "mc-study": _study_defaults}


# -- helpers ----------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp():
    """Build time from SOURCE_DATE_EPOCH; ``None`` when unset, keeping reruns byte-identical."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    try:
        return datetime.fromtimestamp(int(epoch), tz=timezone.utc).isoformat()
    except ValueError:
        raise ValidationError("SOURCE_DATE_EPOCH must be an integer", field="SOURCE_DATE_EPOCH") from None


def _dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n"


def _load_config(path, command):
    """Flat JSON config merged over the command's defaults."""
    cfg = DEFAULTS[command]()
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found", field="config") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}", field="config") from None
    if not isinstance(user, dict):
        raise ValidationError("config must be a flat JSON object", field="config")
    for key, value in user.items():
        if key not in cfg:
            raise ValidationError(f"unknown config key {key!r}", field=key)
        if isinstance(value, (dict, list)):
            raise ValidationError(f"config key {key!r} must be a scalar", field=key)
        cfg[key] = value
    return cfg


def _sim_config(cfg):
    keys = {f.name for f in dataclasses.fields(SimConfig)}
    try:
        return SimConfig(**{k: v for k, v in cfg.items() if k in keys})
    except TypeError as exc:
        raise ValidationError(str(exc), field="config") from None


def _manifest(command, config, seed, inputs):
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "created": _timestamp(),
    }


def _write_manifest(out_dir, manifest):
    text = _dumps(manifest)
    (out_dir / MANIFEST).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode()).hexdigest()


def _write_table(path, table, manifest_digest, index=False):
    buf = io.StringIO()
    buf.write(f"# manifest: {MANIFEST} sha256={manifest_digest}\n")
    table.to_csv(buf, index=index, lineterminator="\n")
    path.write_text(buf.getvalue(), encoding="utf-8")


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _covariate_names(spec, frame):
    if spec is None or str(spec).lower() == "none" or spec == "":
        return ()
    if str(spec).lower() == "all":
        return tuple(frame.covariate_names)
    names = tuple(s.strip() for s in str(spec).split(",") if s.strip())
    missing = [n for n in names if n not in frame.covariate_names]
    if missing:
        raise ValidationError(f"covariate(s) not in data: {', '.join(missing)}", field=missing[0])
    return names


# -- commands ---------------------------------------------------------------


def cmd_print_config(args):
    sys.stdout.write(_dumps(DEFAULTS[args.kind]()))
    return 0


def cmd_simulate(args):
    cfg = _load_config(args.config, "simulate")
    if args.seed is not None:
        cfg["seed"] = args.seed
    sim = _sim_config(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame = simulate(sim)
    inputs = [args.config] if args.config else []
    manifest = _manifest("simulate", dataclasses.asdict(sim), sim.seed, inputs)
    save_trial(frame, out, extra={"manifest": manifest})
    log.info("wrote %s (%d subjects, %d time points)", out, frame.n, frame.K)
    return 0


def cmd_fit(args):
    cfg = _load_config(args.config, "fit")
    for key in ("model", "covariates", "mi", "draws", "seed"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    if args.complete_case:
        cfg["complete_case"] = True
    frame = load_trial(args.data)
    covariates = _covariate_names(cfg["covariates"], frame)
    fit_cfg = FitConfig(
        max_iterations=cfg["max_iterations"],
        objective_tolerance=cfg["objective_tolerance"],
        parameter_tolerance=cfg["parameter_tolerance"],
        n_restarts=cfg["n_restarts"],
    )
    acfg = AnalysisConfig(
        mode=cfg["model"],
        covariates=covariates,
        mi=None if cfg["mi"] is None else int(cfg["mi"]),
        complete_case=bool(cfg["complete_case"]),
        draws=int(cfg["draws"]),
        seed=int(cfg["seed"]),
        chained_iterations=int(cfg["chained_iterations"]),
        donors=int(cfg["donors"]),
        fit=fit_cfg,
    )
    result = analyze(frame, acfg, workers=args.workers)

    out = _out_dir(args.out)
    inputs = [args.data, sidecar_path(args.data)] + ([args.config] if args.config else [])
    cfg["covariates"] = list(covariates)
    digest = _write_manifest(out, _manifest("fit", cfg, acfg.seed, inputs))
    _write_table(out / "parameters.csv", result.parameter_table(), digest)
    _write_table(out / "trajectory.csv", result.report.trajectory, digest)
    summary = {
        "model": acfg.mode.value,
        "subjects": result.n_subjects,
        "dropped_incomplete": result.n_dropped,
        "imputations": result.m if result.imputation is not None else 0,
        "converged": result.converged,
        "objective": max(f.objective_at_optimum for f in result.fits),
        **{f"terminal_{k}": v for k, v in result.report.terminal_estimand.items()},
    }
    _write_table(out / "summary.csv", pd.DataFrame([summary]), digest)
    sys.stdout.write(result.parameter_table().to_string(index=False) + "\n")
    if not result.converged:
        raise ConvergenceError(
            f"{sum(not f.converged for f in result.fits)} of {result.m} fits did not converge; "
            f"outputs written to {out}"
        )
    return 0


def cmd_mc_study(args):
    cfg = _load_config(args.config, "mc-study")
    for key in ("reps", "model", "seed"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    sim = _sim_config(cfg)
    mode = cfg["model"]
    study = mc_study(sim, int(cfg["reps"]), mode=mode, workers=args.workers)

    out = _out_dir(args.out)
    snapshot = {**dataclasses.asdict(sim), "reps": int(cfg["reps"]), "model": study.mode.value}
    inputs = [args.config] if args.config else []
    digest = _write_manifest(out, _manifest("mc-study", snapshot, sim.seed, inputs))
    table = study.to_table()
    table.index.name = "statistic"
    _write_table(out / "results.csv", table, digest, index=True)
    reps = pd.DataFrame(study.estimates, columns=[f"{n}" for n in study.names])
    for j, n in enumerate(study.names):
        reps[f"{n}_se"] = study.sandwich_se[:, j]
    reps.insert(0, "replication", range(study.replications))
    _write_table(out / "replications.csv", reps, digest)
    counts = pd.DataFrame(
        [
            {
                "replications": study.replications,
                "used": study.n_used,
                "nonconverged": study.nonconverged,
                "failed": study.failed,
            }
        ]
    )
    _write_table(out / "counts.csv", counts, digest)
    sys.stdout.write(table.to_string() + "\n")
    return 0


# -- entry point --------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ivsmm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def workers(sp):
        sp.add_argument(
            "--workers", type=int, default=None, help="parallel processes (default: all cores)"
        )

    sp = sub.add_parser("simulate", help="draw one simulated trial")
    sp.add_argument("--config", help="flat JSON config (see print-config simulate)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="output table; the sidecar goes next to it")
    workers(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="estimate the model on a trial file")
    sp.add_argument("data", help="wide-format trial file with JSON sidecar")
    sp.add_argument("--config", help="flat JSON config (see print-config fit)")
    sp.add_argument("--model", choices=[m.value for m in AdherenceMode])
    sp.add_argument("--covariates", help="comma-separated names, 'all' or 'none'")
    grp = sp.add_mutually_exclusive_group()
    grp.add_argument("--mi", type=int, metavar="M", help="impute missing outcomes M times")
    grp.add_argument("--complete-case", action="store_true", help="drop incomplete subjects")
    sp.add_argument("--draws", type=int, help="Monte-Carlo draws for the trajectories")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="output directory")
    workers(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("mc-study", help="Monte-Carlo study of the estimator")
    sp.add_argument("--config", help="flat JSON config (see print-config mc-study)")
    sp.add_argument("--reps", type=int)
    sp.add_argument("--model", choices=[m.value for m in AdherenceMode])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="output directory")
    workers(sp)
    sp.set_defaults(func=cmd_mc_study)

    sp = sub.add_parser("print-config", help="print the default config of a command")
    sp.add_argument("kind", nargs="?", default="simulate", choices=sorted(DEFAULTS))
    sp.set_defaults(func=cmd_print_config)
    return p


def _error_line(exc):
    payload = {"error": exc.kind, "message": str(exc), "exit_code": exc.exit_code}
    for attr in ("field", "row", "parameter"):
        value = getattr(exc, attr, None)
        if value is not None:
            payload[attr] = value
    return json.dumps(payload, sort_keys=True)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "workers", None) is None:
        args.workers = available_workers()
    if args.workers < 1:
        sys.stderr.write(
            _error_line(ValidationError("--workers must be >= 1", field="workers")) + "\n"
        )
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except SmmError as exc:
        sys.stderr.write(_error_line(exc) + "\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
