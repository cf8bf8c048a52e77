"""Command line entry point: ``qcface {solve-k, check-grad, plan, analyze, sweep}``.

Exit codes: 0 ok, 1 check failure, 2 usage or config error, 3 numerical
abort, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, gradients
from .config import (
    ExperimentConfig, config_hash, config_to_json, dumps, load_config, parse_config, set_path,
)
from .errors import ConfigError, InvalidBounds, NonFiniteGradient, QCFaceError
from .geometry import FeatureBatch
from .margins import guidance_values
from .planner import Mode, PlanState, generate_synthetic, plan, summarize
from .regularizer import RegParams, expected_magnitude, solve_k

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISSING = 0, 1, 2, 3, 4
FD_TOL = 1e-6
SEED_ENV = "QCP_SEED_OVERRIDE"
ANALYZE_TOKENS = ("projection", "metrics")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- writers ------------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_json(path: Path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_float(x: float):
    return None if not math.isfinite(x) else float(x)


# -- shared helpers -----------------------------------------------------------


def _seed_override():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    if not raw.isdigit() or int(raw) >= 2**64:
        raise ConfigError(f"{SEED_ENV} must be a decimal 64-bit unsigned integer")
    return int(raw)


def _apply_seed(cfg: ExperimentConfig, seed):
    if seed is None:
        return cfg
    return replace(cfg, data=replace(cfg.data, seed=seed), train=replace(cfg.train, seed=seed))


def _projection_rows(batch, proxies, s, pair):
    exp = analysis.projection_export(batch, proxies, pair, s)
    return [(r.sample_id, r.x, r.y, r.magnitude, r.p_d) for r in exp.rows]


def _metrics(cfg: ExperimentConfig, data, Z, proxies) -> dict:
    # recognition metrics use the true identities; p_d uses the training labels
    truth = FeatureBatch(Z, data.true_labels, data.noise_sigma, data.mislabeled)
    gen, imp = analysis.pair_scores(Z, data.true_labels)
    ver = analysis.verification_metrics(gen, imp)
    gal, probes = analysis.split_gallery_probe(truth)
    C = cfg.data.C
    ranks = sorted({1, min(5, C), C})
    ident = analysis.identification_metrics(gal, probes, ranks)
    p_d = guidance_values(Z, data.labels, proxies, cfg.loss.s)
    mags = np.linalg.norm(Z, axis=1)

    def corr(x, y):
        try:
            return _json_float(analysis.pearson(x, y).pearson_r)
        except QCFaceError:
            return None

    return {
        "tar_at_far": {format(k, "g"): v for k, v in ver.tar_at_far.items()},
        "threshold_at_far": {format(k, "g"): v for k, v in ver.threshold_at_far.items()},
        "auc": ver.auc,
        "rank_k": {str(k): v for k, v in ident.items()},
        "pearson_pd_mag": corr(p_d, mags),
        "pearson_noise_mag": corr(data.noise_sigma, mags),
    }


def _data_for(cfg: ExperimentConfig):
    dim = cfg.data.d if cfg.train.mode is Mode.FROZEN_DIRECTION else cfg.data.input_dim
    return generate_synthetic(cfg.data, dim)


def _state_from_json(obj) -> PlanState:
    arr = lambda k: np.asarray(obj[k], dtype=np.float64) if k in obj else None  # noqa: E731
    return PlanState(arr("proxies"), Mode(obj["mode"]), arr("directions"), arr("magnitudes"),
                     arr("encoder"), arr("bias"), int(obj["epoch"]))


def run_plan(cfg: ExperimentConfig, out_dir: Path, seed_override=None) -> dict:
    """Train, then write every artifact and the manifest into ``out_dir``.

    Returns summary numbers for the sweep table. NonFiniteGradient propagates
    after the pre-step state has been dumped.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    try:
        data, result = plan(cfg.data, tcfg)
    except NonFiniteGradient as exc:
        if exc.state is not None:
            dump = out_dir / "abort_state.json"
            write_json(dump, exc.state.as_dict())
            exc.dump_path = dump
        raise
    state = result.state
    written = []

    # the run directory is not part of the run's content
    cfg_obj = config_to_json(cfg)
    cfg_obj.pop("output_dir")
    write_json(out_dir / "config.json", cfg_obj)
    written.append("config.json")
    write_json(out_dir / "state.json", state.as_dict())
    written.append("state.json")
    if "history" in cfg.emit:
        write_csv(out_dir / "history.csv", ["epoch", "phase", "mean_lsm", "mean_lreg", "mean_pd", "lr"],
                  [(h.epoch, h.phase, h.mean_lsm, h.mean_lreg, h.mean_pd, h.lr) for h in result.history])
        written.append("history.csv")
    sm = summarize(result, data, tcfg)
    if "magnitudes" in cfg.emit:
        rows = zip(range(len(data)), data.labels, data.noise_sigma, data.mislabeled,
                   sm.p_d, sm.magnitude, sm.cos_to_proxy)
        write_csv(out_dir / "magnitudes.csv",
                  ["sample_id", "class", "noise_sigma", "mislabeled", "p_d", "magnitude", "cos_to_proxy"], rows)
        written.append("magnitudes.csv")
    Z = state.embed(data)
    if "projection" in cfg.emit:
        batch = FeatureBatch(Z, data.labels, data.noise_sigma, data.mislabeled)
        write_csv(out_dir / "projection.csv", ["sample_id", "x", "y", "magnitude", "p_d"],
                  _projection_rows(batch, state.proxies, cfg.loss.s, (0, 1)))
        written.append("projection.csv")
    if "metrics" in cfg.emit:
        write_json(out_dir / "metrics.json", _metrics(cfg, data, Z, state.proxies))
        written.append("metrics.json")

    manifest = {
        "config_hash": config_hash(cfg),
        "seed": {"data": cfg.data.seed, "train": cfg.train.seed},
        "seed_override": seed_override,
        "version": __version__,
        "files": {name: sha256_file(out_dir / name) for name in sorted(written)},
    }
    write_json(out_dir / "manifest.json", manifest)

    try:
        r = analysis.pearson(sm.p_d, sm.magnitude).pearson_r
    except QCFaceError:
        r = float("nan")
    last = result.history[-1]
    return {"final_mean_pd": last.mean_pd, "pearson_pd_mag": r,
            "final_mean_lsm": last.mean_lsm, "final_mean_lreg": last.mean_lreg}


# -- commands -----------------------------------------------------------------


def cmd_solve_k(args, out) -> int:
    try:
        k = solve_k(args.la, args.ua)
    except InvalidBounds as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    params = RegParams(args.la, args.ua, k=k)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["p", "z_star", "k"])
    for p in (0.0, 0.25, 0.5, 0.75, 1.0):
        w.writerow([fmt(p), fmt(expected_magnitude(params, p)), fmt(k)])
    return EXIT_OK


def cmd_check_grad(args, out) -> int:
    if args.instances < 1:
        print("error: --instances must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    cfg = load_config(args.config)
    variants = [("loss", cfg.loss, None), ("loss+reg", cfg.loss, cfg.reg)]
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["variant", "instances", "max_rel_error", "passed"])
    ok = True
    for name, spec, reg in variants:
        reports = gradients.fd_suite(spec, args.instances, seed=args.seed, reg=reg)
        worst = max(r.max_rel_error for r in reports)
        passed = all(r.passed(FD_TOL) for r in reports)
        ok &= passed
        w.writerow([name, args.instances, fmt(worst), fmt(passed)])
    return EXIT_OK if ok else EXIT_CHECK


def _load_plan_config(args):
    cfg = load_config(args.config)
    if getattr(args, "output_dir", None):
        cfg = replace(cfg, output_dir=args.output_dir)
    seed = _seed_override()
    return _apply_seed(cfg, seed), seed


def cmd_plan(args, out) -> int:
    cfg, seed = _load_plan_config(args)
    out_dir = Path(cfg.output_dir)
    try:
        run_plan(cfg, out_dir, seed)
    except NonFiniteGradient as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        dump = getattr(exc, "dump_path", None)
        if dump is not None:
            print(f"state dumped to {dump}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {out_dir}", file=out)
    return EXIT_OK


def cmd_analyze(args, out) -> int:
    tokens = [t for t in args.emit.split(",") if t]
    bad = [t for t in tokens if t not in ANALYZE_TOKENS]
    if not tokens or bad:
        print(f"error: --emit takes tokens from {list(ANALYZE_TOKENS)}", file=sys.stderr)
        return EXIT_USAGE
    run = Path(args.run)
    try:
        state_obj = json.loads((run / "state.json").read_text(encoding="utf-8"))
        cfg_obj = json.loads((run / "config.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING
    cfg = parse_config(cfg_obj)
    state = _state_from_json(state_obj)
    data = _data_for(cfg)
    Z = state.embed(data)
    if "projection" in tokens:
        pair = tuple(int(c) for c in args.pair.split(","))
        if len(pair) != 2:
            print("error: --pair takes two class indices", file=sys.stderr)
            return EXIT_USAGE
        batch = FeatureBatch(Z, data.labels, data.noise_sigma, data.mislabeled)
        write_csv(run / "projection.csv", ["sample_id", "x", "y", "magnitude", "p_d"],
                  _projection_rows(batch, state.proxies, cfg.loss.s, pair))
    if "metrics" in tokens:
        write_json(run / "metrics.json", _metrics(cfg, data, Z, state.proxies))
    return EXIT_OK


def _parse_values(raw: str):
    vals = []
    for tok in raw.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            v = json.loads(tok)
        except json.JSONDecodeError:
            v = tok
        if isinstance(v, (dict, list)):
            raise ConfigError(f"sweep value {tok!r} is not a scalar")
        vals.append(v)
    if not vals:
        raise ConfigError("--values is empty")
    return vals


def cmd_sweep(args, out) -> int:
    base, seed = _load_plan_config(args)
    values = _parse_values(args.values)
    base_obj = config_to_json(base)
    root = Path(base.output_dir)
    children = []
    for v in values:
        child_obj = set_path(base_obj, args.param, v)
        child_obj["output_dir"] = str(root / f"{args.param}={fmt(v)}")
        children.append((v, parse_config(child_obj)))
    rows = []
    for v, child in children:
        try:
            summ = run_plan(child, Path(child.output_dir), seed)
        except NonFiniteGradient as exc:
            print(f"numerical abort in {child.output_dir}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        rows.append((args.param, v, summ["final_mean_pd"], summ["pearson_pd_mag"],
                     summ["final_mean_lsm"], summ["final_mean_lreg"], Path(child.output_dir).name))
    write_csv(root / "summary.csv",
              ["param", "value", "final_mean_pd", "pearson_pd_mag", "final_mean_lsm", "final_mean_lreg", "run"], rows)
    print(f"wrote {len(rows)} runs under {root}", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qcface", description="Hard-margin loss toolkit and desk-scale magnitude planner.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("solve-k", help="solve the linearizing coefficient k and print z* anchors")
    s.add_argument("--la", type=float, required=True)
    s.add_argument("--ua", type=float, required=True)
    s.set_defaults(func=cmd_solve_k)

    s = sub.add_parser("check-grad", help="finite-difference check of the configured loss")
    s.add_argument("--config", required=True)
    s.add_argument("--instances", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_check_grad)

    s = sub.add_parser("plan", help="run the two-phase planning schedule")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("analyze", help="projection and metrics for a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--emit", default="projection,metrics")
    s.add_argument("--pair", default="0,1", help="two class indices spanning the projection plane")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", help="one planning run per value of a scalar config field")
    s.add_argument("--config", required=True)
    s.add_argument("--param", required=True, help="dotted path, e.g. loss.s")
    s.add_argument("--values", required=True, help="comma-separated JSON scalars")
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
