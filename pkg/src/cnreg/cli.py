"""Command-line front end: ``cnreg <command> [options]``.

Exit status: 0 on success, 2 for configuration errors, 3 for data or
checkpoint problems, 4 when training aborts on a non-finite loss.

Environment overrides:
  CNREG_OUTPUT_DIR  base directory for relative output paths
  CNREG_THREADS     worker processes for ``compare`` (default 1)
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import chain as chain_mod
from .data import LabeledDataset, _atomic_write, read_dataset_csv, split_indices, write_dataset_csv, write_rows
from .errors import CheckpointError, ConfigError, DataError, NumericError, ShapeError
from .experiments import METHODS, compare, write_records
from .metrics import CalibrationConfig, GofBins, evaluate, write_calibration_table, write_report, write_sharpness_table
from .model import CN_FULL, G_ONLY, T_G, VARIANTS, FixedF, TrainingConfig, checkpoint_load, train
from .synthetic import (DEFAULT_N, FAMILIES, ORACLES, STUDY_VARIANTS, BivariateGaussianOracle, SyntheticSpec,
                        VonMisesCircularOracle, generate, gof_vs_n_study)

log = logging.getLogger("cnreg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TRAINING_FLAGS = ("pretrain_iters", "joint_iters", "batch_size", "g_step_size", "f_step_size",
                  "ext_lambda", "variant", "grid_points", "q_distribution", "pretrain_margin",
                  "moment_matching")


def out_path(path):
    base = os.environ.get("CNREG_OUTPUT_DIR")
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def manifest_path(data_path):
    return data_path + ".manifest.json"


def read_manifest(data_path):
    path = manifest_path(data_path)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return json.load(fh)


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True)
    _atomic_write(path, lambda fh: fh.write(text + "\n"))


def parse_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def parse_ints(text):
    return [int(v) for v in parse_floats(text)]


def parse_params(items):
    params = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"parameter {item!r} is not KEY=VALUE")
        params[key] = float(value)
    return params


def training_config(args, **extra):
    opts = {k: getattr(args, k) for k in TRAINING_FLAGS if getattr(args, k, None) is not None}
    opts.update(extra)
    opts.setdefault("seed", args.seed)
    return TrainingConfig(**opts)


def load_dataset(path, ratio, seed):
    X, y = read_dataset_csv(path)
    tr, te = split_indices(len(X), ratio, seed)
    return LabeledDataset.from_arrays(X, y, train_idx=tr, test_idx=te)


def write_trace(path, trace):
    pre = np.asarray(trace.get("pretrain_loss", []), dtype=float)
    g = np.asarray(trace.get("g_loss", []), dtype=float)
    f = np.asarray(trace.get("f_loss", np.full(len(g), np.nan)), dtype=float)
    rows = [(i, "pretrain", float(v), float("nan")) for i, v in enumerate(pre)]
    rows += [(len(pre) + i, "joint", float(gv), float(fv)) for i, (gv, fv) in enumerate(zip(g, f))]
    write_rows(path, ["iteration", "phase", "g_loss", "f_loss"], rows)


# -- commands -----------------------------------------------------------------


def cmd_synth(args):
    spec = SyntheticSpec(args.family, n=args.n, seed=args.seed, split_ratio=args.split_ratio,
                         params=parse_params(args.param))
    data = generate(spec)
    path = out_path(args.out)
    write_dataset_csv(path, data.X, data.y)
    write_json(manifest_path(path), {
        "family": spec.family, "n": spec.n, "seed": spec.seed,
        "split_ratio": spec.split_ratio, "params": spec.params,
    })
    log.info("wrote %d rows to %s", len(data.y), path)


def _fixed_f(args, manifest):
    if getattr(args, "variant", None) != T_G:
        return None
    family = args.oracle or (manifest or {}).get("family")
    if family not in ORACLES:
        raise ConfigError("t_g_oracle_f needs --oracle naming a single-outcome family")
    return FixedF.oracle(name=family)


def cmd_train(args):
    data = load_dataset(args.data, args.split_ratio, args.seed)
    if data.outcomes_raw.ndim != 1:
        raise DataError("multi-outcome data: use chain-train")
    cfg = training_config(args)
    model = train(data, cfg, _fixed_f(args, read_manifest(args.data)))
    path = out_path(args.out)
    model.save(path)
    write_trace(out_path(args.trace or path + ".trace.csv"), model.trace)
    log.info("checkpoint written to %s", path)


def _reference_medians(args, X):
    manifest = read_manifest(args.data)
    family = args.oracle or (manifest or {}).get("family")
    if family in ORACLES:
        return ORACLES[family].median(X)
    return None


def cmd_eval(args):
    data = load_dataset(args.data, args.split_ratio, args.seed)
    if data.outcomes_raw.ndim != 1:
        raise DataError("multi-outcome data: use chain-eval")
    X_tr, y_tr = data.train(standardized=False)
    X, y = (data.features_raw, data.outcomes_raw) if args.all_rows else data.test()
    if args.oracle:
        if args.oracle not in ORACLES:
            raise ConfigError(f"no oracle for family {args.oracle!r}")
        predictor = ORACLES[args.oracle]
    else:
        model = checkpoint_load(args.checkpoint)
        if X.shape[1] != model.n_features:
            raise ShapeError(f"checkpoint expects {model.n_features} features, data has {X.shape[1]}")
        predictor = model.predictor(args.source)
    cal = CalibrationConfig(tuple(parse_floats(args.nominal_grid))) if args.nominal_grid else CalibrationConfig()
    report = evaluate(predictor, X, y, GofBins.from_outcomes(y_tr), cal,
                      reference_medians=_reference_medians(args, X))
    out = out_path(args.out_dir)
    os.makedirs(out, exist_ok=True)
    write_report(report, os.path.join(out, "metrics.json"))
    write_sharpness_table(report, os.path.join(out, "sharpness.csv"))
    write_calibration_table(report, os.path.join(out, "calibration.csv"))
    log.info("metrics: %s", report.to_record())


def cmd_compare(args):
    cfg = training_config(args)
    jobs = args.jobs or int(os.environ.get("CNREG_THREADS", "1"))
    summary, raw = compare(
        families=args.families.split(","), methods=tuple(args.methods.split(",")),
        replications=args.replications, seed=args.seed, cfg=cfg, ratio=args.split_ratio,
        n=args.n, jobs=jobs,
        progress=lambda fam, r, rep: log.info("%s replication %d done", fam, r),
    )
    path = out_path(args.out)
    write_records(path, summary)
    write_records(path[:-4] + ".replications.csv" if path.endswith(".csv") else path + ".replications.csv", raw)


def cmd_convergence(args):
    overrides = {k: getattr(args, k) for k in TRAINING_FLAGS
                 if k != "variant" and getattr(args, k, None) is not None}
    rows = gof_vs_n_study(args.family, parse_ints(args.n_grid), tuple(args.variants.split(",")),
                          seed=args.seed, n_test=args.n_test, cfg_overrides=overrides,
                          progress=lambda n, v, g: log.info("n=%d %s gof=%.4f", n, v, g))
    write_rows(out_path(args.out), ["n", "variant", "gof"], rows)


def cmd_chain_train(args):
    data = load_dataset(args.data, args.split_ratio, args.seed)
    if data.outcomes_raw.ndim != 2:
        raise DataError("chain-train needs at least two outcome columns")
    order = parse_ints(args.order) if args.order else None
    chain = chain_mod.train_chain(data, training_config(args), order, args.cdf_samples)
    chain.save(out_path(args.out))


def _axis(text):
    lo, hi, count = parse_floats(text)
    return np.linspace(lo, hi, int(count))


def cmd_chain_eval(args):
    chain = chain_mod.ChainModel.load(args.chain)
    data = load_dataset(args.data, args.split_ratio, args.seed)
    X_te, _ = data.test()
    if args.rows:
        rows = parse_ints(args.rows)
    else:
        rows = np.random.default_rng(args.seed).choice(len(X_te), min(args.n_x, len(X_te)), replace=False)
    _, Y_tr = data.train(standardized=False)
    lo, hi = np.percentile(Y_tr, [1, 99], axis=0)
    z1 = _axis(args.z1) if args.z1 else np.linspace(lo[0], hi[0], 11)
    z2 = _axis(args.z2) if args.z2 else np.linspace(lo[1], hi[1], 11)
    oracle = None
    manifest = read_manifest(args.data)
    family = (manifest or {}).get("family")
    if family == "bivariate_gaussian":
        oracle = BivariateGaussianOracle(manifest.get("params", {}).get("rho", 0.5))
    elif family == "von_mises_circular":
        oracle = VonMisesCircularOracle()
    out = out_path(args.out_dir)
    os.makedirs(out, exist_ok=True)
    summary = []
    for k, r in enumerate(rows):
        x = X_te[int(r)]
        grid = chain_mod.joint_cdf_grid(chain, z1, z2, x, seed=args.seed)
        chain_mod.write_joint_cdf_grid(os.path.join(out, f"joint_cdf_{k}.csv"), z1, z2, grid)
        entry = {"row": int(r), "x": x.tolist()}
        if oracle is not None:
            truth = np.array([[oracle.joint_cdf(a, b, x) for b in z2] for a in z1])
            chain_mod.write_joint_cdf_grid(os.path.join(out, f"joint_cdf_true_{k}.csv"), z1, z2, truth)
            entry["max_abs_error"] = float(np.max(np.abs(grid - truth)))
        if args.draws:
            draws, sat = chain_mod.sample_joint(chain, x, args.draws, seed=args.seed + k,
                                                return_saturation=True)
            write_rows(os.path.join(out, f"draws_{k}.csv"),
                       [f"y_{j + 1}" for j in range(draws.shape[1])], draws.tolist())
            entry["saturated_draws"] = sat
            entry["correlation"] = float(np.corrcoef(draws.T)[0, 1])
        summary.append(entry)
    write_json(os.path.join(out, "summary.json"), summary)


# -- parser -------------------------------------------------------------------


def add_training_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--pretrain-iters", type=int)
    g.add_argument("--joint-iters", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--g-step-size", type=float)
    g.add_argument("--f-step-size", type=float)
    g.add_argument("--ext-lambda", type=float)
    g.add_argument("--grid-points", type=int)
    g.add_argument("--q-distribution", choices=("uniform", "beta"))
    g.add_argument("--pretrain-margin", type=float, help="margin K of the pre-training range")
    g.add_argument("--moment-matching", action=argparse.BooleanOptionalAction, default=None,
                   help="fix the first two moments of g's logits in the joint phase")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root random seed")
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="YAML/JSON file whose keys supply option defaults")
    common.add_argument("--split-ratio", type=float, default=0.7)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cnreg", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0, help="root random seed")
    parser.add_argument("--config", default=None)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["synth"] = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--family", choices=FAMILIES, required=True)
    p.add_argument("--n", type=int, help=f"sample size (defaults: {DEFAULT_N})")
    p.add_argument("--param", action="append", help="generator parameter KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = subs["train"] = sub.add_parser("train", parents=[common], help="train a CN model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    p.add_argument("--variant", choices=VARIANTS, default=CN_FULL)
    p.add_argument("--oracle", help="family whose quantile function serves as f for t_g_oracle_f")
    add_training_args(p)
    p.set_defaults(func=cmd_train)

    p = subs["eval"] = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", help="score the named family's true distribution instead")
    p.add_argument("--source", choices=("from_g", "from_f"), default="from_g")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--nominal-grid", help="comma-separated nominal coverage levels")
    p.add_argument("--all-rows", action="store_true", help="score every row, not the test split")
    p.set_defaults(func=cmd_eval)

    p = subs["compare"] = sub.add_parser("compare", parents=[common], help="replicated method comparison")
    p.add_argument("--families", default="hetero_gaussian,weibull")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--replications", type=int, default=10)
    p.add_argument("--n", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", required=True)
    add_training_args(p)
    p.set_defaults(func=cmd_compare)

    p = subs["convergence"] = sub.add_parser("convergence", parents=[common], help="gof versus training size")
    p.add_argument("--family", default="sine1d", choices=sorted(ORACLES))
    p.add_argument("--n-grid", default="100,500,1000,2000,5000")
    p.add_argument("--variants", default=",".join(STUDY_VARIANTS))
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--out", required=True)
    add_training_args(p)
    p.set_defaults(func=cmd_convergence)

    p = subs["chain-train"] = sub.add_parser("chain-train", parents=[common], help="train a chained model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--order", help="outcome order, e.g. 1,0")
    p.add_argument("--cdf-samples", type=int)
    add_training_args(p)
    p.set_defaults(func=cmd_chain_train)

    p = subs["chain-eval"] = sub.add_parser("chain-eval", parents=[common], help="joint CDF grids and draws")
    p.add_argument("--chain", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rows", help="test-split row indices (default: random)")
    p.add_argument("--n-x", type=int, default=5)
    p.add_argument("--z1", help="LO,HI,COUNT (default: 11 points over the 1-99%% training range)")
    p.add_argument("--z2", help="LO,HI,COUNT")
    p.add_argument("--draws", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_chain_eval)
    return parser, subs


def load_config_file(path):
    import yaml

    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a mapping of option names")
    return {str(k).replace("-", "_"): v for k, v in cfg.items()}


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cfg = load_config_file(args.config)
        known = {a.dest for a in subs[args.command]._actions}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        subs[args.command].set_defaults(**cfg)
        args = parser.parse_args(argv)
    if not 0 < args.split_ratio < 1:
        raise ConfigError("split ratio must lie in (0, 1)")
    if getattr(args, "replications", 1) < 1:
        raise ConfigError("replications must be at least 1")
    return args


def main(argv=None):
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
