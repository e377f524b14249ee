"""policyrank command line: ingest, synth, train, eval, gradcheck.

Exit codes: 0 success, 1 internal failure (or a failed gradient check),
2 usage or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from . import data as D
from . import learners as L
from . import metrics as M
from .errors import ContractError, IngestionError
from .objectives import BarrierConfig

logger = logging.getLogger("policyrank")

DATASET_FILE = "dataset.csv"
SPLIT_DIR = "split"


class UsageError(Exception):
    """Bad flags or inputs; exit code 2."""


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def parse_key_values(text, source="<config>"):
    """key=value lines; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = val.strip()
    return out


def read_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path) as fh:
        return parse_key_values(fh.read(), path)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def write_manifest(out_dir, command, args, inputs, outputs, seeds=None, settings=None):
    manifest = {
        "command": command,
        "config": getattr(args, "config", None),
        "seeds": seeds if seeds is not None else [getattr(args, "seed", None)],
        "inputs": inputs,
        "outputs": sorted(outputs),
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "version": __version__,
    }
    if settings is not None:
        manifest["settings"] = settings
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def load_data(path):
    """A processed dataset (file or directory) and its split.

    A directory holds dataset.csv plus split/*.idx. A bare file uses the
    split directory next to it when present, else a fresh seed-0 split.
    """
    if not os.path.exists(path):
        raise UsageError(f"dataset not found: {path}")
    if os.path.isdir(path):
        file, split_dir = os.path.join(path, DATASET_FILE), os.path.join(path, SPLIT_DIR)
    else:
        file, split_dir = path, os.path.join(os.path.dirname(path) or ".", SPLIT_DIR)
    data = D.CohortDataset.load(file)
    if os.path.isdir(split_dir):
        split = D.Split.load(split_dir)
        if max(int(np.max(part, initial=-1)) for part in (split.train, split.validation, split.test)) >= data.n:
            raise UsageError(f"{split_dir}: indices exceed the dataset size {data.n}")
    else:
        split = D.split_3_1_1(data.treatment, 0)
    return data, split


def save_data(out_dir, data, split):
    os.makedirs(out_dir, exist_ok=True)
    data.save(os.path.join(out_dir, DATASET_FILE))
    split.save(os.path.join(out_dir, SPLIT_DIR))
    return [DATASET_FILE] + [os.path.join(SPLIT_DIR, f"{p}.idx") for p in ("train", "validation", "test")]


# ---------------------------------------------------------------------------
# ingest / synth
# ---------------------------------------------------------------------------

def resolve_schema(name):
    if name in D.RECIPES:
        return D.RECIPES[name]()
    if not os.path.exists(name):
        raise UsageError(f"schema file not found: {name} (builtins: {', '.join(D.RECIPES)})")
    return D.SchemaConfig.from_file(name)


def cmd_ingest(args):
    schema = resolve_schema(args.schema)
    result = D.load_csv(args.input, schema, seed=args.seed)
    outputs = save_data(args.out, result.dataset, result.split)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(result.report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append("report.json")
    rep = result.report
    print(f"rows read {rep['rows_read']}, kept {rep['rows_kept']}; n={rep['n']} d={rep['d']} treated={rep['treated']}")
    for rule, count in rep["dropped"].items():
        print(f"  dropped {count} row(s) by filter {rule}")
    if rep["constant_columns"]:
        print(f"  constant columns: {', '.join(rep['constant_columns'])}")
    write_manifest(args.out, "ingest", args, [args.input, args.schema], outputs)
    return 0


def resolve_synth_spec(name, seed):
    if name in D.PRESETS:
        spec = D.PRESETS[name]
    elif os.path.exists(name):
        spec = D.PRESETS["default"]
        with open(name) as fh:
            values = parse_key_values(fh.read(), name)
        fields = {f.name: f for f in dataclasses.fields(D.SynthSpec)}
        updates = {}
        for key, val in values.items():
            if key == "preset":
                continue
            if key not in fields:
                raise UsageError(f"{name}: unknown synthetic spec field {key!r}")
            kind = type(getattr(spec, key))
            updates[key] = val if kind is str else kind(float(val)) if kind is int else kind(val)
        if "preset" in values:
            spec = D.PRESETS[values["preset"]]
        spec = dataclasses.replace(spec, **updates)
    else:
        raise UsageError(f"unknown synthetic spec {name!r} (presets: {', '.join(D.PRESETS)})")
    return dataclasses.replace(spec, seed=seed)


def cmd_synth(args):
    spec = resolve_synth_spec(args.spec, args.seed)
    data, truth = D.synth_generate(spec)
    split = D.split_3_1_1(data.treatment, args.seed)
    outputs = save_data(args.out, data, split)
    truth.save(os.path.join(args.out, "truth.csv"))
    outputs.append("truth.csv")
    print(f"n={data.n} d={data.d} treated={data.n_treated} classes={data.n_classes}")
    write_manifest(args.out, "synth", args, [args.spec], outputs)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {f.name for f in dataclasses.fields(L.TrainConfig)}
_EXTRA_KEYS = {"percentage", "budget", "temperature", "increment", "period", "lambda_grid", "penalty"}


def build_config(args, seed):
    """Defaults per model, then the config file, then explicit flags."""
    values = read_config(args.config)
    unknown = set(values) - _CONFIG_KEYS - _EXTRA_KEYS
    if unknown:
        raise UsageError(f"{args.config}: unknown key(s) {sorted(unknown)}")
    for key in _CONFIG_KEYS | _EXTRA_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    base = L.SCPM_DEFAULTS if args.model == "scpm" else L.DRM_DEFAULTS
    cfg = {}
    for f in dataclasses.fields(L.TrainConfig):
        if f.name not in values:
            continue
        val = values[f.name]
        default = getattr(base, f.name)
        if f.name == "iterations" or isinstance(default, int) and not isinstance(default, bool):
            cfg[f.name] = int(val)
        elif isinstance(default, bool):
            cfg[f.name] = str(val).lower() in ("1", "true", "yes")
        elif isinstance(default, float):
            cfg[f.name] = float(val)
        else:
            cfg[f.name] = str(val)
    cfg["seed"] = seed
    config = dataclasses.replace(base, **cfg)
    return config, values


def build_barrier(values):
    pct, budget = values.get("percentage"), values.get("budget")
    if pct is None and budget is None:
        pct = 0.4
    kw = {k: float(values[k]) for k in ("temperature", "increment") if k in values}
    if "period" in values:
        kw["period"] = int(values["period"])
    return BarrierConfig(percentage=None if pct is None else float(pct),
                         budget=None if budget is None else float(budget), **kw)


def train_one(args, data, split, seed, out_dir):
    config, values = build_config(args, seed)
    train, val, test = (data.subset(getattr(split, p)) for p in ("train", "validation", "test"))
    config = dataclasses.replace(config, batch_size=min(config.batch_size, train.n))
    if args.model == "scpm":
        trained = L.train_scpm(train, config=config, validation=val)
    elif args.model == "drm":
        trained = L.train_drm(train, config, validation=val)
    elif args.model == "constrained":
        trained = L.train_constrained(train, config, build_barrier(values), validation=val)
    else:
        grid = values.get("lambda_grid")
        grid = L.LAMBDA_GRID if grid is None else _float_list(grid) if isinstance(grid, str) else grid
        trained = L.train_duality(train, val, tuple(grid), float(values.get("penalty", 1.0)))
    os.makedirs(out_dir, exist_ok=True)
    trained.save(os.path.join(out_dir, "model.ckpt"))
    trained.write_log(os.path.join(out_dir, "train_log.csv"))
    row = {"seed": seed,
           "val_aucc": L._validation_aucc(trained.score(val.x), val),
           "test_aucc": L._validation_aucc(trained.score(test.x), test)}
    if args.model == "duality":
        row["lambda"] = float(trained.meta["lambda"])
    return row, ["model.ckpt", "train_log.csv"]


def cmd_train(args):
    data, split = load_data(args.data)
    seeds = _int_list(args.seeds) if args.seeds else [args.seed]
    os.makedirs(args.out, exist_ok=True)
    rows, outputs = [], []
    for seed in seeds:
        sub = os.path.join(args.out, f"seed_{seed}") if len(seeds) > 1 else args.out
        row, files = train_one(args, data, split, seed, sub)
        rows.append(row)
        outputs += [os.path.relpath(os.path.join(sub, f), args.out) for f in files]
        print(f"seed {seed}: " + ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "seed"))
    keys = [k for k in rows[0] if k != "seed"]
    with open(os.path.join(args.out, "summary.csv"), "w") as fh:
        fh.write("metric,mean,std,n\n")
        for k in keys:
            vals = np.array([r[k] for r in rows])
            fh.write(f"{k},{float(vals.mean())!r},{float(vals.std())!r},{len(vals)}\n")
            print(f"{k}: {vals.mean():.4f} ± {vals.std():.4f} over {len(vals)} seed(s)")
    outputs.append("summary.csv")
    config, values = build_config(args, seeds[0])
    settings = {k: v for k, v in dataclasses.asdict(config).items() if k != "seed"}
    settings.update({k: values[k] for k in _EXTRA_KEYS if k in values})
    write_manifest(args.out, "train", args, [args.data], outputs, seeds, settings)
    return 0


# ---------------------------------------------------------------------------
# eval / gradcheck
# ---------------------------------------------------------------------------

def _parse_metrics(text):
    if text == "all":
        return M.METRICS
    names = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in M.METRICS]
    if bad:
        raise UsageError(f"unknown metric(s) {bad}; choose from all or {','.join(M.METRICS)}")
    return names


def cmd_eval(args):
    metric_names = _parse_metrics(args.metrics)
    if args.checkpoint is None and not args.random:
        raise UsageError("give --checkpoint, --random, or both")
    data, split = load_data(args.data)
    part = data if args.split == "all" else data.subset(getattr(split, args.split))
    scorers = {}
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        trained = L.TrainedModel.load(args.checkpoint)
        if trained.input_dim != part.d:
            raise UsageError(f"checkpoint expects {trained.input_dim} covariates but the dataset has {part.d}")
        scorers[trained.kind] = trained.score(part.x)
    if args.random:
        scorers["random"] = np.random.default_rng(args.seed).permutation(part.n).astype(np.float64)
    os.makedirs(args.out, exist_ok=True)
    outputs = ["metrics.csv"]
    lines = ["scorer,metric,value"]
    for name, scores in scorers.items():
        es = M.RankedEvalSet.from_dataset(scores, part)
        for metric, value in M.evaluate(es, metric_names, args.steps, args.buckets, args.h).items():
            lines.append(f"{name},{metric},{value!r}")
        curve_file = f"cost_curve_{name}.csv"
        M.cost_curve(es, args.steps).to_csv(os.path.join(args.out, curve_file))
        outputs.append(curve_file)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    width = max(len(n) for n in scorers)
    for line in lines[1:]:
        name, metric, value = line.split(",")
        print(f"{name:<{width}}  {metric:<5} {float(value):.4f}")
    write_manifest(args.out, "eval", args, [args.data] + ([args.checkpoint] if args.checkpoint else []), outputs)
    return 0


def cmd_gradcheck(args):
    if not 2 <= args.rows <= 100:
        raise UsageError(f"--rows must be between 2 and 100, got {args.rows}")
    data, _ = load_data(args.data)
    models = L.GRADCHECK_KINDS if args.model == "all" else [args.model]
    ok = True
    print("model,rows,parameters,max_rel_error,tolerance,result")
    for kind in models:
        rep = L.gradient_check(kind, data, rows=args.rows, seed=args.seed)
        passed = rep.passed(args.tolerance)
        ok &= passed
        print(f"{kind},{rep.rows},{rep.analytic.size},{rep.max_rel_error:.3e},{args.tolerance:g},"
              f"{'pass' if passed else 'fail'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="policyrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"policyrank {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="CSV + schema -> processed dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--schema", required=True, help=f"schema file or builtin ({', '.join(D.RECIPES)})")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    p.add_argument("--spec", default="default", help=f"preset ({', '.join(D.PRESETS)}) or key=value file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a ranking model")
    p.add_argument("--model", required=True, choices=L.MODEL_KINDS)
    p.add_argument("--data", required=True, help="processed dataset file or directory")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", help="comma-separated seed sweep, e.g. 0,1,2")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--reg", type=float)
    p.add_argument("--propensity", choices=("off", "weighted"))
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--percentage", type=float)
    p.add_argument("--budget", type=float)
    p.add_argument("--lambda-grid", dest="lambda_grid", help="comma-separated lambda values")
    p.add_argument("--penalty", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a dataset split and compute metrics")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default="all")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default="test", choices=("train", "validation", "test", "all"))
    p.add_argument("--random", action="store_true", help="also score a random ranking")
    p.add_argument("--seed", type=int, default=0, help="seed of the random ranking")
    p.add_argument("--steps", type=int, default=100, help="cost-curve resolution")
    p.add_argument("--buckets", type=int, default=10, help="KRCC buckets")
    p.add_argument("--h", type=float, default=30, help="LIFT@h percentile")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="tape gradients vs central differences")
    p.add_argument("--model", default="all", choices=("all",) + L.GRADCHECK_KINDS)
    p.add_argument("--data", required=True)
    p.add_argument("--rows", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ContractError, IngestionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit 1
        logger.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
