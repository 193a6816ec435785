"""
Command-line entrypoint, exposed as the `gauss-cf` console script.

  fit           fit the schema and data prior, train the classifier
                -> model.json, prior.json, schema.json, latent.csv, train_trace.csv
  generate      counterfactuals for one reference
                -> counterfactuals.csv, changes.csv
  bench         every configured method over sampled references
                -> report.csv, records.csv, report.txt (+ grid.csv)
  density-grid  log density of a prior or linear-model posterior on a 2-D grid
                -> density.csv

Every command is deterministic given its inputs and --seed. Exit codes:
0 ok, 2 usage, 3 config, 4 missing artifact, 5 schema/dataset mismatch,
6 numerical failure, 7 no counterfactual found.
"""

import argparse
import json
import logging
import os
import sys
from datetime import datetime
from typing import Any, Dict, List, Optional

import numpy as np

from cf_utils.codec import DISCRETE, decode_row, encode_row, save_schema
from cf_utils.errors import (
    ArtifactError,
    ConfigError,
    CounterfactualError,
    InsufficientDataError,
    NoCounterfactualError,
    SchemaError,
    ScmError,
    UnreachableError,
)
from cf_utils.gaussian import Gaussian, log_pdf
from cf_utils.generators import METHODS, GenRequest, MethodParams, generate
from cf_utils.models import (
    LinearLikelihood,
    TrainConfig,
    forward,
    init_classifier,
    load_classifier,
    save_classifier,
    train,
)
from cf_utils.posterior import posterior_pgm1, posterior_pgm2, posterior_pgm3
from cf_utils.prior import DataPrior, build_joint
from cf_utils.utils import load_json, save_json, write_csv
from run_utils.bench import fit_prior, prepare, run_benchmark, summary_line, write_reports
from run_utils.config import RunConfig, build_config, load_config
from run_utils.datasets import build_dataset, load_dataset, load_table, schema_hints

PANELS = ("prior", "pgm1", "pgm2", "pgm3")
GRID_RES = 201
SPAN = 3.5  # default grid half-width, in prior standard deviations

# y = 2x₁ − 3x₂ + 5 with target y′ = 10 over a correlated 2-D prior
DEMO_A = [[2.0, -3.0]]
DEMO_B = [5.0]
DEMO_Y_PRIME = 10.0
DEMO_MU = [0.0, 0.0]
DEMO_COV = [[4.04, -7.80], [-7.80, 17.00]]

EXIT_CONFIG = 3
EXIT_ARTIFACT = 4
EXIT_SCHEMA = 5
EXIT_NUMERICAL = 6
EXIT_GENERATION = 7


def _now() -> str:
    return datetime.now().strftime("%H:%M:%S")


def _line_buffer_stdout():
    """Flush stdout on every line so progress shows live when piped."""
    if hasattr(sys.stdout, "reconfigure"):
        sys.stdout.reconfigure(line_buffering=True)


def _run(name, fn):
    print(f"[{_now()}] [{name}] starting")
    try:
        fn()
        print(f"[{_now()}] [{name}] done")
    except Exception as e:
        print(f"[{_now()}] [{name}] FAILED: {e}")
        raise


def exit_code(e: CounterfactualError) -> int:
    if isinstance(e, ArtifactError):
        return EXIT_ARTIFACT
    if isinstance(e, ConfigError):
        return EXIT_CONFIG
    if isinstance(e, (SchemaError, ScmError, InsufficientDataError)):
        return EXIT_SCHEMA
    if isinstance(e, (NoCounterfactualError, UnreachableError)):
        return EXIT_GENERATION
    return EXIT_NUMERICAL


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _param_overrides(args) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for item in getattr(args, "param", None) or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        out[key.strip()] = _parse_value(value.strip())
    if getattr(args, "alpha", None) is not None:
        out["alpha"] = args.alpha
    if getattr(args, "gamma", None) is not None:
        out["gamma"] = args.gamma
    return out


def _config(args, **extra) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "out": args.out,
        "workers": getattr(args, "workers", None),
        "count": getattr(args, "count", None),
        "target": getattr(args, "target", None),
        "k_ynn": getattr(args, "k_ynn", None),
        "dataset": getattr(args, "dataset", None),
        "schema": getattr(args, "schema", None),
        "model": getattr(args, "model", None),
        **extra,
    }
    if args.config:
        return load_config(args.config, overrides)
    return build_config({}, overrides, source="command line")


# --- fit ---------------------------------------------------------------------


def cmd_fit(args) -> None:
    cfg = _config(args)
    data = load_dataset(cfg)
    clf = init_classifier(data.rows.shape[1], cfg.hidden, data.class_count, cfg.activation, cfg.seed)
    result = train(clf, data.rows, data.labels,
                   TrainConfig(cfg.train.lr, cfg.train.steps, cfg.train.batch_size, cfg.seed))
    prior = fit_prior(cfg, data)
    out = str(cfg.out)
    os.makedirs(out, exist_ok=True)
    save_classifier(result.classifier, os.path.join(out, "model.json"))
    save_json(os.path.join(out, "prior.json"), prior.to_json())
    save_schema(data.schema, os.path.join(out, "schema.json"))
    write_csv(os.path.join(out, "latent.csv"), [*data.schema.latent_names, "label"],
              [[*row, label] for row, label in zip(data.rows, data.labels)])
    write_csv(os.path.join(out, "train_trace.csv"), ["step", "loss", "smoothed"],
              [[i, raw, s] for i, (raw, s) in enumerate(zip(result.raw_losses, result.trace))])
    print(f"[{_now()}] {data.rows.shape[0]} rows, {data.rows.shape[1]} latent columns, "
          f"{data.class_count} classes; artifacts in {out}")


# --- generate ----------------------------------------------------------------


def _raw_reference(schema, text: str) -> np.ndarray:
    values: List[Any] = [v.strip() for v in text.split(",")]
    if len(values) != len(schema.features):
        raise SchemaError(f"--reference has {len(values)} values, the schema has {len(schema.features)} features")
    parsed = []
    for spec, v in zip(schema.features, values):
        if spec.kind in DISCRETE:
            parsed.append(v)
            continue
        try:
            parsed.append(float(v))
        except ValueError:
            raise SchemaError(f"{spec.name}: {v!r} is not a number") from None
    return encode_row(schema, parsed)


def _method_spec(cfg: RunConfig, name: Optional[str]):
    name = name or (cfg.methods[0].name if cfg.methods else "ours")
    for spec in cfg.methods:
        if spec.name == name:
            return name, dict(spec.params)
    return name, {}


def _cell_delta(kind, ref, cf):
    if kind in DISCRETE:
        return 0 if ref == cf else 1
    return float(cf) - float(ref)


def cmd_generate(args) -> None:
    cfg = _config(args)
    if cfg.model is None:
        raise ArtifactError("generate needs --model (run `gauss-cf fit` first)")
    if cfg.dataset is not None:
        hints, label, scm = schema_hints(load_json(str(cfg.schema_file), "schema"))
        data = build_dataset(load_table(str(cfg.dataset)), hints, label, scm)
    else:
        data = load_dataset(cfg)
    clf = load_classifier(str(cfg.model))
    prior = DataPrior.from_json(load_json(args.prior, "prior")) if args.prior else None
    setup = prepare(cfg, data, clf, prior)

    if args.reference is not None:
        ref = _raw_reference(data.schema, args.reference)
    elif args.reference_index is not None:
        if not 0 <= args.reference_index < data.rows.shape[0]:
            raise ConfigError(f"--reference-index must lie in [0, {data.rows.shape[0]})")
        ref = data.rows[args.reference_index]
    else:
        raise ConfigError("give the reference with --reference-index or --reference")
    m = clf.class_count
    pred = int(np.argmax(forward(clf, ref)))
    target = cfg.target if cfg.target is not None else (pred + 1) % m
    if target >= m:
        raise ConfigError(f"target {target} is outside the {m} classes")

    method, params = _method_spec(cfg, args.method)
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    mp = MethodParams.from_mapping({**params, **_param_overrides(args)})
    res = generate(GenRequest(ref, target, method, cfg.count, cfg.seed, mp), setup.ctx)

    names = data.schema.names
    kinds = [f.kind for f in data.schema.features]
    ref_raw = decode_row(data.schema, ref)
    cf_rows, changes = [], []
    for i, (z, prob, ok) in enumerate(zip(res.counterfactuals, res.target_probs, res.valid)):
        raw = decode_row(data.schema, z)
        cf_rows.append([i, float(prob), bool(ok), *raw])
        for name, kind, a, b in zip(names, kinds, ref_raw, raw):
            changes.append([i, name, a, b, _cell_delta(kind, a, b)])
    out = str(cfg.out)
    write_csv(os.path.join(out, "counterfactuals.csv"), ["index", "target_prob", "valid", *names], cf_rows)
    write_csv(os.path.join(out, "changes.csv"), ["index", "feature", "reference", "counterfactual", "delta"],
              changes)
    print(f"[{_now()}] {method}: {len(cf_rows)} counterfactual(s) for class {target}, "
          f"success {res.success_rate:.2f}; written to {out}")


# --- bench -------------------------------------------------------------------


def cmd_bench(args) -> None:
    if not args.config:
        raise ConfigError("bench needs --config")
    cfg = _config(args)
    params = _param_overrides(args)
    if args.method or params:
        methods = [m.model_dump() for m in cfg.methods]
        if args.method:
            methods = [m for m in methods if m["name"] == args.method] or [{"name": args.method, "params": {}}]
        methods = [{**m, "params": {**m["params"], **params}} for m in methods]
        cfg = build_config(cfg.model_dump(by_alias=True), {"methods": methods}, source=args.config)
    result = run_benchmark(cfg)
    write_reports(result, str(cfg.out), list(cfg.grid or {}))
    if result.notice:
        print(f"[{_now()}] {result.notice}")
    for report in result.reports:
        print(f"[{_now()}] {summary_line(report)}")


# --- density-grid ------------------------------------------------------------


def _floats(text: str, n: int, flag: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"{flag} expects {n} comma-separated numbers, got {text!r}") from None
    if len(values) != n:
        raise ConfigError(f"{flag} expects {n} numbers, got {len(values)}")
    return values


def panel_gaussian(panel: str, prior: DataPrior, lik: LinearLikelihood, x: np.ndarray,
                   y_prime, alpha: float, gamma: float) -> Gaussian:
    """The distribution a density panel shows: the data prior or a PGM posterior."""
    if panel == "prior":
        return prior.gaussian
    w_prec = gamma * np.eye(prior.dim)
    if panel == "pgm1":
        return posterior_pgm1(lik, x, y_prime, w_prec)
    if panel == "pgm2":
        return posterior_pgm2(lik, build_joint(prior, alpha), x, y_prime)
    if panel == "pgm3":
        return posterior_pgm3(lik, prior, x, y_prime, w_prec)
    raise ConfigError(f"panel must be one of {PANELS}, got {panel!r}")


def density_grid(g: Gaussian, bounds, res: int):
    """(x, y, log density, density) rows, x varying fastest."""
    if res < 2:
        raise ConfigError(f"--grid-res must be >= 2, got {res}")
    x0, x1, y0, y1 = bounds
    if not (x0 < x1 and y0 < y1):
        raise ConfigError(f"--bounds must be increasing, got {bounds}")
    xs = np.linspace(x0, x1, res)
    ys = np.linspace(y0, y1, res)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    lp = log_pdf(g, pts)
    return pts, lp


def cmd_density_grid(args) -> None:
    if args.prior:
        prior = DataPrior.from_json(load_json(args.prior, "prior"))
    else:
        prior = DataPrior(np.array(DEMO_MU), np.array(DEMO_COV))
    if prior.dim != 2:
        raise SchemaError(f"density grids are 2-D; the prior has {prior.dim} dimensions")
    lik = LinearLikelihood(np.array(DEMO_A), np.array(DEMO_B), np.eye(1) * args.precision)
    x = np.array(_floats(args.reference, 2, "--reference")) if args.reference else prior.mu
    alpha = 0.5 if args.alpha is None else args.alpha
    gamma = 1.0 if args.gamma is None else args.gamma
    g = panel_gaussian(args.panel, prior, lik, x, np.array([args.y_prime]), alpha, gamma)
    if args.bounds:
        bounds = _floats(args.bounds, 4, "--bounds")
    else:
        sd = np.sqrt(np.diag(prior.sigma))
        bounds = [prior.mu[0] - SPAN * sd[0], prior.mu[0] + SPAN * sd[0],
                  prior.mu[1] - SPAN * sd[1], prior.mu[1] + SPAN * sd[1]]
    pts, lp = density_grid(g, bounds, args.grid_res)
    out = args.out or "out"
    write_csv(os.path.join(out, "density.csv"), ["x", "y", "log_density", "density"],
              [[p[0], p[1], v, float(np.exp(v))] for p, v in zip(pts, lp)])
    best = pts[int(np.argmax(lp))]
    print(f"[{_now()}] {args.panel}: {len(pts)} cells, mode near ({best[0]:.4g}, {best[1]:.4g}); "
          f"written to {out}")


# --- entrypoint --------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true", help="DEBUG logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gauss-cf", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit schema + prior and train the classifier")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--schema")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("generate", help="counterfactuals for one reference")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--schema")
    p.add_argument("--model")
    p.add_argument("--prior", help="prior.json from fit (default: refit from the dataset)")
    p.add_argument("--reference-index", type=int)
    p.add_argument("--reference", help="raw feature values, comma separated, in schema order")
    p.add_argument("--target", type=int)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--count", type=int)
    p.add_argument("--param", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="benchmark the configured methods")
    _common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--target", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--k-ynn", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--param", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("density-grid", help="log density of a prior / PGM posterior on a 2-D grid")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--panel", choices=PANELS, default="pgm2")
    p.add_argument("--prior", help="prior.json (2-D); default is the correlated demo prior")
    p.add_argument("--reference", help="x1,x2 (default: the prior mean)")
    p.add_argument("--y-prime", type=float, default=DEMO_Y_PRIME)
    p.add_argument("--precision", type=float, default=1.0, help="likelihood precision L")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--grid-res", type=int, default=GRID_RES)
    p.add_argument("--bounds", help="xmin,xmax,ymin,ymax")
    p.set_defaults(func=cmd_density_grid)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _line_buffer_stdout()
    try:
        _run(args.command, lambda: args.func(args))
    except CounterfactualError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code(e)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
