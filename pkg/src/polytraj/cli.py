"""Command-line entry point: ``polytraj {clean,fit,evaluate,synth,convert-argoverse1}``.

Exit codes: 0 success, 2 bad input or configuration, 3 optimizer failure,
4 hyperparameters that do not match the requested class, degree or horizon.
Every command computes all results before it writes anything, so a failed
run leaves no partial outputs behind.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np
from threadpoolctl import threadpool_limits

from ._validation import NumericalError, ParameterError
from .ebayes import (
    CRITERIA,
    HyperParams,
    OptimizationError,
    OptimizerConfig,
    observed_from_trajectory,
    scan_degrees,
    write_scores,
)
from .noisemodel import covs_from_components
from .regress import ade, posterior, write_error_table
from .synth import SynthConfig, generate, write_corpus
from .trajdata import (
    CLASSES,
    IngestError,
    SmootherConfig,
    TimeOrderError,
    classify_outliers,
    convert_argoverse1,
    export,
    headings,
    ingest,
    prepare_for_fit,
    rts_smooth,
    window,
)

logger = logging.getLogger("polytraj")

EXIT_OK, EXIT_INPUT, EXIT_OPTIMIZER, EXIT_MISMATCH = 0, 2, 3, 4
SIGMA_R_RANGES = (10.0, 20.0, 40.0)
WINDOW_MODES = ("none", "stride_1s", "random_one")


class CLIError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Resolved settings of one command run.

    At most one of ``degree`` and ``degree_range`` may be set; ``fit``
    requires exactly one.
    """

    input: object = None
    output_dir: str = "."
    object_class: str = None
    horizon: float = None
    degree: int = None
    degree_range: tuple = None
    criterion: str = "paper-aic"
    seed: int = 0
    threads: int = None
    window: str = "none"
    family: str = "monomial"
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.degree is not None and self.degree_range is not None:
            raise CLIError("give either --degree or --degree-range, not both")
        if self.object_class is not None and self.object_class not in CLASSES:
            raise CLIError(f"--class must be one of {CLASSES}")
        if self.criterion not in CRITERIA:
            raise CLIError(f"--criterion must be one of {CRITERIA}")
        if self.horizon is not None and not self.horizon > 0:
            raise CLIError("--horizon must be positive")
        if self.window not in WINDOW_MODES:
            raise CLIError(f"window must be one of {WINDOW_MODES}")
        if self.threads is not None and self.threads < 1:
            raise CLIError("--threads must be at least 1")

    @property
    def degrees(self):
        if self.degree is not None:
            return [self.degree]
        if self.degree_range is not None:
            lo, hi = self.degree_range
            return list(range(lo, hi + 1))
        return None


def parse_degree_range(text):
    try:
        lo, hi = (int(part) for part in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected <a>..<b>, got {text!r}") from None
    if not 0 <= lo <= hi:
        raise argparse.ArgumentTypeError(f"degree range {text!r} must satisfy 0 <= a <= b")
    return lo, hi


def load_json(path):
    """Read a JSON file; syntax errors report line and column."""
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CLIError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise CLIError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise CLIError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"config section {name!r}: {exc}") from None


CONFIG_KEYS = {"input", "output_dir", "class", "horizon", "degree", "degree_range", "criterion",
               "seed", "threads", "window", "family", "smoother", "optimizer"}


def resolve_config(args):
    """Merge a JSON config file with command-line flags (flags win)."""
    data = load_json(args.config) if getattr(args, "config", None) else {}
    if not isinstance(data, dict):
        raise CLIError("config file must contain a JSON object")
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise CLIError(f"unknown config keys {sorted(unknown)}")
    if isinstance(data.get("degree_range"), str):
        try:
            data["degree_range"] = parse_degree_range(data["degree_range"])
        except argparse.ArgumentTypeError as exc:
            raise CLIError(str(exc)) from None
    values = {
        "input": data.get("input"),
        "output_dir": data.get("output_dir", "."),
        "object_class": data.get("class"),
        "horizon": data.get("horizon"),
        "degree": data.get("degree"),
        "degree_range": tuple(data["degree_range"]) if data.get("degree_range") else None,
        "criterion": data.get("criterion", "paper-aic"),
        "seed": data.get("seed", 0),
        "threads": data.get("threads"),
        "window": data.get("window", "none"),
        "family": data.get("family", "monomial"),
        "smoother": _section(SmootherConfig, data.get("smoother"), "smoother"),
        "optimizer": _section(OptimizerConfig, data.get("optimizer"), "optimizer"),
    }
    flag_map = {"input": "input", "output_dir": "output_dir", "object_class": "object_class",
                "horizon": "horizon", "criterion": "criterion", "seed": "seed", "threads": "threads",
                "window": "window"}
    for key, dest in flag_map.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[key] = value
    if getattr(args, "degree", None) is not None or getattr(args, "degree_range", None) is not None:
        values["degree"] = args.degree
        values["degree_range"] = args.degree_range
    return RunConfig(**values)


def _require_input(path):
    if path is None:
        raise CLIError("--input is required")
    paths = path if isinstance(path, (list, tuple)) else [path]
    for p in paths:
        if not os.path.isfile(p):
            raise CLIError(f"input file not found: {p}")


def _prepare_output_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise CLIError(f"output directory {path} is not writable")


def _ingest(path, horizon=None):
    try:
        return ingest(path, horizon=horizon)
    except (IngestError, TimeOrderError) as exc:
        raise CLIError(f"{path}: {exc}") from None


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt_T(horizon):
    return "nan" if horizon is None or not np.isfinite(horizon) else f"{horizon:g}"


# clean

def _windows(trajs, cfg):
    if cfg.window == "none":
        return trajs
    if cfg.horizon is None:
        raise CLIError("windowing requires --horizon")
    out = []
    for traj in trajs:
        for k, win in enumerate(window(traj, cfg.horizon, cfg.window, rng_seed=cfg.seed)):
            out.append(replace(win, object_id=f"{traj.object_id}#w{k}"))
    return out


def cmd_clean(cfg):
    _require_input(cfg.input)
    trajs = _ingest(cfg.input, cfg.horizon)
    if cfg.object_class:
        trajs = [t for t in trajs if t.object_class == cfg.object_class]
    trajs = _windows(trajs, cfg)
    clean, reports = [], {}
    for cls in CLASSES:
        members = [t for t in trajs if t.object_class == cls]
        if not members:
            continue
        kept, report = classify_outliers(members, cfg.smoother)
        clean.extend(kept)
        reports[cls] = report.to_dict()
    _prepare_output_dir(cfg.output_dir)
    export(clean, os.path.join(cfg.output_dir, "clean.csv"))
    _write_json(os.path.join(cfg.output_dir, "outliers.json"), reports)
    for cls, rep in reports.items():
        logger.info("%s: %d of %d trajectories rejected", cls, rep["total"]["count"], rep["n_trajectories"])
    return EXIT_OK


# fit

def _load_class_corpus(cfg):
    _require_input(cfg.input)
    if cfg.object_class is None:
        raise CLIError("--class is required")
    trajs = [t for t in _ingest(cfg.input, cfg.horizon) if t.object_class == cfg.object_class]
    if not trajs:
        raise CLIError(f"no {cfg.object_class} trajectories in {cfg.input}")
    try:
        return prepare_for_fit(trajs, cfg.smoother)
    except (TimeOrderError, ValueError, np.linalg.LinAlgError) as exc:
        raise CLIError(f"cannot prepare trajectories for fitting: {exc}") from None


def noise_summary_row(hyper):
    """One row of the noise summary table; agents report sigma_r at 10, 20 and 40 m."""
    noise = hyper.noise
    row = {"class": hyper.kind, "T": _fmt_T(hyper.horizon), "n": hyper.degree}
    if hyper.kind == "ego":
        row.update(sigma_diag=noise.sigma_diag, sigma_cov=noise.sigma_cov)
    else:
        row["sigma_alpha"] = noise.sigma_alpha
        for r in SIGMA_R_RANGES:
            row[f"sigma_r_{r:g}m"] = float(noise.sigma_r(r))
        row["sigma_c"] = noise.sigma_c
    return row


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_fit(cfg):
    degrees = cfg.degrees
    if degrees is None:
        raise CLIError("fit requires --degree or --degree-range")
    corpus = _load_class_corpus(cfg)
    horizon = cfg.horizon if cfg.horizon is not None else float(np.median([t.duration for t in corpus]))
    optimizer = replace(cfg.optimizer, rng_seed=cfg.seed)
    try:
        scan = scan_degrees(corpus, degrees, cfg.object_class, optimizer, cfg.family, horizon)
    except (OptimizationError, NumericalError) as exc:
        _prepare_output_dir(cfg.output_dir)
        dump = os.path.join(cfg.output_dir, "optimizer_iterates.json")
        _write_json(dump, {"error": str(exc), "iterates": getattr(exc, "iterates", [])})
        raise CLIError(f"optimizer failed: {exc}; iterates written to {dump}", EXIT_OPTIMIZER) from None
    selected = scan.selected(cfg.criterion)

    _prepare_output_dir(cfg.output_dir)
    for result in scan.fits:
        result.hyper.save(os.path.join(cfg.output_dir, f"hyper_n{result.hyper.degree}.json"))
    scan.fit_for(selected).hyper.save(os.path.join(cfg.output_dir, "hyper.json"))
    write_scores(scan.scores, os.path.join(cfg.output_dir, "scores.csv"),
                 os.path.join(cfg.output_dir, "scores.json"))
    _write_rows(os.path.join(cfg.output_dir, "noise_summary.csv"),
                [noise_summary_row(r.hyper) for r in scan.fits])
    _write_json(os.path.join(cfg.output_dir, "selection.json"), {
        "criterion": cfg.criterion,
        "degree": selected,
        "degree_aic": scan.degree_aic,
        "degree_bic": scan.degree_bic,
        "degree_aic_conventional": scan.degree_aic_conventional,
        "converged": {str(r.hyper.degree): bool(r.converged) for r in scan.fits},
    })
    print(f"selected degree {selected} ({cfg.criterion})")
    return EXIT_OK


# evaluate

def _load_hyper(path):
    if path is None:
        raise CLIError("--hyper is required")
    data = load_json(path)
    try:
        return HyperParams.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise CLIError(f"{path}: invalid hyperparameter file ({exc})") from None


def cmd_evaluate(cfg, hyper_path):
    hyper = _load_hyper(hyper_path)
    if cfg.object_class is not None and cfg.object_class != hyper.kind:
        raise CLIError(f"hyperparameters are for class {hyper.kind}, not {cfg.object_class}", EXIT_MISMATCH)
    if cfg.degree is not None and cfg.degree != hyper.degree:
        raise CLIError(f"hyperparameters are for degree {hyper.degree}, not {cfg.degree}", EXIT_MISMATCH)
    if cfg.degree_range is not None:
        raise CLIError("evaluate takes a single --degree", EXIT_INPUT)
    if (cfg.horizon is not None and np.isfinite(hyper.horizon)
            and not np.isclose(cfg.horizon, hyper.horizon)):
        raise CLIError(f"hyperparameters are for T = {hyper.horizon:g} s, not {cfg.horizon:g} s", EXIT_MISMATCH)
    cfg = replace(cfg, object_class=hyper.kind)
    corpus = _load_class_corpus(cfg)

    spec = hyper.spec
    lam = hyper.noise.variance_components()
    fits, observations, heads = [], [], []
    try:
        for traj in corpus:
            ob = observed_from_trajectory(traj, hyper.kind)
            fits.append(posterior(ob.y, ob.taus, covs_from_components(ob.components, lam),
                                  hyper.prior, spec, name=ob.name))
            observations.append(ob.y)
            heads.append(headings(traj, rts_smooth(traj, cfg.smoother)))
    except (NumericalError, ParameterError) as exc:
        raise CLIError(f"posterior fit failed: {exc}", EXIT_OPTIMIZER) from None
    report = ade(fits, observations, heads)

    _prepare_output_dir(cfg.output_dir)
    write_error_table([(hyper.kind, hyper.horizon, hyper.degree, report)],
                      os.path.join(cfg.output_dir, "error_table.csv"))
    qname = f"quantiles_{hyper.kind}_T{_fmt_T(hyper.horizon)}_n{hyper.degree}.csv"
    _write_rows(os.path.join(cfg.output_dir, qname), report.quantiles())
    print(f"ADE lon {report.ade_lon:.4g} m, lat {report.ade_lat:.4g} m over {report.n_samples} samples")
    return EXIT_OK


# synth

def cmd_synth(args):
    data = load_json(args.config) if args.config else {}
    if not isinstance(data, dict):
        raise CLIError("synth config must be a JSON object")
    overrides = {"rng_seed": args.seed, "object_class": args.object_class, "horizon": args.horizon,
                 "degree": args.degree, "n_trajectories": args.n_trajectories}
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        synth_cfg = SynthConfig.from_dict(data)
        corpus, truth = generate(synth_cfg)
    except (TypeError, ValueError, KeyError) as exc:
        raise CLIError(f"invalid synth config: {exc}") from None
    out = args.output_dir or "."
    _prepare_output_dir(out)
    write_corpus(corpus, truth, os.path.join(out, "corpus.csv"), os.path.join(out, "truth.json"))
    print(f"wrote {len(corpus)} trajectories to {os.path.join(out, 'corpus.csv')}")
    return EXIT_OK


def cmd_convert(args):
    _require_input(args.input)
    try:
        corpus = convert_argoverse1(args.input, None, include_others=args.include_others)
    except (KeyError, ValueError) as exc:
        raise CLIError(f"cannot convert: {exc}") from None
    out = args.output_dir or "."
    _prepare_output_dir(out)
    export(corpus, os.path.join(out, "corpus.csv"))
    return EXIT_OK


# argument parsing

def _add_common(p, degree=True):
    p.add_argument("--input", help="input corpus CSV")
    p.add_argument("--output-dir", dest="output_dir", help="directory for outputs (created if missing)")
    p.add_argument("--class", dest="object_class", choices=CLASSES, help="object class to process")
    p.add_argument("--horizon", type=float, help="window length T in seconds")
    if degree:
        group = p.add_mutually_exclusive_group()
        group.add_argument("--degree", type=int, help="single polynomial degree")
        group.add_argument("--degree-range", dest="degree_range", type=parse_degree_range,
                           help="inclusive degree range <a>..<b>")
    p.add_argument("--criterion", choices=CRITERIA,
                   help="degree selection criterion: paper-aic (per-trajectory log-likelihood minus dof, "
                        "default), aic (conventional) or bic")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threads", type=int, help="cap on BLAS/OpenMP threads")
    p.add_argument("--config", help="JSON config; command-line flags override its values")


def build_parser():
    parser = argparse.ArgumentParser(prog="polytraj", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("clean", help="reject outlier trajectories and write a clean corpus")
    _add_common(p, degree=False)
    p.add_argument("--window", choices=WINDOW_MODES, help="cut tracks into windows of length --horizon")

    p = sub.add_parser("fit", help="fit noise and prior per degree and select a degree")
    _add_common(p)

    p = sub.add_parser("evaluate", help="representation error of a corpus under fitted hyperparameters")
    _add_common(p)
    p.add_argument("--hyper", help="hyperparameter JSON written by fit")

    p = sub.add_parser("synth", help="generate a synthetic corpus with ground truth")
    p.add_argument("--config", help="JSON generator config")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--class", dest="object_class", choices=CLASSES)
    p.add_argument("--horizon", type=float)
    p.add_argument("--degree", type=int)
    p.add_argument("--n-trajectories", dest="n_trajectories", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("convert-argoverse1", help="convert forecasting CSV logs to the corpus format")
    p.add_argument("--input", nargs="+", help="one or more log files")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--include-others", action="store_true", help="keep OTHERS objects as agents")
    p.add_argument("--threads", type=int)
    return parser


def _dispatch(args):
    if args.command == "synth":
        return cmd_synth(args)
    if args.command == "convert-argoverse1":
        return cmd_convert(args)
    cfg = resolve_config(args)
    if args.command == "clean":
        return cmd_clean(cfg)
    if args.command == "fit":
        return cmd_fit(cfg)
    return cmd_evaluate(cfg, args.hyper)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(limits=args.threads):
            return _dispatch(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
