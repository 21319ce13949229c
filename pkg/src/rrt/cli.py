"""Command line front end: fit, infer, simulate, compare.

Exit codes: 0 ok, 2 user or config error, 3 integrity error (tree and data
do not match), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import platform
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .baselines import naive_intervals
from .core import DataError, Dataset, FittedTree
from .grow import GrowConfig, grow
from .inference import VARIANTS, NumericalError, estimate_sigma, infer_tree
from .simlab import PRESETS, ExperimentConfig, run_experiment, stderr_progress

EXIT_OK, EXIT_USER, EXIT_INTEGRITY, EXIT_NUMERICAL = 0, 2, 3, 4

RESULT_FIELDS = (
    "leaf", "node_id", "n_R", "mean", "lower", "upper", "p_value", "method", "variant", "r", "tau", "sigma", "status",
)


class UserError(Exception):
    pass


class IntegrityError(Exception):
    pass


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as e:
        raise UserError(f"cannot read config {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise UserError(f"config {path} must be a mapping")
    return cfg


def write_manifest(out: Path, command: str, config: dict, seed, inputs=(), started=None):
    """Sibling ``<out>.manifest.json`` recording how ``out`` was produced."""
    manifest = {
        "schema": "rrt.run_manifest/1",
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256_file(p) for p in inputs},
        "output": {str(out): _sha256_file(out)},
        "tool_version": __version__,
        "python": platform.python_version(),
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sigma(args, data: Dataset) -> float | None:
    if args.sigma is not None and args.estimate_sigma:
        raise UserError("give either --sigma or --estimate-sigma, not both")
    if args.sigma is not None:
        if not args.sigma > 0:
            raise UserError("--sigma must be positive")
        return float(args.sigma)
    if args.estimate_sigma:
        return estimate_sigma(data)
    return None


def _read_data(args) -> Dataset:
    if not args.data or not args.response:
        raise UserError("--data and --response are required")
    try:
        return Dataset.from_csv(args.data, args.response)
    except FileNotFoundError:
        raise UserError(f"no such file: {args.data}") from None
    except DataError as e:
        raise UserError(str(e)) from None


# fit ------------------------------------------------------------------------


def cmd_fit(args) -> int:
    started = _now()
    data = _read_data(args)
    raw = _load_config(args.config)
    cfg_map = raw.get("grow", raw)
    try:
        cfg = GrowConfig.from_mapping(cfg_map)
    except (TypeError, ValueError) as e:
        raise UserError(f"bad grow config: {e}") from None
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    sigma = _sigma(args, data)
    if sigma is not None:
        cfg = replace(cfg, tau=args.tau_mult * sigma)
    elif args.tau_mult != 1.0:
        raise UserError("--tau-mult needs --sigma or --estimate-sigma")
    tree = grow(data, cfg)
    text = tree.to_json(indent=1)
    rendering = tree.render()
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n", encoding="utf-8")
        out.with_suffix(".txt").write_text(rendering + "\n", encoding="utf-8")
        snapshot = {**cfg.hyperparams(), "stopping": tree.stopping, "sigma": sigma, "tau_mult": args.tau_mult}
        write_manifest(out, "fit", snapshot, cfg.seed, inputs=[args.data], started=started)
    else:
        sys.stdout.write(text + "\n")
    print(rendering, file=sys.stderr)
    return EXIT_OK


# infer ----------------------------------------------------------------------


def cmd_infer(args) -> int:
    started = _now()
    data = _read_data(args)
    try:
        tree = FittedTree.from_json(Path(args.tree).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as e:
        raise UserError(f"cannot read tree {args.tree}: {e}") from None
    if tree.dataset_hash != data.content_hash():
        raise IntegrityError(
            "dataset does not match the one the tree was fit on "
            f"(tree {tree.dataset_hash[:12]}, data {data.content_hash()[:12]})"
        )
    sigma = _sigma(args, data)
    if sigma is None:
        raise UserError("inference needs --sigma or --estimate-sigma")
    if not 0 < args.alpha < 1:
        raise UserError("--alpha must lie in (0, 1)")
    if args.variant == "naive":
        rows = naive_intervals(tree, data, sigma, args.alpha)
    else:
        if args.r < 1:
            raise UserError("--r must be >= 1")
        try:
            rows = infer_tree(tree, data, sigma, args.alpha, variant=args.variant, r=args.r)
        except ValueError as e:
            raise UserError(str(e)) from None
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _cell(v) for k, v in row.to_row().items()})
    failed = [r for r in rows if r.status.startswith("error")]
    if args.out:
        out = Path(args.out)
        out.write_text(buf.getvalue(), encoding="utf-8")
        snapshot = {"alpha": args.alpha, "variant": args.variant, "r": args.r, "sigma": sigma}
        write_manifest(out, "infer", snapshot, tree.seed, inputs=[args.tree, args.data], started=started)
    else:
        sys.stdout.write(buf.getvalue())
    if failed:
        for r in failed:
            print(f"leaf {r.leaf}: {r.status}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


# simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = _now()
    cfg_map = _load_config(args.config)
    if args.preset:
        cfg_map = {"preset": args.preset, **cfg_map}
    for key, val in (("master_seed", args.seed), ("n_reps", args.n_reps), ("n_jobs", args.n_jobs)):
        if val is not None:
            cfg_map[key] = val
    try:
        cfg = ExperimentConfig.from_mapping(cfg_map)
    except (TypeError, ValueError, KeyError) as e:
        raise UserError(f"bad experiment config: {e}") from None
    report = run_experiment(cfg, progress=stderr_progress)
    prefix = Path(args.out or cfg.name)
    csv_path = prefix.with_name(prefix.name + ".csv")
    report.to_csv(csv_path)
    report.panel_csv(prefix.with_name(prefix.name + ".panel.csv"))
    report.summary_json(prefix.with_name(prefix.name + ".summary.json"), name=cfg.name, alpha=cfg.alpha)
    write_manifest(csv_path, "simulate", cfg.to_mapping(), cfg.master_seed, started=started)
    for rec in report.summary():
        print(
            f"cell {rec['cell']} {rec['method']:>24}: coverage {rec['coverage']:.3f} "
            f"length {rec['avg_ci_length']:.3f} mse {rec['test_mse']:.3f}",
            file=sys.stderr,
        )
    return EXIT_OK


# compare --------------------------------------------------------------------

KEY_CHOICES = (("cell", "method"), ("leaf", "method"))


def compare_tables(tables: list[tuple[str, list[str], list[dict]]]) -> tuple[list[str], list[dict]]:
    """Full outer join on (cell, method) or (leaf, method); value columns get ``@label``."""
    key = next((k for k in KEY_CHOICES if all(set(k) <= set(h) for _, h, _ in tables)), None)
    if key is None:
        raise UserError("inputs do not share (cell, method) or (leaf, method) key columns")
    header = list(key)
    merged: dict[tuple, dict] = {}
    order: list[tuple] = []
    for label, cols, rows in tables:
        vals = [c for c in cols if c not in key]
        header += [f"{c}@{label}" for c in vals]
        for row in rows:
            k = tuple(row[c] for c in key)
            if k not in merged:
                merged[k] = dict(zip(key, k))
                order.append(k)
            for c in vals:
                merged[k][f"{c}@{label}"] = row[c]
    return header, [merged[k] for k in order]


def cmd_compare(args) -> int:
    if len(args.inputs) < 1:
        raise UserError("compare needs at least one input")
    tables = []
    seen = {}
    for path in args.inputs:
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                rows = list(reader)
                cols = list(reader.fieldnames or [])
        except OSError as e:
            raise UserError(f"cannot read {path}: {e}") from None
        label = Path(path).stem
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label}#{seen[label]}"
        tables.append((label, cols, rows))
    header, rows = compare_tables(tables)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n", restval="")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rrt", description="Randomized regression trees with selective inference.")
    ap.add_argument("--version", action="version", version=f"rrt {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def data_flags(p):
        p.add_argument("--data", help="CSV with a header row")
        p.add_argument("--response", help="name of the response column")
        p.add_argument("--sigma", type=float, help="known noise sd")
        p.add_argument("--estimate-sigma", action="store_true", help="plug in a residual sd estimate")

    f = sub.add_parser("fit", help="grow a randomized tree and save it with its selection record")
    data_flags(f)
    f.add_argument("--config", help="YAML grow config (keys of GrowConfig, optionally under 'grow')")
    f.add_argument("--seed", type=int)
    f.add_argument("--tau-mult", type=float, default=1.0, help="tau = tau_mult * sigma")
    f.add_argument("--out", help="tree JSON path (default: stdout)")
    f.set_defaults(func=cmd_fit)

    i = sub.add_parser("infer", help="confidence intervals and p-values for every leaf")
    data_flags(i)
    i.add_argument("--tree", required=True, help="tree JSON written by 'fit'")
    i.add_argument("--alpha", type=float, default=0.1)
    i.add_argument("--variant", choices=VARIANTS + ("naive",), default=None)
    i.add_argument("--r", type=int, default=1, help="free coordinates per level for the conditioned variant")
    i.add_argument("--out", help="results CSV path (default: stdout)")
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("simulate", help="run a replicated simulation experiment")
    s.add_argument("--config", help="YAML experiment config")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--seed", type=int, help="master seed")
    s.add_argument("--n-reps", type=int)
    s.add_argument("--n-jobs", type=int)
    s.add_argument("--out", help="output prefix")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="join result tables side by side")
    c.add_argument("inputs", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USER if e.code not in (0, None) else EXIT_OK
    if getattr(args, "variant", "") is None:
        args.variant = None
    try:
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
