"""Command-line entry point: ``ndiv <command> [flags]``.

Commands: gen-data, train, sample, eval, plot, report. Exit codes are 0 on
success, 1 for usage errors, 2 for I/O problems and 3 when training aborts
on a non-finite loss. Outputs go under ``$NDIV_OUT_DIR`` (default
``ndiv-out``) unless ``--out`` is given.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, data, metrics, nets, train

logger = logging.getLogger("ndiv")

OUT_DIR_ENV = "NDIV_OUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
SAMPLE_COLUMNS = ("a_x", "a_y", "s_next_x", "s_next_y")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


def default_out(name):
    return Path(os.environ.get(OUT_DIR_ENV, "ndiv-out")) / name


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = ""

    def write(self, out_dir):
        for role, path in {**self.inputs, **self.outputs}.items():
            if not Path(path).exists():
                raise InputError(f"manifest entry {role!r} points at missing {path}")
        self.finished = _now()
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _require_file(path, what):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{what} not found: {path}")
    return path


def _resolve_data(path, split="train"):
    """A dataset CSV, or a gen-data directory holding ``<split>.csv``."""
    path = Path(path)
    if path.is_dir():
        path = path / f"{split}.csv"
    return _require_file(path, f"{split} dataset")


def _load_dataset(path):
    try:
        return data.load_dataset(path)
    except (OSError, data.DatasetFormatError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from None


def _load_checkpoint(path):
    path = _require_file(path, "checkpoint")
    try:
        return nets.load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None


def read_columns(path, wanted):
    """Columns ``wanted`` from a headed numeric CSV, as an (n, k) array."""
    path = _require_file(path, "table")
    with open(path, newline="") as f:
        header = next(csv.reader(f), None)
    if not header:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in header]
    missing = [c for c in wanted if c not in header]
    if missing:
        raise InputError(f"{path}:1: missing columns {missing}")
    try:
        table = data.read_table(path, header)
    except data.DatasetFormatError as exc:
        raise InputError(str(exc)) from None
    return table[:, [header.index(c) for c in wanted]]


def write_table(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
    return Path(path)


# gen-data


def cmd_gen_data(args):
    try:
        spec = data.StarSpec(args.arms, args.r_inner, args.r_outer, rotation=args.rotation)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out or default_out("data"))
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = data.generate_dataset(spec, args.n_train, args.n_test, args.seed)
    paths = {
        "train": data.save_dataset(train_set, out / "train.csv"),
        "test": data.save_dataset(test_set, out / "test.csv"),
    }
    RunManifest(
        "gen-data",
        config={"spec": spec.to_dict(), "n_train": args.n_train, "n_test": args.n_test, "seed": args.seed},
        outputs={k: str(v) for k, v in paths.items()},
    ).write(out)
    print(f"wrote {paths['train']} ({args.n_train} rows) and {paths['test']} ({args.n_test} rows)")


# train


def _parse_override(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise UsageError(f"--set expects KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_config(args):
    """Config file (if any), then explicit flags on top."""
    values = {}
    if args.config:
        path = _require_file(args.config, "config")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{exc.lineno}: {exc.msg}") from None
    for text in args.set or []:
        key, value = _parse_override(text)
        values[key] = value
    for name in ("seed", "steps", "forward_steps"):
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    try:
        return train.TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def train_one(kind, train_path, test_path, config, out_dir):
    """Train one seed and write its checkpoint, report and loss traces."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(train_path)
    test = _load_dataset(test_path) if test_path else None
    bundle, report = train.train_model(kind, dataset, config, test)
    bundle.meta.update({"seed": config.seed, "train_data": str(train_path)})
    ckpt = nets.save_checkpoint(bundle, out_dir / "checkpoint.json")
    report.checkpoint = str(ckpt)
    config_path = out_dir / "config.json"
    config_path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    report_path = out_dir / "train_report.json"
    report_path.write_text(report.to_json())
    traces_path = out_dir / "traces.csv"
    report.write_traces_csv(traces_path)
    inputs = {"train": str(train_path)}
    if test_path:
        inputs["test"] = str(test_path)
    RunManifest(
        "train",
        config={"model": kind, **config.to_dict()},
        inputs=inputs,
        outputs={
            "checkpoint": str(ckpt),
            "config": str(config_path),
            "report": str(report_path),
            "traces": str(traces_path),
        },
    ).write(out_dir)
    return str(out_dir), report.extra


def cmd_train(args):
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    config = build_config(args)
    train_path = _resolve_data(args.data, "train")
    test_path = None
    if Path(args.data).is_dir() and (Path(args.data) / "test.csv").is_file():
        test_path = Path(args.data) / "test.csv"
    out = Path(args.out or default_out(args.model))
    if args.seeds == 1:
        jobs = [(config, out)]
    else:
        jobs = [
            (config.replace(seed=config.seed + k), out / f"seed_{config.seed + k}")
            for k in range(args.seeds)
        ]
    if args.seeds == 1 or args.jobs == 1:
        results = [train_one(args.model, train_path, test_path, c, d) for c, d in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [
                pool.submit(train_one, args.model, train_path, test_path, c, d) for c, d in jobs
            ]
            results = [f.result() for f in futures]
    for out_dir, extra in results:
        held = extra.get("heldout_error")
        note = f" (forward held-out error {held:.4f})" if held is not None else ""
        print(f"trained {args.model} -> {out_dir}{note}")


# sample


def cmd_sample(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    bundle = _load_checkpoint(args.checkpoint)
    actions = train.sample_actions(bundle, n=args.n, seed=args.seed)
    states = train.predict_states(bundle, actions)
    out = Path(args.out or default_out("samples.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, SAMPLE_COLUMNS, np.concatenate([actions, states], axis=1))
    print(f"wrote {args.n} samples to {out}")


# eval


def cmd_eval(args):
    if args.seeds < 1 or args.n < 2:
        raise UsageError("--seeds must be >= 1 and --n >= 2")
    test_path = _resolve_data(args.data, "test")
    test = _load_dataset(test_path)
    per_checkpoint = []
    for path in args.checkpoint:
        bundle = _load_checkpoint(path)
        per_checkpoint.append(
            train.evaluate(bundle, test, test.spec, n=args.n, seeds=args.seeds, base_seed=args.seed)
        )
    model = args.name or per_checkpoint[0].model
    if len(per_checkpoint) == 1:
        report = per_checkpoint[0]
        report.model = model
    else:
        report = metrics.aggregate_reports(per_checkpoint, model)
        errors = [r.extra["forward_heldout_error"] for r in per_checkpoint]
        report.extra["forward_heldout_error"] = float(np.mean(errors))
    out = Path(args.out or default_out(f"eval-{model}"))
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "metrics.json"
    json_path.write_text(report.to_json())
    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(metrics.CSV_COLUMNS)
        w.writerow(report.csv_row())
    RunManifest(
        "eval",
        config={"seeds": args.seeds, "n": args.n, "seed": args.seed},
        inputs={"test": str(test_path), **{f"checkpoint_{k}": p for k, p in enumerate(args.checkpoint)}},
        outputs={"json": str(json_path), "csv": str(csv_path)},
    ).write(out)
    print(
        f"{model}: FD {report.frechet_distance:.4f}  JSD {report.js_divergence:.4f}  "
        f"inside {report.inside_fraction:.3f}  min arm {report.min_arm_mass:.3f}"
    )


# plot

PANEL = 320
MARGIN = 20


def _load_spec(path):
    path = _require_file(path, "spec")
    try:
        doc = json.loads(path.read_text())
        return data.StarSpec.from_dict(doc.get("spec", doc))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise InputError(f"cannot read star spec from {path}: {exc}") from None


def _fmt(v):
    return f"{v:.2f}"


def _panel(title, x0, layers, outline=None):
    """One square scatter panel; ``layers`` are (points, colour) pairs."""
    stacked = np.concatenate([p for p, _ in layers if len(p)] + ([outline] if outline is not None else []))
    lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    half = 0.5 * float(max(hi - lo)) * 1.05 or 1.0
    mid = 0.5 * (lo + hi)

    def px(p):
        x = x0 + MARGIN + (p[:, 0] - mid[0] + half) / (2 * half) * PANEL
        y = MARGIN + 20 + (mid[1] + half - p[:, 1]) / (2 * half) * PANEL
        return x, y

    out = [f'<text x="{x0 + MARGIN}" y="{MARGIN + 10}" font-size="13">{title}</text>']
    for points, colour in layers:
        xs, ys = px(points)
        out.append(f'<g fill="{colour}" fill-opacity="0.35">')
        out += [f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="1"/>' for a, b in zip(xs, ys)]
        out.append("</g>")
    if outline is not None:
        xs, ys = px(outline)
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(xs, ys))
        out.append(f'<polygon points="{pts}" fill="none" stroke="black" stroke-width="1"/>')
    return out


def star_outline(spec, n=400):
    theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    r = data.star_boundary_radius(spec, theta)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1) + np.asarray(spec.center)


def render_svg(spec, generated, states, truth):
    width = 2 * (PANEL + 2 * MARGIN)
    height = PANEL + 2 * MARGIN + 20
    body = _panel(
        "actions: truth (grey), generated (blue)",
        0,
        [(truth, "#888888"), (generated, "#1f5fbf")],
        outline=star_outline(spec),
    )
    body += _panel(
        "states: warped truth (grey), predicted (red)",
        PANEL + 2 * MARGIN,
        [(data.warp_to_state(truth - np.asarray(spec.center)), "#888888"), (states, "#c0392b")],
    )
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    )
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]) + "\n"


def cmd_plot(args):
    spec = _load_spec(args.spec)
    generated = read_columns(args.actions, ("a_x", "a_y"))
    if len(generated) == 0:
        raise InputError(f"{args.actions}: no actions to plot")
    states = read_columns(args.states or args.actions, ("s_next_x", "s_next_y"))
    if len(states) == 0:
        raise InputError(f"{args.states}: no states to plot")
    truth = data.sample_star_actions(spec, args.truth_n, np.random.default_rng(args.seed))
    out = Path(args.out or default_out("plot.svg"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(spec, generated, states, truth))
    print(f"wrote {out}")


# report


def _load_report(path):
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.json"
    path = _require_file(path, "metrics report")
    try:
        return metrics.MetricsReport.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, TypeError) as exc:
        raise InputError(f"cannot read metrics report {path}: {exc}") from None


def format_table(reports):
    header = ["model", "FD", "JSD", "inside", "min arm", "seeds"]
    rows = [
        [
            r.model,
            f"{r.frechet_distance:.4f} ± {r.frechet_distance_std:.4f}",
            f"{r.js_divergence:.4f} ± {r.js_divergence_std:.4f}",
            f"{r.inside_fraction:.3f} ± {r.inside_fraction_std:.3f}",
            f"{r.min_arm_mass:.3f}",
            str(r.n_seeds),
        ]
        for r in reports
    ]
    widths = [max(len(row[k]) for row in [header, *rows]) for k in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_report(args):
    reports = [_load_report(p) for p in args.eval_dirs]
    out = Path(args.out or default_out("report"))
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "comparison.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(metrics.CSV_COLUMNS)
        for r in reports:
            w.writerow(r.csv_row())
    table = format_table(reports)
    (out / "comparison.txt").write_text(table)
    print(table, end="")


# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_float(text):
    v = float(text)
    if not (math.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _count(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def build_parser():
    p = _Parser(prog="ndiv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ndiv {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate train/test star datasets")
    g.add_argument("--arms", type=int, default=5)
    g.add_argument("--r-inner", type=_positive_float, default=0.35)
    g.add_argument("--r-outer", type=_positive_float, default=1.0)
    g.add_argument("--rotation", type=float, default=0.0)
    g.add_argument("--n-train", type=_count, default=600)
    g.add_argument("--n-test", type=_count, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model (and the forward model)")
    t.add_argument("--model", choices=sorted(train.TRAINERS), default="ours")
    t.add_argument("--data", required=True, help="gen-data directory or train CSV")
    t.add_argument("--config", help="JSON config file; flags override it")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--forward-steps", type=int)
    t.add_argument("--seeds", type=int, default=1, help="train this many consecutive seeds")
    t.add_argument("--jobs", type=_count, default=os.cpu_count() or 1, help="parallel workers for --seeds")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw actions and predicted states from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output CSV")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="FD, JSD and coverage against fresh ground truth")
    e.add_argument("--checkpoint", required=True, nargs="+", help="one or more checkpoints (seeds)")
    e.add_argument("--data", required=True, help="gen-data directory or test CSV")
    e.add_argument("--seeds", type=int, default=5, help="sampling seeds per checkpoint")
    e.add_argument("--n", type=int, default=10000)
    e.add_argument("--seed", type=int, default=0, help="base sampling seed")
    e.add_argument("--name", help="model label in the report")
    e.add_argument("--out", help="output directory")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="SVG scatter of actions and states")
    pl.add_argument("--actions", required=True, help="CSV with a_x,a_y columns")
    pl.add_argument("--states", help="CSV with s_next_x,s_next_y columns (default: --actions)")
    pl.add_argument("--spec", required=True, help="dataset sidecar or star spec JSON")
    pl.add_argument("--truth-n", type=_count, default=2000)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--out", help="output SVG")
    pl.set_defaults(func=cmd_plot)

    r = sub.add_parser("report", help="merge eval outputs into a comparison table")
    r.add_argument("--eval-dirs", required=True, nargs="+")
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"ndiv {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except train.NumericFailure as exc:
        print(f"ndiv {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError) as exc:
        print(f"ndiv {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
