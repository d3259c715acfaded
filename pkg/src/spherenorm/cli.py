"""``spherenorm`` command line: verify | train | attack | report.

Exit codes: 0 success, 1 a verification suite failed, 2 bad input (unknown
suite, missing model, no runs matched), 3 training diverged.
"""

import argparse
import csv
import glob
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .persist import load_model
from .robustness import REPORT_COLUMNS, AttackConfig, append_report, robustness_report
from .trainer import TrainConfig, load_datasets, train
from .verify import SUITES, resolve_suite, run_suites

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_BAD_INPUT, EXIT_DIVERGED = 0, 1, 2, 3

# flag name -> TrainConfig field
TRAIN_FLAGS = {"method": "method", "wd": "weight_decay", "lr": "learning_rate",
               "batch_size": "batch_size", "epochs": "epochs", "eps_norm": "eps_norm",
               "max_steps": "max_steps", "seed": "seed"}
ATTACK_FLAGS = ("eps", "steps", "alpha", "noise_std", "seed")

log = logging.getLogger("spherenorm")


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _merged(args, keys):
    """Config-file values overridden by any flag given on the command line."""
    merged = {k: v for k, v in _load_config(args.config).items()}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def _out_dir(args, merged):
    return Path(args.out_dir or merged.pop("out_dir", None) or "runs")


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args):
    names = None
    if args.suite:
        try:
            names = [resolve_suite(s) for s in args.suite]
        except KeyError as exc:
            known = ", ".join(SUITES)
            print(f"unknown suite {exc.args[0]!r}; available: {known}", file=sys.stderr)
            return EXIT_BAD_INPUT
    merged = _merged(args, ["seed"])
    seed = int(merged.get("seed", 0))
    report = run_suites(names, seed=seed)
    print(report.table())
    out = _out_dir(args, merged)
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_VERIFY_FAILED


# ---------------------------------------------------------------------------
# train


def train_config_from(merged):
    fields = {}
    for key, value in merged.items():
        fields[TRAIN_FLAGS.get(key, key)] = value
    return TrainConfig.from_json(fields)


def cmd_train(args):
    merged = _merged(args, list(TRAIN_FLAGS))
    out = _out_dir(args, merged)
    try:
        cfg = train_config_from(merged)
    except (ConfigurationError, ValueError, TypeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    run_dir = out / cfg.run_name
    record = train(cfg, run_dir)
    s = record.summary
    print(f"{cfg.run_name}: steps={s['steps']} final_loss={s.get('final_loss', float('nan')):.4f} "
          f"test_acc={s.get('test_acc', float('nan')):.4f} w_norm={s['final_w_norm']:.4f} -> {run_dir}")
    if record.failed:
        print(f"diverged: {record.failure}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# attack


def _read_run(run_dir):
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    if not (run_dir / "model.json").is_file() or not summary_path.is_file():
        return None, None
    summary = json.loads(summary_path.read_text())
    return summary, load_model(run_dir)


def cmd_attack(args):
    summary, model = _read_run(args.run)
    if model is None:
        print(f"no persisted model under {args.run}", file=sys.stderr)
        return EXIT_BAD_INPUT
    merged = _merged(args, list(ATTACK_FLAGS))
    merged.pop("out_dir", None)
    cfg = TrainConfig.from_json(summary["config"])
    seed = int(merged.get("seed", cfg.seed))
    eps = float(merged.get("eps", 0.1))
    try:
        bim = AttackConfig("bim", epsilon=eps, step_size=merged.get("alpha"),
                           steps=int(merged.get("steps", 10)),
                           noise_std=float(merged.get("noise_std", 0.5)), seed=seed)
    except ConfigurationError as exc:
        print(f"invalid attack settings: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    _, test_set = load_datasets(cfg)
    rep = robustness_report(model, test_set.X, test_set.labels, bim)
    path = Path(args.run) / "robustness.csv"
    append_report(path, rep, cfg.method, cfg.weight_decay)
    print(f"{cfg.run_name}: clean={rep.clean_acc:.4f} gauss={rep.noise_acc:.4f} "
          f"bim={rep.bim_acc:.4f} accdiff1={rep.acc_diff1:.4f} accdiff2={rep.acc_diff2:.4f} -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report

REPORT_TABLE_COLUMNS = ("method", "wd", "runs", "test_acc", "w_norm", "clean", "gauss", "bim",
                        "accdiff1", "accdiff2")


def _last_robustness_row(run_dir):
    path = Path(run_dir) / "robustness.csv"
    if not path.is_file():
        return None
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows[-1] if rows else None


def collect_runs(pattern):
    groups = {}
    for d in sorted(glob.glob(pattern)):
        path = Path(d) / "summary.json"
        if not path.is_file():
            continue
        summary = json.loads(path.read_text())
        cfg = summary["config"]
        key = (cfg["method"], float(cfg["weight_decay"]))
        entry = {"test_acc": summary["final"].get("test_acc"),
                 "w_norm": summary["final"].get("final_w_norm")}
        rob = _last_robustness_row(d)
        if rob is not None:
            entry.update({k: float(rob[k]) for k in ("clean", "gauss", "bim", "accdiff1", "accdiff2")})
        groups.setdefault(key, []).append(entry)
    return groups


def aggregate(groups):
    """Mean of each column over the runs of every ``(method, wd)`` pair."""
    rows = []
    for (method, wd), runs in sorted(groups.items()):
        row = {"method": method, "wd": wd, "runs": len(runs)}
        for col in REPORT_TABLE_COLUMNS[3:]:
            vals = [r[col] for r in runs if r.get(col) is not None]
            row[col] = float(np.mean(vals)) if vals else None
        rows.append(row)
    return rows


def format_table(rows):
    head = f"{'method':<8}{'wd':>9}{'runs':>6}" + "".join(f"{c:>10}" for c in REPORT_TABLE_COLUMNS[3:])
    lines = [head]
    for r in rows:
        cells = "".join(f"{'-':>10}" if r[c] is None else f"{r[c]:>10.4f}" for c in REPORT_TABLE_COLUMNS[3:])
        lines.append(f"{r['method']:<8}{r['wd']:>9g}{r['runs']:>6}" + cells)
    return "\n".join(lines)


def cmd_report(args):
    merged = _merged(args, [])
    out = _out_dir(args, merged)
    pattern = args.runs if args.runs is not None else str(out / "*")
    groups = collect_runs(pattern)
    if not groups:
        print(f"no runs matched {pattern!r}", file=sys.stderr)
        return EXIT_BAD_INPUT
    rows = aggregate(groups)
    print(format_table(rows))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_TABLE_COLUMNS)
        for r in rows:
            writer.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                             for c in REPORT_TABLE_COLUMNS])
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    shared.add_argument("--out-dir", default=None, help="output directory (default ./runs)")
    shared.add_argument("--config", default=None,
                        help="JSON file whose keys mirror flag names; flags override it")

    parser = argparse.ArgumentParser(prog="spherenorm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[shared], help="run the numerical invariant suites")
    p.add_argument("--suite", action="append",
                   help=f"suite to run, repeatable (default all): {', '.join(SUITES)}")
    p.set_defaults(func=cmd_verify)

    d = TrainConfig()
    p = sub.add_parser("train", parents=[shared], help="train one MLP and log metrics")
    p.add_argument("--method", choices=["bn", "ln", "gn", "in", "wn", "cwn", "ws", "sn", "none"],
                   default=None, help=f"normalizer (default {d.method})")
    p.add_argument("--wd", type=float, default=None, help=f"weight decay (default {d.weight_decay:g})")
    p.add_argument("--lr", type=float, default=None, help=f"learning rate (default {d.learning_rate:g})")
    p.add_argument("--batch-size", type=int, default=None, help=f"default {d.batch_size}")
    p.add_argument("--epochs", type=int, default=None, help=f"default {d.epochs}")
    p.add_argument("--max-steps", type=int, default=None, help=f"step cap (default {d.max_steps})")
    p.add_argument("--eps-norm", type=float, default=None,
                   help=f"normalizer epsilon (default {d.eps_norm:g})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", parents=[shared], help="noise and BIM evaluation of a trained run")
    p.add_argument("run", help="run directory written by 'train'")
    p.add_argument("--eps", type=float, default=None, help="l_inf budget (default 0.1)")
    p.add_argument("--steps", type=int, default=None, help="BIM iterations (default 10)")
    p.add_argument("--alpha", type=float, default=None, help="BIM step size (default eps/5)")
    p.add_argument("--noise-std", type=float, default=None,
                   help="Gaussian noise std (default 0.5)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", parents=[shared], help="aggregate runs into one table")
    p.add_argument("runs", nargs="?", default=None,
                   help="glob of run directories (default <out-dir>/*)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
