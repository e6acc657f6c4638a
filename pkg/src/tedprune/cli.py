"""Command-line runner: training, sweeps, oracle reports and comparisons.

Exit codes: 0 success, 2 configuration or usage error, 3 divergence,
4 missing or unreadable files.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import config as C
from . import oracle as O
from .data import DataError, gen_synthetic
from .model import DivergenceError, save_params
from .schedule import KINDS, ScheduleError, ScheduleSpec, ratio_table
from .trainer import (ConfigError, RunResult, surrogate_scores, train_dynamic, train_full,
                      train_static)

log = logging.getLogger("tedprune")

EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 2, 3, 4
MODES = ("ted", "loss", "random", "none", "teds")
SWEEP_COLUMNS = ("axis", "value", "repeat", "mode", "schedule", "s", "beta", "final_test_acc",
                 "sr", "rfs", "tfs", "rfs_without_refresh")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("tedprune")
    except PackageNotFoundError:
        return "unknown"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], columns=None, comment: str | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# --- experiment assembly --------------------------------------------------------

def _experiment(args, extra_pairs) -> C.Experiment:
    src = args.config
    if src.endswith(".json"):
        try:
            raw = json.loads(Path(src).read_text())["config"]
        except FileNotFoundError:
            raise C.IOFailure(f"manifest not found: {src}") from None
        except (KeyError, json.JSONDecodeError):
            raise ConfigError(f"{src}: not a run manifest") from None
        raw = C._merge(C.DEFAULTS, raw)
    else:
        raw = C.read_raw(src)
    pairs = []
    if getattr(args, "mode", None) is not None:
        pairs.append(("scoring.mode", args.mode))
    if getattr(args, "s", None) is not None:
        pairs.append(("schedule.prune_ratio", args.s))
    if getattr(args, "schedule", None) is not None:
        pairs.append(("schedule.kind", args.schedule))
    if getattr(args, "beta", None) is not None:
        pairs.append(("schedule.beta", args.beta))
    if getattr(args, "epochs", None) is not None:
        pairs.append(("trainer.epochs", args.epochs))
    if getattr(args, "reverse", False):
        pairs.append(("scoring.reverse", True))
    raw = C.apply_overrides(raw, pairs + list(extra_pairs))
    if raw["scoring"]["mode"] == "none":
        raw["schedule"]["prune_ratio"] = 0.0
    return _build(raw)


def _build(raw: dict) -> C.Experiment:
    mode = raw["scoring"]["mode"]
    if mode not in MODES:
        raise ConfigError(f"unknown scoring mode {mode!r}")
    if mode == "teds":
        inner = dict(raw, scoring=dict(raw["scoring"], mode="ted"))
        return C.Experiment(str(raw["name"]), raw, C.build(inner).train)
    return C.build(raw)


def run_experiment(exp: C.Experiment, train, test) -> RunResult:
    cfg = exp.train
    mode = exp.raw["scoring"]["mode"]
    if mode == "teds":
        frozen = surrogate_scores(cfg, train, "ted")
        return train_static(cfg, train, test, frozen, reverse=cfg.reverse)
    if mode == "none":
        return train_full(cfg, train, test)
    return train_dynamic(cfg, train, test)


def _save_run(out: Path, exp: C.Experiment, res: RunResult, wall: float) -> dict:
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in res.records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    spec = exp.train.model
    if res.theta_1 is not None:
        save_params(out / "theta_1.txt", res.theta_1, spec)
    save_params(out / "theta_T.txt", res.theta_T, spec)
    res.scores.to_csv(out / "scores.csv")
    summary = {
        "name": exp.name, "mode": exp.raw["scoring"]["mode"], "schedule": exp.train.schedule.kind,
        "s": exp.train.schedule.prune_ratio, "beta": exp.train.schedule.beta,
        "final_test_acc": res.final_test_acc, "final_full_train_loss": res.records[-1].full_train_loss,
        "sr": res.sr, **{k: v for k, v in res.accounting.to_dict().items() if k != "sr"},
        "wall_time_s": wall, "ended": _now(),
    }
    _write_json(out / "summary.json", summary)
    return summary


def train_once(exp: C.Experiment, out: Path, data=None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    train, test = data if data is not None else C.load_split(exp)
    manifest = {
        "config": exp.raw, "train_config": exp.train.to_dict(),
        "seeds": exp.train.to_dict()["seeds"], "build_id": _build_id(), "started": _now(),
        "outputs": {"metrics": "metrics.jsonl", "theta_1": "theta_1.txt", "theta_T": "theta_T.txt",
                    "scores": "scores.csv", "summary": "summary.json"},
    }
    _write_json(out / "manifest.json", manifest)
    t0 = time.perf_counter()
    res = run_experiment(exp, train, test)
    return _save_run(out, exp, res, time.perf_counter() - t0)


def _reseed(exp: C.Experiment, k: int) -> C.Experiment:
    raw = json.loads(json.dumps(exp.raw))
    for key in raw["seeds"]:
        raw["seeds"][key] = int(raw["seeds"][key]) + k
    return _build(raw)


def train_repeated(exp: C.Experiment, out: Path, repeat: int) -> list[dict]:
    if repeat <= 1:
        return [train_once(exp, out)]
    out.mkdir(parents=True, exist_ok=True)
    data = C.load_split(exp)
    rows = []
    for k in range(repeat):
        s = train_once(_reseed(exp, k), out / f"rep{k}", data)
        rows.append({"repeat": k, "final_test_acc": s["final_test_acc"], "sr": s["sr"],
                     "rfs": s["rfs"], "wall_time_s": s["wall_time_s"]})
    acc = np.array([r["final_test_acc"] for r in rows], dtype=float)
    sr = np.array([r["sr"] for r in rows], dtype=float)
    mean_row = {"repeat": "mean", "final_test_acc": acc.mean(), "sr": sr.mean(),
                "rfs": float(np.mean([r["rfs"] for r in rows])), "wall_time_s": sum(r["wall_time_s"] for r in rows)}
    std_row = {"repeat": "std", "final_test_acc": acc.std(ddof=1), "sr": sr.std(ddof=1),
               "rfs": float(np.std([r["rfs"] for r in rows], ddof=1)), "wall_time_s": ""}
    _write_csv(out / "summary.csv", rows + [mean_row, std_row])
    _write_json(out / "summary.json", {
        "name": exp.name, "mode": exp.raw["scoring"]["mode"], "s": exp.train.schedule.prune_ratio,
        "repeats": repeat, "final_test_acc": float(acc.mean()), "final_test_acc_std": float(acc.std(ddof=1)),
        "sr": float(sr.mean()), "rfs": mean_row["rfs"], "wall_time_s": mean_row["wall_time_s"], "ended": _now()})
    return rows


# --- subcommands ------------------------------------------------------------------

def cmd_train(args, extra) -> int:
    exp = _experiment(args, extra)
    out = Path(args.out or f"runs/{exp.name}-{exp.raw['scoring']['mode']}-s{exp.train.schedule.prune_ratio:g}")
    t0 = time.perf_counter()
    rows = train_repeated(exp, out, args.repeat)
    wall = time.perf_counter() - t0
    if args.repeat <= 1:
        print(f"acc={rows[0]['final_test_acc']:.4f} SR={rows[0]['sr']:.4f} wall={wall:.2f}s out={out}")
    else:
        acc = np.array([r["final_test_acc"] for r in rows])
        sr = np.array([r["sr"] for r in rows])
        print(f"acc={acc.mean():.4f}±{acc.std(ddof=1):.4f} SR={sr.mean():.4f}±{sr.std(ddof=1):.4f} "
              f"repeats={args.repeat} wall={wall:.2f}s out={out}")
    return 0


def cmd_sweep(args, extra) -> int:
    if not args.values:
        raise ConfigError("sweep needs at least one value")
    base = _experiment(args, extra)
    key = {"s": "schedule.prune_ratio", "beta": "schedule.beta", "mode": "scoring.mode",
           "schedule": "schedule.kind"}[args.axis]
    out = Path(args.out or f"runs/sweep-{base.name}-{args.axis}")
    out.mkdir(parents=True, exist_ok=True)
    data = C.load_split(base)
    rows = []
    for text in args.values:
        value = C.parse_overrides([f"--{key}", text])[0][1]
        raw = C.apply_overrides(base.raw, [(key, value)])
        if raw["scoring"]["mode"] == "none":
            raw["schedule"]["prune_ratio"] = 0.0
        exp = _build(raw)
        for k in range(args.repeat):
            cell = _reseed(exp, k)
            s = train_once(cell, out / f"{args.axis}={text}" / f"rep{k}", data)
            rows.append({"axis": args.axis, "value": text, "repeat": k, "mode": s["mode"],
                         "schedule": s["schedule"], "s": s["s"], "beta": s["beta"],
                         "final_test_acc": s["final_test_acc"], "sr": s["sr"], "rfs": s["rfs"],
                         "tfs": s["tfs"], "rfs_without_refresh": s["rfs_without_refresh"]})
            print(f"{args.axis}={text} rep={k} acc={s['final_test_acc']:.4f} SR={s['sr']:.4f}")
    _write_csv(out / "sweep.csv", rows, SWEEP_COLUMNS)
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")
    return 0


def _oracle_data(exp: C.Experiment):
    d = exp.data
    if d["source"] != "synthetic":
        raise ConfigError("oracle commands need a synthetic data source")
    return gen_synthetic(d["kind"], int(d["n"]), float(d["noise"]), int(d["seed"]),
                         int(d["num_classes"]), int(d["dim"]))


def cmd_oracle(args, extra) -> int:
    pairs = list(extra)
    if args.n is not None:
        pairs.append(("data.n", args.n))
    exp = _experiment(args, pairs)
    o, spec, proto = exp.oracle, exp.train.model, exp.protocol()
    out = Path(args.out or f"runs/oracle-{exp.name}-{args.which}")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", {"config": exp.raw, "command": args.which,
                                        "tolerance": proto.tol, "max_iter": proto.max_iter,
                                        "build_id": _build_id(), "started": _now()})
    which = args.which

    if which == "igd":
        data = _oracle_data(exp)
        rep = O.igd_exact(spec, data, args.subset or [], proto)
        _write_csv(out / "igd.csv", [rep.to_dict()])
        print(f"igd={rep.igd:.6g} grad_norm={rep.grad_norm:.3g}")
    elif which == "loo":
        data = _oracle_data(exp)
        igd = O.loo_igd(spec, data, proto, int(o["workers"]))
        _write_csv(out / "loo.csv", [{"id": int(i), "igd": float(g)} for i, g in zip(data.ids, igd)])
        order = np.lexsort((data.ids, igd))
        print(f"redundant sample: {int(data.ids[order[0]])} (igd={igd[order[0]]:.3g})")
    elif which == "lemma1":
        m = int(args.m if args.m is not None else o["m"])
        summary = []
        for k in range(args.instances):
            raw = C.apply_overrides(exp.raw, [("data.seed", int(exp.data["seed"]) + k)])
            data = _oracle_data(_build(raw))
            rep = O.lemma1_check(spec, data, m, proto)
            if k == 0:
                rows = [dict(r, subset=" ".join(map(str, r["subset"]))) for r in rep.rows]
                _write_csv(out / "lemma1.csv", rows, ("subset", "igd", "loss_removed", "risk_trained"))
            summary.append({"instance": k, "rank_identical": rep.rank_identical,
                            "argmax_igd": " ".join(map(str, rep.argmax_igd)),
                            "argmin_risk": " ".join(map(str, rep.argmin_risk or ())), "agree": rep.agree})
        _write_csv(out / "lemma1_instances.csv", summary)
        freq = float(np.mean([s["agree"] for s in summary]))
        ranks = all(s["rank_identical"] for s in summary)
        print(f"rank_identical={ranks} agreement={freq:.3f} over {len(summary)} instances")
    elif which == "lemma2":
        data = _oracle_data(exp)
        tr = O.lemma2_residuals(spec, data, int(args.sample_id if args.sample_id is not None else o["sample_id"]),
                                float(args.eta if args.eta is not None else o["eta"]), int(o["steps"]), proto)
        _write_csv(out / "lemma2.csv", tr.rows())
        print(f"min slack={tr.slack.min():.4g} min unscaled slack={tr.slack_unscaled.min():.4g}")
    elif which == "fidelity":
        data = _oracle_data(exp)
        rep = O.taylor_fidelity(spec, data, int(o["batch_size"]), float(o["eta"]), proto, int(o["workers"]))
        head = f"spearman={rep.spearman} kendall={rep.kendall} degenerate={str(rep.degenerate).lower()}"
        _write_csv(out / "fidelity.csv", rep.rows, ("id", "ted_score", "igd_exact"), comment=head)
        print(head)
    elif which == "landscape":
        points = int(args.points if args.points is not None else o["points"])
        if args.run:
            run = Path(args.run)
            from .model import load_params
            try:
                man = json.loads((run / "manifest.json").read_text())
                t1 = load_params(run / "theta_1.txt")
                tT = load_params(run / "theta_T.txt")
            except FileNotFoundError as exc:
                raise C.IOFailure(f"missing run file: {exc.filename}") from None
            exp = _build(C._merge(C.DEFAULTS, man["config"]))
            train, test = C.load_split(exp)
        else:
            train, test = C.load_split(exp)
            res = run_experiment(exp, train, test)
            t1, tT = res.theta_1, res.theta_T
        rows = O.interpolation_landscape(exp.train.model, t1, tT, train, test, points)
        _write_csv(out / "landscape.csv", rows, ("alpha", "train_loss", "test_acc"))
        print(f"loss at 0={rows[0]['train_loss']:.6g} at 1={rows[-1]['train_loss']:.6g}")
    elif which == "igcurve":
        train, _ = C.load_split(exp)
        frac = float(args.fraction if args.fraction is not None else o["prune_fraction"])
        rng = np.random.default_rng(exp.train.seeds.scoring)
        k = min(train.n - 1, int(math.floor(frac * train.n + 0.5)))
        pruned = np.sort(rng.choice(train.ids, size=k, replace=False))
        cur = O.ig_curve(exp.train, train, pruned)
        _write_csv(out / "igcurve.csv", cur.rows(), ("epoch", "full_loss", "pruned_loss", "retained_loss"))
        print(f"IG={cur.ig:.6g} pruned loss {cur.pruned_loss[0]:.6g} -> {cur.pruned_loss[-1]:.6g}")
    return 0


def cmd_report(args, extra) -> int:
    runs = []
    for d in args.runs:
        p = Path(d)
        if not (p / "summary.json").is_file():
            raise C.IOFailure(f"no run found at {d}")
        runs.append((d, json.loads((p / "summary.json").read_text())))
    if args.against == "full":
        base = [s for _, s in runs if s.get("mode") == "none"]
        if not base:
            raise ConfigError("no run tagged mode=none to compare against")
        ref = base[0]
    else:
        ref = runs[0][1]
    rows = []
    for d, s in runs:
        rows.append({"run": d, "mode": s.get("mode"), "s": s.get("s"), "final_test_acc": s["final_test_acc"],
                     "sr": s["sr"], "delta_acc": s["final_test_acc"] - ref["final_test_acc"]})
    cols = ("run", "mode", "s", "final_test_acc", "sr", "delta_acc")
    width = max(len(r["run"]) for r in rows)
    print(f"{'run':<{width}}  {'mode':<6} {'s':>5} {'acc':>8} {'SR':>7} {'delta':>8}")
    for r in rows:
        print(f"{r['run']:<{width}}  {r['mode']:<6} {r['s']:>5.2f} {r['final_test_acc']:>8.4f} "
              f"{r['sr']:>7.4f} {r['delta_acc']:>+8.4f}")
    if args.out:
        _write_csv(Path(args.out), rows, cols)
    return 0


def cmd_schedule(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    spec = ScheduleSpec(args.kind, args.s, args.beta, args.anneal)
    rows = [{"t": t, "r_t": r} for t, r in ratio_table(spec, args.T)]
    if args.out:
        _write_csv(Path(args.out), rows, ("t", "r_t"))
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=("t", "r_t"), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return 0


# --- parser -----------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, default_config: str) -> None:
    p.add_argument("--config", default=default_config,
                   help=f"bundled name ({', '.join(C.BUNDLED)}), YAML path or run manifest.json "
                        f"(default {default_config})")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tedprune", description="Dynamic dataset pruning experiments.",
        epilog="Any config field can be overridden with --section.key value, e.g. --trainer.lr 0.1.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration",
                       description="Writes manifest.json, metrics.jsonl, theta_1.txt, theta_T.txt, "
                                   "scores.csv and summary.json to --out.")
    _add_common(p, "blobs-small")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--s", type=float, help="target prune ratio")
    p.add_argument("--schedule", choices=KINDS)
    p.add_argument("--beta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--reverse", action="store_true", help="keep the lowest scores instead")
    p.add_argument("--repeat", type=int, default=1, help="seed-offset repeats into rep<k>/ child dirs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train over one axis of values",
                       description="Writes sweep.csv with columns: " + ",".join(SWEEP_COLUMNS)
                                   + " (one row per value per repeat).")
    _add_common(p, "blobs-small")
    p.add_argument("--axis", required=True, choices=("s", "beta", "mode", "schedule"))
    p.add_argument("--values", nargs="*", default=[])
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--s", type=float)
    p.add_argument("--repeat", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="brute-force retraining reports")
    p.add_argument("which", choices=("igd", "loo", "lemma1", "lemma2", "fidelity", "landscape", "igcurve"))
    _add_common(p, "oracle-tiny")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--m", type=int, help="subset size for lemma1")
    p.add_argument("--instances", type=int, default=1, help="seeded instances for lemma1")
    p.add_argument("--subset", type=int, nargs="*", help="ids removed for igd")
    p.add_argument("--sample-id", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--points", type=int)
    p.add_argument("--run", help="run directory holding theta_1/theta_T for landscape")
    p.add_argument("--fraction", type=float, help="pruned fraction for igcurve")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--against", choices=("first", "full"), default="first")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("schedule", help="schedule utilities")
    p.add_argument("action", choices=("dump",))
    p.add_argument("--kind", choices=KINDS, default="rollercoaster")
    p.add_argument("--s", type=float, default=0.7)
    p.add_argument("--beta", type=float, default=0.25)
    p.add_argument("--anneal", type=float, default=0.0)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_schedule)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        extra = C.parse_overrides(rest) if rest else []
        return args.func(args, extra)
    except (ConfigError, ScheduleError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, O.ConvergenceError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
