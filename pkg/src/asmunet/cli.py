"""``asmunet`` command-line entry point.

Exit codes: 0 success, 1 validation or assertion failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
import timeit
from pathlib import Path

import numpy as np
import torch

from . import gradcheck as gc
from . import trainer
from .config import PRESETS, ConfigKeyError, RunConfig, preset
from .metrics import format_table, mean_report
from .ssm import selective_scan, set_scan_threads
from .synthetic import write_dataset
from .unet import ConfigError

log = logging.getLogger("asmunet")

BENCH_RATIO = (1.6, 2.6)


class UsageError(Exception):
    pass


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load_config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = str(args.seed)
    return cfg.with_overrides(**overrides) if overrides else cfg


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory not found: {p}")
    return p


def write_metrics_csv(path, rows):
    """``rows`` are ``(dict of leading columns, MetricsReport)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        lead = list(rows[0][0])
        w.writerow(lead + rows[0][1].columns())
        for extra, rep in rows:
            w.writerow([extra[k] for k in lead] + [f"{v:.6f}" for v in rep.values()])


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    dims = tuple(args.dims)
    if len(dims) != 3:
        raise UsageError("--dims needs three values")
    entries = write_dataset(args.out, args.cases, args.seed, dims)
    counts = {s: sum(e.split == s for e in entries) for s in ("train", "val", "test")}
    print(f"wrote {len(entries)} cases to {args.out} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    _require_dir(args.data, "data")
    if args.resume and not Path(args.resume).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.resume}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    res = trainer.train(cfg, args.data, out_dir=out, resume=args.resume,
                        max_epochs_run=args.epochs)
    last = res.history[-1] if res.history else {}
    print(f"epochs run {res.epochs_run}, last loss {last.get('train_loss', 'n/a')}, "
          f"best val {res.best_metric:.4f} at epoch {res.best_epoch}"
          + (" (early stop)" if res.stopped_early else ""))
    return 0


def cmd_eval(args):
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    data = trainer.load_dataset(_require_dir(args.data, "data"))
    cases = getattr(data, args.split)
    if not cases:
        raise UsageError(f"split {args.split!r} is empty")
    model, cfg = trainer.load_model(args.checkpoint)
    mean, per_case = trainer.evaluate(model, cases, cfg.train.patch, cfg.data.sw_stride)
    rows = [({"case": c.case_id}, r) for c, r in zip(cases, per_case)] + [({"case": "mean"}, mean)]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / f"metrics_{args.split}.csv", rows)
    print(format_table([(args.split, mean)]))
    return 0


def cmd_gradcheck(args):
    t0 = time.time()
    sign = -1.0 if args.inject_sign_flip else 1.0
    results = gc.run(args.module and [args.module], seed=args.seed, sign=sign)
    print(gc.format_results(results))
    ok = all(r.ok for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: {len(results)} parameter groups, worst "
          f"{max(r.max_rel_err for r in results):.3e} (tol {gc.TOL:g}), {time.time() - t0:.1f}s")
    return 0 if ok else 1


def bench_scan(lengths, channels=16, state=8, batch=1, repeats=5, seed=0, min_sample_s=0.05):
    """Median per-call wall time of a forward selective scan per length.

    A sample times a loop of calls (about ``min_sample_s`` at the shortest
    length). Samples are taken round-robin over the lengths so that slow
    spells on a shared machine hit every length alike.
    """
    g = torch.Generator().manual_seed(seed)
    timers = []
    for s in lengths:
        x = torch.randn(batch, s, channels, generator=g)
        delta = torch.rand(batch, s, channels, generator=g) * 0.1 + 0.01
        A = -torch.rand(channels, state, generator=g) - 0.5
        B = torch.randn(batch, s, state, generator=g)
        C = torch.randn(batch, s, state, generator=g)
        D = torch.randn(channels, generator=g)
        timer = timeit.Timer(lambda a=(x, delta, A, B, C, D): selective_scan(*a))
        timer.timeit(1)  # warm-up / JIT
        timers.append(timer)
    number = max(1, math.ceil(min_sample_s / max(timers[0].timeit(1), 1e-9)))
    times = [[] for _ in lengths]
    for _ in range(repeats):
        for i, timer in enumerate(timers):
            times[i].append(timer.timeit(number) / number)
    rows = [{"length": s, "median_ms": 1e3 * float(np.median(t)), "min_ms": 1e3 * min(t),
             "repeats": repeats, "calls": number} for s, t in zip(lengths, times)]
    for prev, row in zip([None] + rows, rows):
        row["ratio"] = (row["median_ms"] / prev["median_ms"]) if prev else float("nan")
    return rows


def cmd_bench_scan(args):
    lengths = sorted(args.lengths)
    if not lengths or min(lengths) < 1:
        raise UsageError("--lengths needs positive integers")
    rows = bench_scan(lengths, args.channels, args.state, args.batch, args.repeats)
    fields = ["length", "median_ms", "min_ms", "repeats", "calls", "ratio"]
    fh = open(Path(args.out) / "bench_scan.csv", "w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.4f}" if isinstance(r[k], float) else r[k]) for k in fields})
    if fh is not sys.stdout:
        fh.close()
    # only exact doublings are held to the near-linear bound
    bad = [r for p, r in zip(rows, rows[1:]) if r["length"] == 2 * p["length"]
           and not BENCH_RATIO[0] <= r["ratio"] <= BENCH_RATIO[1]]
    for r in bad:
        print(f"ratio at length {r['length']} = {r['ratio']:.3f} outside {BENCH_RATIO}",
              file=sys.stderr)
    return 1 if bad else 0


def _train_eval(cfg, data, out_dir):
    res = trainer.train(cfg, data, out_dir=out_dir)
    mean, _ = trainer.evaluate(res.model, data.test, cfg.train.patch, cfg.data.sw_stride)
    return mean, res


def cmd_ablate(args):
    base = _load_config(args)
    names = sorted(PRESETS) if args.preset == "all" else [args.preset]
    if args.dump_config:
        for name in names:
            print(f"# preset {name}")
            print(preset(name, base).to_text(), end="")
        return 0
    if not args.data or not args.out:
        raise UsageError("ablate needs --data and --out unless --dump-config is given")
    data = trainer.load_dataset(_require_dir(args.data, "data"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, table = [], []
    for name in names:
        reps = []
        for seed in args.seeds:
            cfg = preset(name, base).with_overrides(**{"train.seed": str(seed)})
            rep, _ = _train_eval(cfg, data, out / f"{name}_seed{seed}")
            reps.append(rep)
            rows.append(({"preset": name, "seed": seed}, rep))
        mean = mean_report(reps)
        rows.append(({"preset": name, "seed": "mean"}, mean))
        table.append((name.upper(), mean))
    write_metrics_csv(out / "ablation.csv", rows)
    print(format_table(table))
    return 0


def cmd_sweep_branches(args):
    base = _load_config(args)
    data = trainer.load_dataset(_require_dir(args.data, "data"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, table = [], []
    for nb in args.branches:
        for seed in args.seeds:
            cfg = base.with_overrides(**{"asm.n_branches": str(nb), "train.seed": str(seed)})
            t0 = time.time()
            rep, res = _train_eval(cfg, data, out / f"branches{nb}_seed{seed}")
            n_params = sum(p.numel() for p in res.model.parameters())
            rows.append(({"n_branches": nb, "seed": seed, "n_params": n_params,
                          "seconds": f"{time.time() - t0:.1f}"}, rep))
            table.append((f"{nb} branch(es) s{seed}", rep))
    write_metrics_csv(out / "branch_sweep.csv", rows)
    print(format_table(table))
    return 0


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="asmunet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="key=value run configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    sp = sub.add_parser("gen-data", help="write a synthetic biliary dataset")
    sp.add_argument("--cases", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dims", type=_ints, default=[24, 24, 24], help="W,H,D (default 24,24,24)")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    config_args(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--resume", help="continue from a last.asmc checkpoint")
    sp.add_argument("--epochs", type=int, help="run at most this many epochs in this call")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="sliding-window evaluation of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--out", help="directory for metrics_<split>.csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--module", choices=sorted(gc.SUITES))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench-scan", help="time selective_scan across sequence lengths")
    sp.add_argument("--lengths", type=_ints, default=[1024, 2048, 4096, 8192])
    sp.add_argument("--channels", type=int, default=16)
    sp.add_argument("--state", type=int, default=8)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--out", help="directory for bench_scan.csv (default: stdout)")
    sp.set_defaults(func=cmd_bench_scan)

    sp = sub.add_parser("ablate", help="train and evaluate ablation presets m1..m5")
    config_args(sp)
    sp.add_argument("--preset", choices=sorted(PRESETS) + ["all"], default="all")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--seeds", type=_ints, default=[0])
    sp.add_argument("--dump-config", action="store_true", help="print preset configs and exit")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep-branches", help="train and evaluate several branch counts")
    config_args(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--branches", type=_ints, default=[0, 1, 3])
    sp.add_argument("--seeds", type=_ints, default=[0])
    sp.set_defaults(func=cmd_sweep_branches)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    torch.set_num_threads(max(1, args.threads))
    set_scan_threads()
    try:
        return args.func(args)
    except (UsageError, ConfigKeyError, ConfigError, FileNotFoundError) as exc:
        print(f"asmunet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (trainer.TrainingError, ValueError, OSError) as exc:
        print(f"asmunet {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
