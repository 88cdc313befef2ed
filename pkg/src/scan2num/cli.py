"""``scan2num`` command line: phantoms, training, evaluation, attribution, densitometry."""
import argparse
import csv
import logging
import os
import sys
from collections import Counter

import numpy as np

from scan2num import _accel
from scan2num.config import ConfigError, load_config
from scan2num.data import SPLITS, TARGETS, load_volume, read_manifest
from scan2num.errors import CheckpointError, DataError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_DATA = 0, 1, 2, 3, 4

log = logging.getLogger("scan2num")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(raw):
    try:
        v = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {raw!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _counts(raw):
    try:
        vals = [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad count list {raw!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("counts must be positive integers")
    return vals


def _default_threads():
    raw = os.environ.get("S2N_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default: $S2N_THREADS or 1)")
    common.add_argument("--deterministic", action="store_true",
                        help="force sequential reductions for bitwise-reproducible output")
    common.add_argument("--config", default=None, help="config file with [section] key = value")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="scan2num", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-phantoms", parents=[common], help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=_positive_int, default=None)

    t = sub.add_parser("train", parents=[common], help="train a network on a manifest")
    t.add_argument("--manifest", default=None)
    t.add_argument("--target", choices=TARGETS, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--max-iter", type=int, default=None)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", default=None)
    e.add_argument("--split", default=None)
    e.add_argument("--target", choices=TARGETS, default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--resamples", type=_positive_int, default=None)
    e.add_argument("--ratio-checkpoint", default=None,
                   help="fev1_fvc network used for the predicted GOLD obstruction gate")

    a = sub.add_parser("attribute", parents=[common], help="per-slice responses of one volume")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--volume", required=True)
    a.add_argument("--out", required=True)

    d = sub.add_parser("densitometry", parents=[common], help="low-attenuation fraction of a volume")
    d.add_argument("--volume", required=True)
    d.add_argument("--threshold", type=float, default=-950.0)

    s = sub.add_parser("slice-experiment", parents=[common], help="test rho per slice count")
    s.add_argument("--manifest", default=None)
    s.add_argument("--target", choices=TARGETS, default=None)
    s.add_argument("--counts", type=_counts, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resamples", type=_positive_int, default=None)
    return p


# ------------------------------------------------------------- commands

def _run_config(args):
    cfg = load_config(args.config)
    for section in ("train", "phantom", "eval"):
        if args.seed is not None:
            cfg.override(section, "seed", args.seed)
    threads = args.threads or cfg.get("train", "threads") or _default_threads()
    cfg.override("train", "threads", threads)
    if args.deterministic:
        cfg.override("train", "deterministic", True)
    _accel.set_threads(1 if cfg.get("train", "deterministic", True) else threads)
    return cfg


def _manifest(args, cfg):
    path = getattr(args, "manifest", None) or cfg.get("data", "manifest")
    if not path:
        raise UsageError("no manifest given (--manifest or [data] manifest)")
    return read_manifest(path)


def cmd_gen_phantoms(args, cfg):
    from scan2num.phantom import generate_dataset

    count = args.count or cfg.get("phantom", "count", 0)
    if count < 1:
        raise UsageError("--count must be >= 1")
    path, entries, _ = generate_dataset(args.out, count, seed=cfg.get("phantom", "seed", 0),
                                        severity_range=cfg.severity_range(),
                                        template=cfg.phantom_template())
    splits = Counter(e.split for e in entries)
    ve = Counter(int(np.floor(e.labels.ve + 0.5)) for e in entries)
    copd = sum(e.labels.fev1_fvc < 0.7 for e in entries)
    print(f"wrote {len(entries)} cases to {path}: "
          + " ".join(f"{s}={splits.get(s, 0)}" for s in SPLITS)
          + " ve=" + ",".join(f"{k}:{ve.get(k, 0)}" for k in range(6))
          + f" copd={copd}")
    return EXIT_OK


def cmd_train(args, cfg):
    from dataclasses import replace

    from scan2num.train import load_state, train

    if args.max_iter is not None:
        cfg.override("train", "max_iter", args.max_iter)
    tcfg = cfg.train(args.target)
    hp = tcfg.hyperparameters()
    print("hyperparameters: " + " ".join(f"{k}={v}" for k, v in hp.items()))
    print(f"target={tcfg.target} seed={tcfg.seed} slices={tcfg.network.num_slices} "
          f"input={tcfg.network.input_size} channels={','.join(map(str, tcfg.network.conv_channels))}")
    sys.stdout.flush()
    entries = _manifest(args, cfg)
    state = None
    if args.resume and os.path.exists(os.path.join(args.out, "last.ckpt")):
        state = load_state(args.out)
        if state.net.config != tcfg.network:
            tcfg = replace(tcfg, network=state.net.config)
    result = train(entries, tcfg, out_dir=args.out, state=state)
    st = result.state
    print(f"done: iter={st.iter} best_iter={st.best_iter} best_val_loss={st.best_val_loss:.6g}")
    return EXIT_OK


def _load_net(path):
    from scan2num.model import Scan2NumNet

    return Scan2NumNet.load(path)


def cmd_eval(args, cfg):
    from scan2num.evaluation import evaluate
    from scan2num.seeding import derive_rng

    net, meta = _load_net(args.checkpoint)
    trained_on = meta.get("meta.target")
    target = args.target or trained_on or cfg.get("data", "target")
    if target is None:
        raise UsageError("checkpoint names no target; pass --target")
    if trained_on is not None and target != trained_on:
        raise DataError(f"checkpoint was trained on {trained_on!r}, not {target!r}")
    split = args.split or cfg.get("data", "split", "test")
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    ratio_net = None
    if args.ratio_checkpoint:
        ratio_net, rmeta = _load_net(args.ratio_checkpoint)
        if rmeta.get("meta.target", "fev1_fvc") != "fev1_fvc":
            raise DataError("--ratio-checkpoint must be a fev1_fvc network")
    entries = _manifest(args, cfg)
    resamples = args.resamples or cfg.get("eval", "resamples", 10_000)
    rng = derive_rng(cfg.get("eval", "seed", 0), "eval")
    report = evaluate(entries, net, target, split, resamples, rng, ratio_net)
    report.write(args.out)
    line = f"{target} n={len(report.ids)} rho={report.rho:.4f} [{report.rho_ci[0]:.4f}, {report.rho_ci[1]:.4f}]"
    if report.auc is not None:
        line += f" auc={report.auc:.4f} [{report.auc_ci[0]:.4f}, {report.auc_ci[1]:.4f}]"
    if report.kappa is not None:
        line += f" kappa={report.kappa:.4f}"
    print(line)
    return EXIT_OK


def cmd_attribute(args, cfg):
    from scan2num.inference import attribute

    net, _ = _load_net(args.checkpoint)
    score, rows = attribute(net, load_volume(args.volume))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice_index", "z_position", "response"])
        for i, z, r in rows:
            w.writerow([i, f"{z:.6g}", repr(r)])
        w.writerow(["score", "", repr(float(score))])
    print(f"score={score:.6f} peak_slice={max(rows, key=lambda r: r[2])[0]}")
    return EXIT_OK


def cmd_densitometry(args, cfg):
    from scan2num.evaluation import densitometric_score

    v = load_volume(args.volume)
    if not v.mask.any():
        raise OSError(f"{args.volume}: lung mask is empty")
    print(f"{densitometric_score(v, args.threshold):.6f}")
    return EXIT_OK


def cmd_slice_experiment(args, cfg):
    from scan2num.train import slice_count_experiment

    tcfg = cfg.train(args.target)
    entries = _manifest(args, cfg)
    resamples = args.resamples or cfg.get("eval", "resamples", 10_000)
    rows = slice_count_experiment(entries, tcfg, args.counts, resamples, args.out)
    for r in rows:
        print(f"{r['num_slices']:>3d} rho={r['rho']:.4f} [{r['ci_lo']:.4f}, {r['ci_hi']:.4f}]")
    print("reference at full scale (8/12/16/24 slices): 0.78/0.79/0.82/0.81")
    return EXIT_OK


COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms,
    "train": cmd_train,
    "eval": cmd_eval,
    "attribute": cmd_attribute,
    "densitometry": cmd_densitometry,
    "slice-experiment": cmd_slice_experiment,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"scan2num: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"scan2num: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"scan2num: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, CheckpointError) as exc:
        print(f"scan2num: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
