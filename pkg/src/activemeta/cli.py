"""Command-line harness: ``activemeta {gen-data,pretrain,finetune,eval,report,sweep}``.

Exit codes: 0 success, 1 runtime error, 2 usage error.  Every command is a
deterministic function of its flags; all randomness comes from ``--seed``
through ``derive_seed(seed, tag)``.  ``--config PATH`` reads UTF-8
``key=value`` lines that act as flag defaults (flags still win).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import metatune, segnet
from .errors import ActiveMetaError, ConfigError
from .metatune import MetaTuneConfig
from .metrics import (DICE_CSV_HEADER, SUMMARY_CSV_HEADER, aggregate, dice_report, fmt, mean_std,
                      report_rows, write_csv)
from .sampler import ORDER_LOG_HEADER
from .synthdata import NUM_CLASSES, GenConfig, canonical_domain, gen_dataset, load_split, read_dataset

log = logging.getLogger("activemeta")

DEFAULT_PATIENTS = {"source": 20, "target": 30}
MANIFEST = "run.json"
REPORT_HEADER = ("row", "method", "seed", "n", "target_enh_dsc", "target_enh_std", "target_dsc", "target_std",
                 "source_dsc", "source_std", "forgetting", "forgetting_std")


class UsageError(ActiveMetaError):
    pass


# helpers -------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dataset_hash(root) -> str:
    """Digest over dataset.txt and every patient file, in manifest order."""
    ds = read_dataset(root)
    h = hashlib.sha256()
    h.update((Path(root) / "dataset.txt").read_bytes())
    for d in ds.dirs():
        for name in ("manifest.txt", "volume.f32", "labels.u8"):
            h.update(_sha256(d / name).encode())
    return h.hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


class RunManifest:
    """``run.json``: written before work starts, finalized when it ends."""

    def __init__(self, out_dir: Path, command: str, argv, config: dict, inputs: dict):
        self.path = out_dir / MANIFEST
        digest = hashlib.sha256(json.dumps([command, config], sort_keys=True).encode()).hexdigest()[:12]
        self.data = {
            "run_id": f"{command}-{digest}",
            "command": command,
            "argv": list(argv),
            "config": config,
            "inputs": inputs,
            "outputs": {},
            "results": {},
            "status": "running",
            "started_at": _now(),
            "finished_at": None,
        }
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finalize(self, outputs: list[Path], results: dict) -> None:
        self.data["outputs"] = {p.name: _sha256(p) for p in outputs}
        self.data["results"] = results
        self.data["status"] = "complete"
        self.data["finished_at"] = _now()
        self._write()


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _samples(volumes):
    return [s for v in volumes for s in v.slices]


def _load_params(path):
    params, config = segnet.load_params(path)
    return params, config


# commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    domain = canonical_domain(args.domain)
    n = args.patients if args.patients is not None else DEFAULT_PATIENTS[domain]
    cfg = GenConfig(args.image_size, args.slices, args.noise_sigma, args.contrast_margin, not args.no_skull)
    ds = gen_dataset(domain, n, args.seed, cfg, args.out)
    n_train = sum(1 for _, sp in ds.entries if sp == "train")
    print(f"wrote {n} {domain} patients to {args.out} ({n_train} train, {n - n_train} val)")
    return 0


def cmd_pretrain(args) -> int:
    train = _samples(load_split(args.data, "train"))
    val = _samples(load_split(args.data, "val"))
    if not train or not val:
        raise ConfigError(f"{args.data}: pretraining needs nonempty train and val splits")
    c_in, size = train[0].x.shape[0], train[0].x.shape[-1]
    net = segnet.NetworkConfig(c_in, NUM_CLASSES, args.width, size)
    out = _out_dir(args.out)
    config = {"epochs": args.epochs, "lr": args.lr, "seed": args.seed, "network": net.__dict__}
    manifest = RunManifest(out, "pretrain", sys.argv[1:], config, {"data": dataset_hash(args.data)})
    theta0 = segnet.init_params(net, args.seed)
    on_epoch = None if args.quiet else (lambda r: print(f"epoch {r.epoch}: loss {r.train_loss:.4f} "
                                                        f"source-val dsc {r.source_val_dsc:.4f}", flush=True))
    params, records = metatune.pretrain(theta0, train, val, args.epochs, args.lr, args.seed, on_epoch=on_epoch)
    params_path, csv_path = out / "params.mtp", out / "pretrain.csv"
    segnet.save_params(params_path, params, net)
    rows = [[str(r.epoch), "" if r.epoch == 0 else fmt(r.train_loss), fmt(r.source_val_dsc)] for r in records]
    write_csv(csv_path, metatune.PRETRAIN_HEADER, rows)
    manifest.finalize([params_path, csv_path], {"source_val_dsc": records[-1].source_val_dsc})
    print(f"source-val mean foreground dsc {records[-1].source_val_dsc:.4f}; params in {params_path}")
    return 0


def _tune_config(args) -> MetaTuneConfig:
    mode = {"second": "second_order", "first": "first_order"}[args.mode]
    return MetaTuneConfig(alpha=args.alpha, beta=args.beta, meta_steps=args.meta_steps,
                          inner_steps=args.inner_steps, mode=mode, tau=args.tau, method=getattr(args, "method", "active"),
                          seed=args.seed)


def finetune(params_path, source, target, out, config: MetaTuneConfig, order_log=None, argv=()) -> dict:
    theta0, net = _load_params(params_path)
    target_train = load_split(target, "train")
    target_val = _samples(load_split(target, "val"))
    source_val = _samples(load_split(source, "val"))
    if not target_val:
        raise ConfigError(f"{target}: target validation split is empty")
    out = _out_dir(out)
    inputs = {"params": _sha256(Path(params_path)), "source": dataset_hash(source), "target": dataset_hash(target)}
    manifest = RunManifest(out, "finetune", argv, config.to_dict(), inputs)
    if config.method == "naive":
        result = metatune.run_naive_tune(theta0, target_train, source_val, target_val, config)
    else:
        result = metatune.run_meta_tune(theta0, target_train, source_val, target_val, config)
    tuned, traj = out / "tuned.mtp", out / "trajectory.csv"
    segnet.save_params(tuned, result.params, net)
    write_csv(traj, metatune.TRAJECTORY_HEADER, (r.csv_row() for r in result.records))
    outputs = [tuned, traj]
    if order_log:
        Path(order_log).parent.mkdir(parents=True, exist_ok=True)
        write_csv(order_log, ORDER_LOG_HEADER, result.order_log)
    final = result.final
    results = {
        "method": config.method,
        "seed": config.seed,
        "initial_source_val_dsc": result.initial.source_dsc,
        "initial_target_val_dsc": result.initial.target_dsc,
        "initial_target_val_enhancing_dsc": result.initial.target_enhancing_dsc,
        "final_source_val_dsc": final.source_dsc,
        "final_target_val_dsc": final.target_dsc,
        "final_target_val_enhancing_dsc": final.target_enhancing_dsc,
        "forgetting": result.initial.source_dsc - final.source_dsc,
    }
    manifest.finalize(outputs, results)
    return results


def cmd_finetune(args) -> int:
    config = _tune_config(args)
    if config.method == "naive" and args.beta_given:
        log.warning("--method naive ignores --beta")
    res = finetune(args.params, args.source, args.target, args.out, config, args.order_log, sys.argv[1:])
    print(f"{res['method']} seed {res['seed']}: target-val dsc {res['final_target_val_dsc']:.4f} "
          f"(enhancing {res['final_target_val_enhancing_dsc']:.4f}), "
          f"source-val dsc {res['final_source_val_dsc']:.4f}, forgetting {res['forgetting']:.4f}")
    return 0


def eval_rows(preds, samples, num_classes: int = NUM_CLASSES):
    """Per-slice CSV rows and the class summary for predictions ``preds``."""
    reports, rows = [], []
    for p, s in zip(preds, samples):
        rep = dice_report(p, s.y, num_classes)
        reports.append(rep)
        rows.extend(report_rows(s.patient, s.index, rep))
    summary = aggregate(reports)
    summary_rows = [[str(k), fmt(v.mean), fmt(v.std), str(v.n)] for k, v in summary.items()]
    return rows, summary_rows


def cmd_eval(args) -> int:
    params, _ = _load_params(args.params)
    samples = _samples(load_split(args.data, args.split))
    if not samples:
        raise ConfigError(f"{args.data}: split {args.split!r} is empty")
    preds = segnet.predict_batch(params, np.stack([s.x for s in samples]))
    rows, summary_rows = eval_rows(preds, samples)
    if args.out:
        write_csv(args.out, DICE_CSV_HEADER, rows)
    if args.summary:
        write_csv(args.summary, SUMMARY_CSV_HEADER, summary_rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(SUMMARY_CSV_HEADER)
    w.writerows(summary_rows)
    return 0


def collect_runs(runs_dir) -> list[dict]:
    root = Path(runs_dir)
    if not root.is_dir():
        raise ConfigError(f"{root}: not a directory")
    found = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        path = d / MANIFEST
        if not path.exists():
            log.warning("%s: no %s, skipping", d, MANIFEST)
            continue
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            log.warning("%s: unreadable manifest (%s), skipping", path, exc)
            continue
        if data.get("command") != "finetune" or data.get("status") != "complete":
            log.warning("%s: not a completed finetune run, skipping", d)
            continue
        found.append(data["results"])
    return found


_METHOD_ORDER = {"naive": 0, "passive": 1, "active": 2}


def report_table(results: list[dict]) -> list[list[str]]:
    keys = ("final_target_val_enhancing_dsc", "final_target_val_dsc", "final_source_val_dsc", "forgetting")
    rows = []
    results = sorted(results, key=lambda r: (_METHOD_ORDER.get(r["method"], 9), r["method"], r["seed"]))
    base = results[0]
    rows.append(["baseline", "pretrained", "", "1", fmt(base["initial_target_val_enhancing_dsc"]), "",
                 fmt(base["initial_target_val_dsc"]), "", fmt(base["initial_source_val_dsc"]), "", fmt(0.0), ""])
    for r in results:
        row = ["run", r["method"], str(r["seed"]), "1"]
        for k in keys:
            row += [fmt(r[k]), ""]
        rows.append(row)
    for method in sorted({r["method"] for r in results}, key=lambda m: (_METHOD_ORDER.get(m, 9), m)):
        group = [r for r in results if r["method"] == method]
        row = ["aggregate", method, "", str(len(group))]
        for k in keys:
            m, s = mean_std([r[k] for r in group])
            row += [fmt(m), fmt(s)]
        rows.append(row)
    return rows


def cmd_report(args) -> int:
    results = collect_runs(args.runs)
    if not results:
        print("error: no runs found", file=sys.stderr)
        return 1
    rows = report_table(results)
    if args.out:
        write_csv(args.out, REPORT_HEADER, rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    w.writerows(r for r in rows if r[0] != "run")
    return 0


def _sweep_one(job):
    params, source, target, out, cfg = job
    return finetune(params, source, target, out, MetaTuneConfig(**cfg), None, ["sweep"])


def parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def cmd_sweep(args) -> int:
    base = _tune_config(args)
    out = _out_dir(args.out)
    jobs = []
    for method in args.methods.split(","):
        if method not in _METHOD_ORDER:
            raise UsageError(f"unknown method {method!r}; expected naive, passive or active")
        for seed in parse_seeds(args.seeds):
            cfg = dict(base.to_dict(), method=method, seed=seed)
            jobs.append((args.params, args.source, args.target, str(out / f"{method}_s{seed}"), cfg))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_sweep_one, jobs))
    else:
        for job in jobs:
            _sweep_one(job)
    rows = report_table(collect_runs(out))
    write_csv(out / "report.csv", REPORT_HEADER, rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    w.writerows(r for r in rows if r[0] != "run")
    return 0


# argument parsing ----------------------------------------------------------

def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"DSC threshold must be in [0, 1], got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _tune_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--params", help="pretrained .mtp file")
    p.add_argument("--source", help="source dataset directory (its val split measures forgetting)")
    p.add_argument("--target", help="target dataset directory")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--alpha", type=_positive_float, default=0.01, help="inner / naive learning rate")
    p.add_argument("--beta", type=_positive_float, default=None, help="meta learning rate (default 0.005)")
    p.add_argument("--meta-steps", type=_nonneg_int, default=30)
    p.add_argument("--inner-steps", type=_positive_int, default=1)
    p.add_argument("--tau", type=_unit_interval, default=0.5, help="good/bad DSC threshold in [0, 1]")
    p.add_argument("--mode", choices=("second", "first"), default="second")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="activemeta", description="Synthetic domain-shift experiments: data, pretraining, fine-tuning, evaluation, reports.")
    parser.add_argument("--config", help="UTF-8 key=value file of flag defaults")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and results")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="only print warnings and results")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--domain", default="target", help="source|glioma|hgg or target|mets|metastasis")
    p.add_argument("--patients", type=_positive_int, default=None, help="default 20 source, 30 target")
    p.add_argument("--seed", type=int, default=0, help="seed of the first patient")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--slices", type=int, default=25)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--contrast-margin", type=float, default=0.3)
    p.add_argument("--no-skull", action="store_true")
    p.set_defaults(func=cmd_gen_data, required=("out",))

    p = sub.add_parser("pretrain", parents=[common], help="train on the source domain")
    p.add_argument("--data", help="source dataset directory")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--epochs", type=_nonneg_int, default=20)
    p.add_argument("--lr", type=_positive_float, default=0.05)
    p.add_argument("--width", type=_positive_int, default=8, help="base channel width")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain, required=("data", "out"))

    p = sub.add_parser("finetune", parents=[common], help="adapt to the target domain")
    _tune_flags(p)
    p.add_argument("--method", choices=("naive", "passive", "active"), default="active")
    p.add_argument("--order-log", help="CSV of the exact (D, D') schedule")
    p.set_defaults(func=cmd_finetune, required=("params", "source", "target", "out"))

    p = sub.add_parser("eval", parents=[common], help="per-slice DSC of a parameter file")
    p.add_argument("--params")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", help="per-slice CSV")
    p.add_argument("--summary", help="class summary CSV (also printed)")
    p.set_defaults(func=cmd_eval, required=("params", "data"))

    p = sub.add_parser("report", parents=[common], help="compare finetune runs")
    p.add_argument("--runs", help="directory of run directories")
    p.add_argument("--out", help="comparison CSV")
    p.set_defaults(func=cmd_report, required=("runs",))

    p = sub.add_parser("sweep", parents=[common], help="finetune every (method, seed) and report")
    _tune_flags(p)
    p.add_argument("--methods", default="naive,passive,active")
    p.add_argument("--seeds", default="0-9", help="e.g. 0-9 or 1,3,5")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.set_defaults(func=cmd_sweep, required=("params", "source", "target", "out"))
    return parser


def read_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read --config {path}: {exc}") from exc
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre, _ = parser.parse_known_args(argv)
    if not pre.config:
        return parser.parse_args(argv)
    values = read_config_file(pre.config)
    subparser = parser._subparsers._group_actions[0].choices[pre.command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "func", "required"):
            parser.error(f"--config: unknown key {key!r} for {pre.command}")
        if isinstance(action, argparse._StoreTrueAction):
            low = value.lower()
            if low not in _TRUE | _FALSE:
                parser.error(f"--config: {key} expects true/false, got {value!r}")
            defaults[key] = low in _TRUE
        else:
            defaults[key] = value  # strings are converted by the action's type
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"activemeta: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    missing = [f"--{name.replace('_', '-')}" for name in args.required if getattr(args, name, None) is None]
    if missing:
        parser.print_usage(sys.stderr)
        print(f"activemeta {args.command}: error: missing required {', '.join(missing)}", file=sys.stderr)
        return 2
    if hasattr(args, "beta"):
        args.beta_given = args.beta is not None
        if args.beta is None:
            args.beta = 0.005
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"activemeta {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ActiveMetaError, OSError) as exc:
        print(f"activemeta {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
