"""Command-line entry point: dataset generation, training, quantization,
evaluation, bit-width sweeps and figure-data bundles.

Every command writes a run manifest next to its outputs. ``--verify MANIFEST``
replays a recorded run in a scratch directory and checks both the input and
output digests.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .bayes_net import (TABLE_II_ARCH, TrainConfig, build_model, load_checkpoint,
                        save_checkpoint, train_fp32)
from .errors import ConfigError, QatBnnError
from .qat_trainer import QatConfig, fidelity_epsilon, post_training_quantize, qat_finetune
from .quantizer import SUPPORTED_BITS
from .synth_data import DatasetConfig, build_dataset, load_dataset, save_dataset
from .tensor_core import RngStream
from .tradeoff import (SelectionConstraints, SweepConfig, compute_cost, count_macs,
                       memory_footprint, reports_from_csv, reports_to_csv, select_bitwidth,
                       sweep_bitwidths)
from .uncertainty_eval import evaluate

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
DATA_ENV = "QATBNN_DATA_DIR"
MANIFEST_FORMAT = "qatbnn-run/1"
EXPERIMENTS = ("fig4a", "fig4b", "fig5", "fig7", "fig8")


class UsageError(QatBnnError):
    exit_code = EXIT_USAGE


class IntegrityError(QatBnnError):
    exit_code = EXIT_IO


# -- file helpers -----------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _dataset_files(path):
    path = Path(path)
    manifest = path / "manifest.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest in {path}")
    files = json.loads(manifest.read_text()).get("splits", {})
    return [manifest] + [path / v["file"] for v in files.values()]


def _require_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} {path} does not exist")


def _data_dir(args):
    data = args.data or os.environ.get(DATA_ENV)
    if not data:
        raise ConfigError(f"no dataset directory: pass --data or set {DATA_ENV}")
    return Path(data)


def _parse_bits(text):
    try:
        bits = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"bad bit list {text!r}") from None
    bad = [b for b in bits if b not in SUPPORTED_BITS]
    if not bits or bad:
        raise ConfigError(f"bit widths must come from {SUPPORTED_BITS}, got {text!r}")
    return bits


def _check_bits(b):
    if b not in SUPPORTED_BITS:
        raise ConfigError(f"bit width {b} not in {SUPPORTED_BITS}")


def _check_out_parent(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise FileNotFoundError(f"output directory {parent} does not exist")


# -- commands -----------------------------------------------------------------
# Each command has a validator (no side effects) returning the list of input
# files, and a runner returning the list of output files.

def _dataset_config(args):
    return DatasetConfig(
        train_per_class=args.train_per_class, val_per_class=args.val_per_class,
        test_per_class=args.test_per_class, unseen_per_class=args.unseen_per_class,
        length=args.length, master_seed=args.seed)


def check_gen_data(args):
    _dataset_config(args).validate()
    return []


def run_gen_data(args):
    ds = build_dataset(_dataset_config(args))
    return save_dataset(ds, args.out)


def _train_config(args):
    kw = {"seed": args.seed}
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    if args.lr is not None:
        kw["learning_rate"] = args.lr
    cfg = TrainConfig(**kw)
    cfg.validate()
    return cfg


def check_train(args):
    _train_config(args)
    _check_out_parent(args.out)
    return _dataset_files(_data_dir(args))


def run_train(args):
    cfg = _train_config(args)
    ds = load_dataset(_data_dir(args))
    shape = ds.arrays("train")[0].shape[1:]
    model, history = train_fp32(build_model(input_shape=shape, seed=args.seed), ds, cfg)
    save_checkpoint(args.out, model, extra={
        "method": "fp32", "bits": 32, "train_config": cfg.to_dict(),
        "final_val_accuracy": history["val_accuracy"][-1]})
    return [Path(args.out)]


def _qat_config(args, raw):
    base = TrainConfig(**raw["train_config"]) if raw.get("train_config") else TrainConfig()
    over = {}
    if args.epochs is not None:
        over["epochs"] = args.epochs
    if args.lr is not None:
        over["learning_rate"] = args.lr
    cfg = QatConfig.from_pretraining(base, args.bits, seed=args.seed, **over)
    cfg.validate()
    return cfg


def check_qat(args):
    _check_bits(args.bits)
    _require_file(args.input, "checkpoint")
    _check_out_parent(args.out)
    return [Path(args.input)] + _dataset_files(_data_dir(args))


def run_qat(args):
    model, plan, raw = load_checkpoint(args.input)
    if plan is not None:
        raise ConfigError("qat expects a float checkpoint, got a quantized one")
    cfg = _qat_config(args, raw)
    ds = load_dataset(_data_dir(args))
    qmodel, qplan, history = qat_finetune(model, ds, cfg)
    save_checkpoint(args.out, qmodel, qplan, extra={
        "method": "qat", "bits": args.bits, "qat_config": cfg.to_dict(),
        "train_config": raw.get("train_config"),
        "final_val_accuracy": history["val_accuracy"][-1]})
    return [Path(args.out)]


def check_ptq(args):
    _check_bits(args.bits)
    _require_file(args.input, "checkpoint")
    _check_out_parent(args.out)
    return [Path(args.input)] + _dataset_files(_data_dir(args))


def run_ptq(args):
    model, plan, raw = load_checkpoint(args.input)
    if plan is not None:
        raise ConfigError("ptq expects a float checkpoint, got a quantized one")
    ds = load_dataset(_data_dir(args))
    x, _, _ = ds.arrays("train")
    qmodel, qplan = post_training_quantize(model, args.bits, x, args.seed)
    save_checkpoint(args.out, qmodel, qplan, extra={
        "method": "ptq", "bits": args.bits, "train_config": raw.get("train_config")})
    return [Path(args.out)]


def check_eval(args):
    if args.mc_samples < 1 or args.bins < 1:
        raise ConfigError("--mc-samples and --bins must be positive")
    _require_file(args.input, "checkpoint")
    _check_out_parent(args.out)
    if args.pairs_csv:
        _check_out_parent(args.pairs_csv)
    return [Path(args.input)] + _dataset_files(_data_dir(args))


def run_eval(args):
    model, plan, _ = load_checkpoint(args.input)
    ds = load_dataset(_data_dir(args))
    rep = evaluate(model, ds, args.mc_samples, RngStream(args.seed).child(0xE7A1), plan,
                   noise_snr=args.noise_snr, noise_seed=args.seed, n_bins=args.bins)
    atomic_write(args.out, _dump(rep.to_dict()))
    if args.pairs_csv:
        atomic_write(args.pairs_csv, _table(["confidence", "correct"], rep.pairs))
        return [Path(args.out), Path(args.pairs_csv)]
    return [Path(args.out)]


def check_fidelity(args):
    if args.mc_samples < 1:
        raise ConfigError("--mc-samples must be positive")
    _require_file(args.ref, "reference checkpoint")
    _require_file(args.quant, "quantized checkpoint")
    _check_out_parent(args.out)
    return [Path(args.ref), Path(args.quant)] + _dataset_files(_data_dir(args))


def run_fidelity(args):
    ref, ref_plan, _ = load_checkpoint(args.ref)
    quant, plan, _ = load_checkpoint(args.quant)
    ds = load_dataset(_data_dir(args))
    x, _, _ = ds.arrays("test_seen")
    eps = fidelity_epsilon(ref, quant, plan, x, args.mc_samples,
                           RngStream(args.seed).child(0xF1D), ref_plan)
    atomic_write(args.out, _dump({"epsilon": eps, "mc_samples": args.mc_samples,
                                  "split": "test_seen"}))
    print(f"epsilon {eps:.6g}")
    return [Path(args.out)]


def _sweep_config(args, raw):
    base = TrainConfig(**raw["train_config"]) if raw.get("train_config") else TrainConfig()
    return SweepConfig(qat=QatConfig.from_pretraining(base, 8, seed=args.seed),
                       eval_samples=args.mc_samples, seed=args.seed)


def check_sweep(args):
    _parse_bits(args.bits)
    if args.mc_samples < 1:
        raise ConfigError("--mc-samples must be positive")
    _require_file(args.input, "checkpoint")
    _check_out_parent(args.out)
    return [Path(args.input)] + _dataset_files(_data_dir(args))


def run_sweep(args):
    model, plan, raw = load_checkpoint(args.input)
    if plan is not None:
        raise ConfigError("sweep expects a float checkpoint")
    ds = load_dataset(_data_dir(args))
    reports = sweep_bitwidths(model, ds, _parse_bits(args.bits), _sweep_config(args, raw))
    atomic_write(args.out, reports_to_csv(reports))
    return [Path(args.out)]


def check_select(args):
    for name in ("a_min", "u_max"):
        v = getattr(args, name)
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"--{name.replace('_', '-')} must lie in [0, 1]")
    _require_file(args.sweep, "sweep table")
    if args.out:
        _check_out_parent(args.out)
    return [Path(args.sweep)]


def run_select(args):
    reports = reports_from_csv(Path(args.sweep).read_text())
    sel = select_bitwidth(reports, SelectionConstraints(args.a_min, args.u_max))
    print(f"b* = {sel.b}" if sel.feasible else
          f"infeasible (closest: b={sel.report.b})")
    if args.out:
        atomic_write(args.out, _dump(sel.to_dict()))
        return [Path(args.out)]
    return []


# -- reproduce ------------------------------------------------------------------

def _pipeline(seed):
    ds = build_dataset(DatasetConfig(master_seed=seed))
    cfg = TrainConfig(seed=seed)
    model, _ = train_fp32(build_model(seed=seed), ds, cfg)
    return ds, cfg, model


def _fig5(seed, out):
    rows = []
    for name, arch in (("desk", None), ("full", TABLE_II_ARCH)):
        model = build_model(arch, seed=seed)
        macs = count_macs(model)
        for bw in (2, 3, 4, 8, 16, 32):
            for ba in (2, 3, 4, 8, 16, 32):
                rows.append([name, bw, ba, macs, compute_cost(model, bw, ba),
                             memory_footprint(model, bw).payload_bytes])
    atomic_write(out / "fig5.csv", _table(
        ["arch", "b_weights", "b_acts", "macs", "cost", "memory_payload_bytes"], rows))
    return [out / "fig5.csv"]


def _fig_sweep(seed, out, name, bits):
    ds, cfg, model = _pipeline(seed)
    sweep_cfg = SweepConfig(qat=QatConfig.from_pretraining(cfg, 8), seed=seed)
    reports = sweep_bitwidths(model, ds, bits, sweep_cfg)
    atomic_write(out / f"{name}.csv", reports_to_csv(reports))
    return [out / f"{name}.csv"]


def _fig4a(seed, out):
    ds, cfg, model = _pipeline(seed)
    x, _, _ = ds.arrays("train")
    rows = []
    legs = [("fp32", 32, model, None)]
    for b in (4, 8):
        qm, qp, _ = qat_finetune(model, ds, QatConfig.from_pretraining(cfg, b))
        pm, pp = post_training_quantize(model, b, x, seed)
        legs += [("qat", b, qm, qp), ("ptq", b, pm, pp)]
    for method, b, m, plan in legs:
        rep = evaluate(m, ds, 64, RngStream(seed).child(0x4A), plan)
        for fault, q in rep.confidence_quantiles.items():
            rows.append([method, b, int(fault), q["min"], q["q25"], q["median"],
                         q["q75"], q["max"], rep.accuracy])
    atomic_write(out / "fig4a.csv", _table(
        ["method", "b", "fault", "min", "q25", "median", "q75", "max", "accuracy"], rows))
    return [out / "fig4a.csv"]


def _fig4b(seed, out):
    ds, cfg, model = _pipeline(seed)
    qm, qp, _ = qat_finetune(model, ds, QatConfig.from_pretraining(cfg, 8))
    unc, cov = [], []
    for name, m, plan in (("fp32", model, None), ("qat8", qm, qp)):
        for cond, snr in (("clean", None), ("-20dB", -20.0)):
            rep = evaluate(m, ds, 64, RngStream(seed).child(0x4B), plan,
                           noise_snr=snr, noise_seed=seed)
            for split, s in (("seen", rep.seen), ("unseen", rep.unseen)):
                unc.append([name, cond, split, s["total"], s["aleatoric"], s["epistemic"],
                            s["mean_confidence"]])
            cov += [[name, cond, lvl, c] for lvl, c in rep.coverage]
    atomic_write(out / "fig4b_uncertainty.csv", _table(
        ["model", "condition", "split", "total", "aleatoric", "epistemic", "mean_confidence"],
        unc))
    atomic_write(out / "fig4b_coverage.csv", _table(
        ["model", "condition", "level", "coverage"], cov))
    return [out / "fig4b_uncertainty.csv", out / "fig4b_coverage.csv"]


def reproduce(experiment, seed, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if experiment == "fig5":
        return _fig5(seed, out)
    if experiment == "fig7":
        return _fig_sweep(seed, out, "fig7", [4, 8, 16, 32])
    if experiment == "fig8":
        return _fig_sweep(seed, out, "fig8", [2, 3, 4, 8, 32])
    if experiment == "fig4a":
        return _fig4a(seed, out)
    if experiment == "fig4b":
        return _fig4b(seed, out)
    raise UsageError(f"unknown experiment {experiment!r}")


def check_reproduce(args):
    if args.experiment not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.experiment!r}; choose from {EXPERIMENTS}")
    return []


def run_reproduce(args):
    return reproduce(args.experiment, args.seed, args.out_dir)


# -- parser -------------------------------------------------------------------

COMMANDS = {
    "gen-data": (check_gen_data, run_gen_data),
    "train": (check_train, run_train),
    "qat": (check_qat, run_qat),
    "ptq": (check_ptq, run_ptq),
    "eval": (check_eval, run_eval),
    "fidelity": (check_fidelity, run_fidelity),
    "sweep": (check_sweep, run_sweep),
    "select": (check_select, run_select),
    "reproduce": (check_reproduce, run_reproduce),
}

# arguments naming files or directories written by a command
OUTPUT_ARGS = ("out", "out_dir", "pairs_csv")


def build_parser():
    p = argparse.ArgumentParser(prog="qatbnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qatbnn {__version__}")
    p.add_argument("--verify", metavar="MANIFEST",
                   help="replay a recorded run and check input/output digests")
    sub = p.add_subparsers(dest="command")

    def cmd(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    g = cmd("gen-data", "generate the synthetic fault dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--train-per-class", type=int, default=30)
    g.add_argument("--val-per-class", type=int, default=10)
    g.add_argument("--test-per-class", type=int, default=10)
    g.add_argument("--unseen-per-class", type=int, default=10)
    g.add_argument("--length", type=int, default=256)

    t = cmd("train", "variational pre-training at full precision")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)

    for name, text in (("qat", "quantization-aware fine-tuning"),
                       ("ptq", "direct post-training quantization")):
        q = cmd(name, text)
        q.add_argument("--in", dest="input", required=True)
        q.add_argument("--bits", type=int, required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--data")
        if name == "qat":
            q.add_argument("--epochs", type=int)
            q.add_argument("--lr", type=float)

    e = cmd("eval", "accuracy, calibration and uncertainty report")
    e.add_argument("--in", "--model", dest="input", required=True)
    e.add_argument("--data")
    e.add_argument("--out", required=True)
    e.add_argument("--mc-samples", "--mc", type=int, default=64)
    e.add_argument("--pairs-csv", help="also write (confidence, correct) pairs")
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--noise-snr", type=float)

    f = cmd("fidelity", "largest predictive gap between two checkpoints")
    f.add_argument("--ref", required=True)
    f.add_argument("--quant", required=True)
    f.add_argument("--data")
    f.add_argument("--out", required=True)
    f.add_argument("--mc-samples", type=int, default=32)

    s = cmd("sweep", "fine-tune and evaluate at several bit widths")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--data")
    s.add_argument("--bits", default="2,4,8,16,32")
    s.add_argument("--out", required=True)
    s.add_argument("--mc-samples", type=int, default=64)

    c = cmd("select", "cheapest bit width meeting accuracy and calibration limits")
    c.add_argument("--sweep", required=True)
    c.add_argument("--a-min", type=float, required=True)
    c.add_argument("--u-max", type=float, required=True)
    c.add_argument("--out")

    r = cmd("reproduce", "emit figure data bundles with pinned defaults")
    r.add_argument("--experiment", required=True)
    r.add_argument("--out-dir", default="results")
    return p


def _manifest_path(args):
    """Directory outputs hold ``run_manifest.json``; file outputs get a sibling."""
    if args.command == "reproduce":
        return Path(args.out_dir) / "run_manifest.json"
    if args.command == "gen-data":
        return Path(args.out) / "run_manifest.json"
    if getattr(args, "out", None):
        return Path(str(args.out) + ".manifest.json")
    return Path(str(args.sweep) + ".select.manifest.json")


def _resolved_config(args):
    cfg = {k: v for k, v in vars(args).items() if k != "verify"}
    if cfg.get("data") is None and "data" in cfg and os.environ.get(DATA_ENV):
        cfg["data"] = os.environ[DATA_ENV]
    return cfg


def _entries(paths, root=None):
    out = []
    for p in paths:
        p = Path(p)
        name = str(p.relative_to(root)) if root is not None else str(p)
        out.append({"path": name, "sha256": sha256_file(p)})
    return out


def execute(args, write_manifest=True):
    check, run = COMMANDS[args.command]
    inputs = check(args)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    outputs = [Path(o) for o in run(args)]
    manifest = {
        "format": MANIFEST_FORMAT,
        "tool": "qatbnn",
        "version": __version__,
        "command": args.command,
        "config": _resolved_config(args),
        "inputs": _entries(inputs),
        "outputs": _entries(outputs),
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "elapsed_s": round(time.perf_counter() - t0, 3),
    }
    if write_manifest:
        path = _manifest_path(args)
        atomic_write(path, _dump(manifest))
    return manifest


def verify(manifest_path):
    """Check recorded input digests, rerun in a scratch directory, compare outputs."""
    m = json.loads(Path(manifest_path).read_text())
    if m.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"not a run manifest: {manifest_path}")
    bad = [e["path"] for e in m["inputs"]
           if not Path(e["path"]).is_file() or sha256_file(e["path"]) != e["sha256"]]
    if bad:
        raise IntegrityError(f"inputs changed since the recorded run: {bad}")
    cfg = dict(m["config"])
    with tempfile.TemporaryDirectory() as tmp:
        mapping = {}
        for key in OUTPUT_ARGS:
            if cfg.get(key):
                orig = Path(cfg[key])
                cfg[key] = str(Path(tmp) / orig.name)
                mapping[str(orig)] = cfg[key]
        replay = execute(argparse.Namespace(verify=None, **cfg), write_manifest=False)

        def rel(path, roots):
            for orig, new in roots.items():
                if path == new or path.startswith(new + os.sep):
                    return orig + path[len(new):]
            return path

        got = {rel(e["path"], mapping): e["sha256"] for e in replay["outputs"]}
    want = {e["path"]: e["sha256"] for e in m["outputs"]}
    mismatched = sorted(k for k in want if got.get(k) != want[k])
    if mismatched:
        raise IntegrityError(f"replay outputs differ: {mismatched}")
    return len(want)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.verify:
            n = verify(args.verify)
            print(f"verified {n} output(s)")
            return EXIT_OK
        if not args.command:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        execute(args)
        return EXIT_OK
    except QatBnnError as exc:
        print(f"qatbnn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"qatbnn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, ValueError) as exc:
        print(f"qatbnn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"qatbnn: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
