"""Command-line interface: ``afxmodel <command> [--config FILE] [--set key=value ...] [flags]``.

Settings are merged in this order: command defaults, the YAML config,
``--set`` overrides (dotted keys, YAML-parsed values) and explicit flags.
Every command that writes to an output directory also writes
``resolved_config.yaml`` there (``resolved_config.<command>.yaml`` when
another command's snapshot already occupies that name).
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import autodiff as ad
from . import data as D
from . import losses as L
from . import models as M
from . import streaming as S
from . import training as T
from .controllers import ConditioningError

log = logging.getLogger("afxmodel")

EVAL_COLUMNS = ("file", "device_type", "model", "l1", "mse", "esr", "mape", "mr_stft", "scaled_total")
REPORT_COLUMNS = ("run", "architecture", "effect_type", "metric", "value")
COMPLEXITY_COLUMNS = ("model", "params", "receptive_field", "macs_per_sample", "mac_per_s", "flop_per_s")
SCHEMA_VERSION = 1
METRICS = ("l1", "mse", "esr", "mape", "mr_stft", "scaled_total")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS = {
    "train": {
        "seed": 0, "out_dir": "runs/train", "model": None, "n_controls": M.DEFAULT_CONTROLS,
        "dtype": "float32", "sweep": False, "workers": 1,
        "data": {"root": None, "seed": 0, "align": True, "val_fraction": 0.1, "segment_length": D.SEGMENT},
        "scheme": {},
    },
    "eval": {"seed": 0, "out": "eval.csv", "checkpoint": None, "data": {"root": None, "split": "test",
                                                                         "align": True}},
    "render": {"seed": 0, "checkpoint": None, "input": None, "output": None, "controls": {}, "bits": 24,
               "normalize": False},
    "bench": {"seed": 0, "out_dir": "runs/bench", "models": [], "frame_sizes": list(S.BENCH_FRAME_SIZES),
              "repeats": S.MIN_REPEATS, "n_controls": M.DEFAULT_CONTROLS, "plot": True},
    "verify": {"root": None, "out_dir": None, "threshold": 10.0},
    "report": {"runs": [], "out_dir": "runs/report", "plot": True},
    "complexity": {"models": [], "n_controls": M.DEFAULT_CONTROLS, "out": None},
    "synth": {"root": None, "seed": 0, "pairs": 2, "test_pairs": 1, "duration": 30.0, "device_name":
              "synthetic-dist", "delay": 0, "bits": 24},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_dotted(cfg: dict, key: str, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = value


def resolve_config(command: str, args) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, loaded)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_dotted(cfg, k.strip(), yaml.safe_load(v))
    for key, dest in FLAG_MAP.get(command, {}).items():
        val = getattr(args, dest, None)
        if val is not None and val != []:
            _set_dotted(cfg, key, val)
    return cfg


def write_snapshot(cfg: dict, out_dir, command: str):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, "version": __version__, **cfg}
    path = out / "resolved_config.yaml"
    if path.exists() and (yaml.safe_load(path.read_text()) or {}).get("command", command) != command:
        # keep e.g. the training snapshot when eval writes into the same run directory
        path = out / f"resolved_config.{command}.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(_plain(snap), fh, sort_keys=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def knobs_to_controls(knobs: dict, names=None) -> np.ndarray | None:
    """0..10 dial values -> [0, 1] controls, in sorted knob-name order unless ``names`` is given."""
    if not knobs:
        return None
    names = names or sorted(knobs)
    values = []
    for n in names:
        v = float(knobs[n])
        if not 0.0 <= v <= 10.0:
            raise ConfigError(f"control {n}={v} is outside the 0..10 knob range")
        values.append(v / 10.0)
    return np.array(values)


def model_spec(entry, n_controls: int) -> M.ModelSpec:
    if isinstance(entry, M.ModelSpec):
        return entry
    if isinstance(entry, str):
        return M.spec_from_name(entry, n_controls)
    if isinstance(entry, dict):
        if "family" in entry:
            return M.ModelSpec.from_dict(entry)
        if "name" in entry:
            return M.spec_from_name(entry["name"], int(entry.get("n_controls", n_controls)))
    raise ConfigError(f"cannot interpret model entry {entry!r}")


def _dtype(name) -> np.dtype:
    if name not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {name!r}")
    return np.dtype(name)


def _write_csv(path, columns, rows, comment: str | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("".join(lines))))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _validate_train(cfg) -> list[str]:
    errors = []
    if not cfg.get("model"):
        errors.append("model: missing")
    else:
        try:
            model_spec(cfg["model"], cfg["n_controls"])
        except (ValueError, ConfigError) as exc:
            errors.append(f"model: {exc}")
    root = cfg["data"].get("root")
    if not root:
        errors.append("data.root: missing")
    elif not Path(root).exists():
        errors.append(f"data.root: {root} does not exist")
    try:
        _dtype(cfg["dtype"])
    except ConfigError as exc:
        errors.append(str(exc))
    known = set(T.TrainScheme.__dataclass_fields__) - {"family"}
    for k in cfg["scheme"]:
        if k not in known:
            errors.append(f"scheme.{k}: unknown field")
    return errors


def _scheme(cfg, family) -> T.TrainScheme:
    over = dict(cfg["scheme"])
    if "loss_weights" in over and isinstance(over["loss_weights"], (list, tuple)):
        over["loss_weights"] = L.LossWeights(*over["loss_weights"])
    return T.TrainScheme.for_family(family, **over)


def cmd_train(cfg) -> int:
    errors = _validate_train(cfg)
    if not errors:
        try:
            spec = model_spec(cfg["model"], cfg["n_controls"])
            scheme = _scheme(cfg, spec.family)
        except (ValueError, TypeError) as exc:
            errors.append(f"scheme: {exc}")
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    out = Path(cfg["out_dir"])
    cfg["model"] = spec.to_dict()
    cfg["scheme"] = scheme.to_dict()
    write_snapshot(cfg, out, "train")
    d = cfg["data"]
    data = D.load_dataset(d["root"], seed=d["seed"], length=d["segment_length"], align=d["align"],
                          val_fraction=d["val_fraction"])
    dtype = _dtype(cfg["dtype"])
    if cfg["sweep"]:
        result = T.lr_sweep(spec, data, scheme.lr_list, cfg["seed"], scheme, out, cfg["workers"], dtype)
        print(result.to_csv(), end="")
        print(f"best lr: {result.best_lr}")
        best_dir = next(r["run_dir"] for r in result.rows if r["lr"] == result.best_lr)
        if best_dir and (Path(best_dir) / "best.npz").exists():
            (out / "best.npz").write_bytes((Path(best_dir) / "best.npz").read_bytes())
        return 0
    model = M.build_model(spec, cfg["seed"], dtype)
    report = T.train(model, data, scheme, cfg["seed"], out_dir=out,
                     callback=lambda r: log.info("epoch %d val_scaled %.5g lr %g", r["epoch"], r["val_scaled"],
                                                 r["lr"]))
    T.save_checkpoint(model, out / "final.npz", {"stop_reason": report.stop_reason})
    if cfg.get("plot", True):
        from .plotting import plot_training
        plot_training(report.epochs, out / "training.png")
    print(report.summary())
    return 0 if not report.failed else 1


def _eval_pairs(cfg):
    d = cfg["data"]
    root = d.get("root")
    if not root or not Path(root).exists():
        raise ConfigError(f"data.root: {root} does not exist")
    split = d.get("split", "test")
    for _, dry_p, wet_p in D.iter_pairs(root):
        pair = D.load_pair(dry_p, wet_p)
        if split != "all" and pair.split != split:
            continue
        if d.get("align", True):
            pair = D.align_by_impulses(pair)
        yield pair


def evaluate_model(model, pairs, name: str = "") -> list[dict]:
    rows = []
    for pair in pairs:
        cond = pair.controls() if getattr(model, "n_controls", 0) else None
        with ad.no_grad():
            y = model(pair.dry[None, :].astype(model.dtype), cond).data[0]
        m = L.evaluate_metrics(y, pair.wet)
        rows.append({"file": pair.name, "device_type": pair.metadata.get("device_type", ""), "model": name, **m})
    return rows


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Mean and (population) standard deviation per metric."""
    if not rows:
        return []
    mean = {"file": "__mean__", "model": rows[0]["model"]}
    std = {"file": "__std__", "model": rows[0]["model"]}
    for k in METRICS:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        mean[k] = float(np.mean(vals))
        std[k] = float(np.std(vals))
    return [mean, std]


def cmd_eval(cfg) -> int:
    if not cfg.get("checkpoint") or not Path(cfg["checkpoint"]).exists():
        print(f"config error: checkpoint {cfg.get('checkpoint')} not found", file=sys.stderr)
        return 2
    model = T.load_model(cfg["checkpoint"])
    try:
        rows = evaluate_model(model, list(_eval_pairs(cfg)), getattr(model.spec, "name", ""))
    except D.FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if not rows:
        print("no pairs to evaluate", file=sys.stderr)
        return 2
    out = Path(cfg["out"])
    all_rows = rows + aggregate_rows(rows)
    _write_csv(out, EVAL_COLUMNS, [{k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()}
                                   for r in all_rows], f"schema: eval v{SCHEMA_VERSION}")
    write_snapshot(cfg, out.parent, "eval")
    agg = all_rows[-2]
    print(f"{len(rows)} files; scaled_total mean {agg['scaled_total']:.6g} std {all_rows[-1]['scaled_total']:.6g}")
    return 0


def cmd_render(cfg) -> int:
    for key in ("checkpoint", "input", "output"):
        if not cfg.get(key):
            print(f"config error: {key} missing", file=sys.stderr)
            return 2
    model = T.load_model(cfg["checkpoint"])
    try:
        x = D.read_wav(cfg["input"])
    except D.FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3
    cond = knobs_to_controls(cfg.get("controls") or {})
    try:
        with ad.no_grad():
            y = model(x[None, :].astype(model.dtype), cond).data[0].astype(np.float64)
    except ConditioningError as exc:
        print(f"conditioning error: {exc}", file=sys.stderr)
        return 4
    if cfg.get("normalize"):
        peak = np.abs(y).max()
        if peak > 0:
            y = y / peak
    D.write_wav(cfg["output"], y, bits=int(cfg["bits"]))
    write_snapshot(cfg, Path(cfg["output"]).parent, "render")
    print(f"wrote {cfg['output']} ({y.size} samples, {cfg['bits']}-bit)")
    return 0


def _bench_models(cfg) -> dict:
    out = {}
    for entry in cfg["models"]:
        if isinstance(entry, str) and entry.endswith(".npz"):
            m = T.load_model(entry)
            out[Path(entry).stem] = m
        else:
            spec = model_spec(entry, cfg["n_controls"])
            out[spec.name or spec.family] = M.build_model(spec, cfg["seed"])
    return out


def cmd_bench(cfg) -> int:
    if not cfg["models"]:
        print("config error: models: at least one model required", file=sys.stderr)
        return 2
    models = _bench_models(cfg)
    conds = {k: (np.full(m.n_controls, 0.5) if getattr(m, "n_controls", 0) else None) for k, m in models.items()}
    records = S.rtf_sweep(models, [int(f) for f in cfg["frame_sizes"]], int(cfg["repeats"]), conds=conds)
    out = Path(cfg["out_dir"])
    write_snapshot(cfg, out, "bench")
    (out / "rtf.csv").write_text(S.rtf_csv(records))
    if cfg.get("plot", True):
        from .plotting import plot_rtf
        plot_rtf(records, out / "rtf.png")
    print(S.rtf_csv(records), end="")
    return 0


def cmd_verify(cfg) -> int:
    root = cfg.get("root")
    if not root or not Path(root).exists():
        print(f"config error: root {root} does not exist", file=sys.stderr)
        return 2
    report = D.verify_dataset(root, float(cfg["threshold"]))
    if cfg.get("out_dir"):
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.csv").write_text(report.to_csv())
        (out / "verify.txt").write_text(report.summary() + "\n")
        write_snapshot(cfg, out, "verify")
    print(report.summary())
    return 0 if report.ok else 1


def _run_rows(run_dir: Path) -> list[dict]:
    snap = {}
    if (run_dir / "resolved_config.yaml").exists():
        snap = yaml.safe_load((run_dir / "resolved_config.yaml").read_text()) or {}
    model = snap.get("model")
    arch = model.get("name") if isinstance(model, dict) else (model or "")
    effect = snap.get("effect_type", "")
    rows = []
    if (run_dir / "eval.csv").exists():
        for r in read_csv(run_dir / "eval.csv"):
            if r["file"] == "__mean__":
                arch = arch or r["model"]
                rows += [{"metric": k, "value": float(r[k])} for k in METRICS]
            elif not effect:
                effect = r.get("device_type", "")
    elif (run_dir / "train_report.csv").exists():
        epochs = read_csv(run_dir / "train_report.csv")
        best = min(epochs, key=lambda e: float(e["val_total"]))
        rows += [{"metric": f"val_{k}", "value": float(best[f"val_{k}"])} for k in ("total", "l1", "mr_stft",
                                                                                     "scaled")]
    for r in rows:
        r.update(run=run_dir.name, architecture=arch, effect_type=effect)
    return rows


def cmd_report(cfg) -> int:
    runs = [Path(r) for r in cfg["runs"]]
    missing = [str(r) for r in runs if not r.is_dir()]
    if not runs or missing:
        print(f"config error: runs missing or not directories: {missing or 'none given'}", file=sys.stderr)
        return 2
    rows = [row for r in runs for row in _run_rows(r)]
    if not rows:
        print("no eval.csv or train_report.csv found in the given runs", file=sys.stderr)
        return 1
    out = Path(cfg["out_dir"])
    _write_csv(out / "report.csv", REPORT_COLUMNS, [{**r, "value": repr(r["value"])} for r in rows],
               f"schema: report v{SCHEMA_VERSION}")
    write_snapshot(cfg, out, "report")
    if cfg.get("plot", True):
        from .plotting import plot_metric_boxes
        plot_metric_boxes(rows, out / "report.png")
    print(f"{len(rows)} rows from {len(runs)} runs -> {out / 'report.csv'}")
    return 0


def complexity_rows(names, n_controls=M.DEFAULT_CONTROLS) -> list[dict]:
    rows = []
    for name in names:
        spec = model_spec(name, n_controls)
        model = M.build_model(spec, 0)
        c = M.complexity(model)
        rows.append({"model": spec.name or name, "params": c["params"],
                     "receptive_field": spec.receptive_field or "", **{k: c[k] for k in
                                                                       ("macs_per_sample", "mac_per_s",
                                                                        "flop_per_s")}})
    return rows


def _human(v: float) -> str:
    for unit, scale in (("G", 1e9), ("M", 1e6), ("k", 1e3)):
        if abs(v) >= scale:
            return f"{v / scale:.1f}{unit}"
    return f"{v:.0f}"


def cmd_complexity(cfg) -> int:
    if not cfg["models"]:
        print("config error: models: at least one model required", file=sys.stderr)
        return 2
    try:
        rows = complexity_rows(cfg["models"], cfg["n_controls"])
    except (ValueError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"{'model':<18}{'params':>10}{'MAC/s':>10}{'FLOP/s':>10}")
    for r in rows:
        print(f"{r['model']:<18}{r['params']:>10}{_human(r['mac_per_s']):>10}{_human(r['flop_per_s']):>10}")
    if cfg.get("out"):
        _write_csv(cfg["out"], COMPLEXITY_COLUMNS, rows, f"schema: complexity v{SCHEMA_VERSION}")
    return 0


def cmd_synth(cfg) -> int:
    if not cfg.get("root"):
        print("config error: root missing", file=sys.stderr)
        return 2
    path = D.make_synthetic_dataset(cfg["root"], n_pairs=int(cfg["pairs"]), duration_s=float(cfg["duration"]),
                                    seed=int(cfg["seed"]), device_name=cfg["device_name"],
                                    test_pairs=int(cfg["test_pairs"]), delay=int(cfg["delay"]),
                                    bits=int(cfg["bits"]))
    print(f"wrote synthetic dataset to {path}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "render": cmd_render, "bench": cmd_bench,
            "verify": cmd_verify, "report": cmd_report, "complexity": cmd_complexity, "synth": cmd_synth}

# config key -> argparse dest, per command
FLAG_MAP = {
    "train": {"model": "model", "data.root": "data", "out_dir": "out_dir", "seed": "seed", "sweep": "sweep",
              "workers": "workers", "scheme.lr_list": "lr", "scheme.max_epochs": "max_epochs",
              "scheme.max_steps": "max_steps", "scheme.batch_size": "batch_size", "dtype": "dtype",
              "plot": "plot"},
    "eval": {"checkpoint": "checkpoint", "data.root": "data", "data.split": "split", "out": "out"},
    "render": {"checkpoint": "checkpoint", "input": "input", "output": "output", "bits": "bits",
               "normalize": "normalize", "controls": "controls"},
    "bench": {"models": "models", "frame_sizes": "frame_sizes", "repeats": "repeats", "out_dir": "out_dir",
              "plot": "plot"},
    "verify": {"root": "root", "out_dir": "out_dir", "threshold": "threshold"},
    "report": {"runs": "runs", "out_dir": "out_dir", "plot": "plot"},
    "complexity": {"models": "models", "out": "out"},
    "synth": {"root": "root", "seed": "seed", "pairs": "pairs", "test_pairs": "test_pairs",
              "duration": "duration", "delay": "delay", "bits": "bits"},
}


def _knob(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError("controls are name=value with value on the 0..10 knob scale")
    k, v = text.split("=", 1)
    return k, float(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afxmodel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")

    def plot_flag(sp):
        sp.add_argument("--no-plot", dest="plot", action="store_false", default=None,
                        help="skip the PNG figure")

    sp = sub.add_parser("train", help="train a model or run an LR sweep")
    common(sp)
    sp.add_argument("--model", help="configuration name, e.g. TCN-45-S-16 or GB-DIST-RNL")
    sp.add_argument("--data", help="dataset root")
    sp.add_argument("--out-dir")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr", type=float, nargs="+", help="learning rate(s)")
    sp.add_argument("--sweep", action="store_true", default=None, help="one run per LR")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--dtype", choices=("float32", "float64"))
    plot_flag(sp)

    sp = sub.add_parser("eval", help="objective metrics per file plus mean/std")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--split", choices=("train", "test", "all"))
    sp.add_argument("--out", help="CSV path")

    sp = sub.add_parser("render", help="process a dry file through a trained model")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--input")
    sp.add_argument("--output")
    sp.add_argument("--bits", type=int, choices=(16, 24, 32))
    sp.add_argument("--normalize", action="store_true", default=None, help="peak-normalise the output")
    sp.add_argument("--control", dest="controls_list", action="append", type=_knob, metavar="NAME=KNOB")

    sp = sub.add_parser("bench", help="real-time factor over frame sizes")
    common(sp)
    sp.add_argument("--models", nargs="+", help="configuration names or checkpoint paths")
    sp.add_argument("--frame-sizes", type=int, nargs="+")
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--out-dir")
    plot_flag(sp)

    sp = sub.add_parser("verify", help="check a dataset tree")
    common(sp)
    sp.add_argument("root", nargs="?")
    sp.add_argument("--out-dir")
    sp.add_argument("--threshold", type=float, help="impulse peak / local RMS ratio")

    sp = sub.add_parser("report", help="long-format CSV over run directories")
    common(sp)
    sp.add_argument("runs", nargs="*")
    sp.add_argument("--out-dir")
    plot_flag(sp)

    sp = sub.add_parser("complexity", help="parameter count and MAC/s estimate")
    common(sp)
    sp.add_argument("models", nargs="*")
    sp.add_argument("--out", help="CSV path")

    sp = sub.add_parser("synth", help="write a synthetic dataset rendered through a known device")
    common(sp)
    sp.add_argument("root", nargs="?")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--test-pairs", type=int)
    sp.add_argument("--duration", type=float, help="seconds per pair")
    sp.add_argument("--delay", type=int, help="shift the wet files by this many samples")
    sp.add_argument("--bits", type=int, choices=(16, 24, 32))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "controls_list", None):
        args.controls = dict(args.controls_list)
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, D.DataError, T.DataError, T.SweepError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except T.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
