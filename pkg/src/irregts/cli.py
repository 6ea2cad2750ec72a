"""Command-line entry point: ``irregts <command> [options]``.

Every option is resolved in the order flag > config file > environment
(``IRREGTS_<OPTION>``) > built-in default. Config files are TOML or JSON;
keys are option names (dashes or underscores), either at top level or in
a table named after the command.

Exit codes: 0 success, 1 invalid configuration or input, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import data as D
from ._files import atomic_write_text
from .errors import ConfigError, IrregTSError
from .evaluation import (
    DEFAULT_GRIDS,
    SWEEP_KINDS,
    ConfusionMatrix,
    metrics_json,
    read_summary_csv,
    run_eval,
    sweep,
    truncate_dataset,
    write_report,
)
from .model import PRESETS, ModelConfig, load_checkpoint, preset, save_checkpoint
from .node import SolveConfig
from .plotting import confusion_heatmap, sweep_chart, write_svg
from .train import TrainConfig, fit

log = logging.getLogger("irregts")

ENV_PREFIX = "IRREGTS_"


# -- value converters (accept strings from flags/env or typed config values) --

def _int(v):
    if isinstance(v, bool):
        raise ValueError(f"expected an integer, got {v!r}")
    if isinstance(v, float) and not v.is_integer():
        raise ValueError(f"expected an integer, got {v!r}")
    return int(v)


def _float(v):
    if isinstance(v, bool):
        raise ValueError(f"expected a number, got {v!r}")
    return float(v)


def _str(v):
    return str(v)


def _onoff(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("on", "true", "yes", "1"):
        return True
    if s in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {v!r}")


def _floats(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return [float(x) for x in str(v).split(",") if x.strip()]


def _names(v):
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    return [x.strip() for x in str(v).split(",") if x.strip()]


def _seeds(v):
    """``3`` means seeds 0,1,2; a list or ``"4,9"`` gives the seeds themselves."""
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    s = str(v)
    if "," in s:
        return [int(x) for x in s.split(",") if x.strip()]
    n = int(s)
    if n < 1:
        raise ValueError("need at least one seed")
    return list(range(n))


@dataclass(frozen=True)
class Opt:
    dest: str
    conv: Callable[[Any], Any]
    default: Any
    help: str
    choices: Optional[Sequence[str]] = None
    required: bool = False
    metavar: Optional[str] = None

    @property
    def flag(self):
        return "--" + self.dest.replace("_", "-")


MODEL_OPTS = [
    Opt("preset", _str, None, "named model (sets cell, ode, time features, hidden)", sorted(PRESETS)),
    Opt("cell", _str, "gru", "recurrent cell", ("tanh", "lstm", "gru")),
    Opt("ode", _onoff, True, "learned dynamics between observations (on/off)", metavar="on|off"),
    Opt("time_features", _str, "none", "extra time input for baselines", ("none", "delta_t", "pe")),
    Opt("hidden", _int, 80, "hidden state size H"),
    Opt("units", _int, 255, "units in the dynamics network U"),
    Opt("tau", _float, 1000.0, "positional-encoding scale"),
    Opt("gating_depth", _int, 1, "layers per gate (1 or 2)"),
    Opt("steps_multiplier", _int, 1, "Euler steps per unit time"),
    Opt("gradient_mode", _str, "discrete", "gradient through the solver", ("discrete", "adjoint")),
    Opt("extrapolation", _str, "hold", "baseline behaviour after the last observation", ("hold", "mean")),
    Opt("init_sigma", _float, 1e-4, "std of the initial hidden state"),
]

TRAIN_OPTS = [
    Opt("lr", _float, 0.07, "initial learning rate"),
    Opt("decay", _float, 0.9995, "learning-rate factor per batch"),
    Opt("batch_size", _int, None, "series per batch (default: 500 with dynamics, 300 without)"),
    Opt("epochs", _int, 12, "passes over the training set"),
    Opt("max_batches", _int, None, "stop after this many batches"),
    Opt("p", _float, 0.75, "keep probability of the subsampling regularizer"),
]

SPLIT_OPTS = [
    Opt("split_seed", _int, 0, "seed of the train/val/test split"),
]

COMMANDS: Dict[str, Tuple[str, List[Opt]]] = {
    "generate": ("write a synthetic dataset as JSONL", [
        Opt("classes", _int, 4, "number of classes K"),
        Opt("features", _int, 6, "feature dimension d"),
        Opt("length", _int, 40, "nominal series length T"),
        Opt("missing", _float, 0.5, "probability that a time step is missing"),
        Opt("noise", _float, D.SynthSpec.noise_std, "observation noise std"),
        Opt("n", _int, 2500, "number of series"),
        Opt("seed", _int, 0, "random seed"),
        Opt("out", _str, None, "output JSONL path", required=True),
    ]),
    "train": ("train a classifier and write a checkpoint", [
        Opt("data", _str, None, "JSONL dataset", required=True),
        *SPLIT_OPTS, *MODEL_OPTS, *TRAIN_OPTS,
        Opt("seed", _int, 0, "random seed for weights, shuffling and regularizer"),
        Opt("out", _str, None, "checkpoint path", required=True),
        Opt("history", _str, None, "history path prefix (default: <out> without suffix + .history)"),
    ]),
    "eval": ("evaluate a checkpoint on one split", [
        Opt("model", _str, None, "checkpoint path", required=True),
        Opt("data", _str, None, "JSONL dataset", required=True),
        Opt("split", _str, "test", "which part of the dataset", ("train", "val", "test", "all")),
        *SPLIT_OPTS,
        Opt("truncate", _float, 1.0, "keep only this leading fraction of each series"),
        Opt("out", _str, "metrics", "output prefix for .json, .csv, _confusion.csv, _confusion.svg"),
    ]),
    "sweep": ("run one experiment sweep", [
        Opt("kind", _str, None, "experiment", SWEEP_KINDS, required=True),
        Opt("grid", _floats, None, "comma-separated conditions (default: the kind's standard grid)"),
        Opt("models", _names, ["ode-gru", "gru-dt"], "comma-separated model names; differences are first minus others"),
        Opt("seeds", _seeds, [0, 1, 2], "number of seeds, or a comma-separated seed list"),
        Opt("data", _str, None, "JSONL dataset (default: the synthetic benchmark)"),
        *SPLIT_OPTS,
        Opt("bench_seed", _int, 0, "seed of the synthetic benchmark"),
        *TRAIN_OPTS,
        Opt("jobs", _int, 1, "worker processes"),
        Opt("out", _str, None, "output prefix (default: sweep_<kind>)"),
    ]),
    "plot": ("render a summary or confusion CSV as SVG", [
        Opt("input", _str, None, "summary CSV from sweep or confusion CSV from eval", required=True),
        Opt("metric", _str, "accuracy", "metric to chart for summary CSVs"),
        Opt("differences", _onoff, False, "include difference rows (on/off)", metavar="on|off"),
        Opt("title", _str, None, "figure title"),
        Opt("out", _str, None, "output SVG path", required=True),
    ]),
    "gradcheck": ("compare analytic and finite-difference gradients", [
        Opt("tol", _float, 1e-4, "maximum relative error"),
        Opt("seed", _int, 0, "random seed"),
        Opt("out", _str, None, "optional JSON report path"),
    ]),
}


def _fmt_default(v):
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irregts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (desc, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", default=None, help="TOML or JSON config file (default: none)")
        for o in opts:
            extra = " (required)" if o.required else f" (default: {_fmt_default(o.default)})"
            p.add_argument(o.flag, dest=o.dest, default=None, help=o.help + extra,
                           choices=o.choices, metavar=o.metavar)
    return parser


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    if path.suffix.lower() == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML: {e}") from None


def _config_section(cfg: dict, command: str, opts: List[Opt]) -> dict:
    known = {o.dest for o in opts}
    out = {}
    flat = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    nested = cfg.get(command, {})
    if not isinstance(nested, dict):
        raise ConfigError(f"config entry {command!r} must be a table")
    others = {k for k, v in cfg.items() if isinstance(v, dict)} - {command} - set(COMMANDS)
    if others:
        raise ConfigError(f"unknown config tables: {sorted(others)}")
    for source in (flat, nested):
        for k, v in source.items():
            key = k.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {k!r} for command {command!r}")
            out[key] = v
    return out


def resolve(command: str, ns: argparse.Namespace, environ=None) -> Tuple[dict, set]:
    """Merge flags, config file, environment and defaults.

    Returns the resolved values and the set of options that were given
    explicitly (by any source other than the default).
    """
    environ = os.environ if environ is None else environ
    opts = COMMANDS[command][1]
    cfg_path = ns.config or environ.get(ENV_PREFIX + "CONFIG")
    cfg = _config_section(load_config_file(cfg_path), command, opts) if cfg_path else {}
    values, explicit = {}, set()
    for o in opts:
        raw, source = getattr(ns, o.dest), "flag"
        if raw is None and o.dest in cfg:
            raw, source = cfg[o.dest], "config"
        if raw is None:
            env = environ.get(ENV_PREFIX + o.dest.upper())
            if env is not None:
                raw, source = env, "environment"
        if raw is None:
            if o.required:
                raise ConfigError(f"{o.flag} is required")
            values[o.dest] = o.default
            continue
        try:
            val = o.conv(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{o.flag} from {source}: {e}") from None
        if o.choices is not None and val not in o.choices:
            raise ConfigError(f"{o.flag} from {source}: {val!r} is not one of {list(o.choices)}")
        values[o.dest] = val
        explicit.add(o.dest)
    return values, explicit


# -- commands ---------------------------------------------------------------

def _model_config(v: dict, explicit: set, ds: D.Dataset) -> ModelConfig:
    fields = dict(
        cell=v["cell"], ode_enabled=v["ode"], time_features=v["time_features"], hidden_dim=v["hidden"],
    )
    if v["preset"] is not None:
        base = PRESETS[v["preset"]]
        names = {"cell": "cell", "ode": "ode_enabled", "time_features": "time_features", "hidden": "hidden_dim"}
        fields = {names[k]: (v[k] if k in explicit else base[names[k]]) for k in names}
    return ModelConfig(
        **fields, f_theta_units=v["units"], pe_tau=v["tau"], gating_depth=v["gating_depth"],
        solve=SolveConfig(v["steps_multiplier"], v["gradient_mode"]), extrapolation=v["extrapolation"],
        init_sigma=v["init_sigma"], num_classes=ds.num_classes, feature_dim=ds.feature_dim, seed=v["seed"],
    ).validate()


def _train_config(v: dict, seed: int) -> TrainConfig:
    return TrainConfig(lr0=v["lr"], decay=v["decay"], batch_size=v["batch_size"], epochs=v["epochs"],
                       max_batches=v["max_batches"], keep_prob=v["p"], seed=seed).validate()


def cmd_generate(v, explicit):
    spec = D.SynthSpec(num_classes=v["classes"], feature_dim=v["features"], length=v["length"],
                       missing_rate=v["missing"], noise_std=v["noise"], n_series=v["n"], seed=v["seed"])
    ds = D.generate(spec)
    D.save_jsonl(ds, v["out"])
    print(f"wrote {len(ds)} series to {v['out']}")


def cmd_train(v, explicit):
    ds = D.load_jsonl(v["data"])
    train, val, _ = D.split(ds, seed=v["split_seed"])
    mcfg = _model_config(v, explicit, ds)
    tcfg = _train_config(v, v["seed"])
    enc, hist = fit(train, val, mcfg, tcfg, progress=True)
    save_checkpoint(enc, v["out"])
    prefix = v["history"] or str(Path(v["out"]).with_suffix("")) + ".history"
    hist.write(prefix + ".csv", prefix + ".json")
    best = hist.epochs[hist.best_epoch]
    print(f"wrote {v['out']}; best epoch {hist.best_epoch} val accuracy {best['val_accuracy']:.4f} "
          f"macro-F1 {best['val_macro_f1']:.4f}")


def _metrics_csv(m: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k in ("accuracy", "macro_f1", "n"):
        w.writerow([k, repr(m[k])])
    return buf.getvalue()


def cmd_eval(v, explicit):
    enc = load_checkpoint(v["model"])
    ds = D.load_jsonl(v["data"])
    parts = dict(zip(("train", "val", "test"), D.split(ds, seed=v["split_seed"])))
    part = ds if v["split"] == "all" else parts[v["split"]]
    if len(part) == 0:
        raise ConfigError(f"split {v['split']!r} is empty")
    if v["truncate"] != 1.0:
        part = truncate_dataset(part, v["truncate"], ds.nominal_length)
    m = run_eval(enc, part)
    out = v["out"]
    atomic_write_text(out + ".json", metrics_json(m))
    atomic_write_text(out + ".csv", _metrics_csv(m))
    atomic_write_text(out + "_confusion.csv", m["cm"].to_csv())
    write_svg(out + "_confusion.svg", confusion_heatmap(m["cm"].counts, title=f"{v['split']} split"))
    print(f"accuracy {m['accuracy']:.4f} macro-F1 {m['macro_f1']:.4f} on {m['n']} series; wrote {out}.json")


def cmd_sweep(v, explicit):
    kind = v["kind"]
    if v["data"]:
        ds = D.load_jsonl(v["data"])
        data = D.split(ds, seed=v["split_seed"])
    else:
        data = D.benchmark(seed=v["bench_seed"])
    train = data[0]
    models = []
    for name in v["models"]:
        if name not in PRESETS:
            raise ConfigError(f"unknown model {name!r}; choose from {sorted(PRESETS)}")
        models.append((name, preset(name, train.feature_dim, train.num_classes)))
    grid = v["grid"] if v["grid"] is not None else list(DEFAULT_GRIDS[kind])
    tcfg = _train_config(v, 0)
    report = sweep(kind, models, grid, v["seeds"], data, tcfg, jobs=v["jobs"])
    prefix = v["out"] or f"sweep_{kind}"
    paths = write_report(report, prefix)
    rows = read_summary_csv(paths["summary"])
    for metric in ("accuracy", "macro_f1"):
        write_svg(f"{prefix}_{metric}.svg", sweep_chart(rows, metric, title=f"{kind} sweep"))
    print(f"wrote {paths['runs']}, {paths['summary']}, {paths['json']} and SVG charts")


def cmd_plot(v, explicit):
    try:
        text = Path(v["input"]).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read {v['input']}: {e.strerror}") from None
    header = text.split("\n", 1)[0]
    if header.startswith("true\\pred"):
        cm = ConfusionMatrix.from_csv(text)
        svg = confusion_heatmap(cm.counts, title=v["title"])
    elif header.startswith("kind,model,condition,metric"):
        svg = sweep_chart(read_summary_csv(text), v["metric"], title=v["title"],
                          include_differences=v["differences"])
    else:
        raise ConfigError(f"{v['input']}: not a summary or confusion CSV")
    write_svg(v["out"], svg)
    print(f"wrote {v['out']}")


def cmd_gradcheck(v, explicit):
    from .gradcheck import run_suite

    results = run_suite(tol=v["tol"], seed=v["seed"])
    for r in results:
        print(f"{r.name:40s} {r.report}")
    if v["out"]:
        atomic_write_text(v["out"], json.dumps(
            [{"name": r.name, "max_rel_err": float(r.report.max_rel_err), "passed": bool(r.report.passed),
              "worst": r.report.worst} for r in results], indent=2, sort_keys=True) + "\n")
    failed = [r.name for r in results if not r.report.passed]
    if failed:
        raise ValidationFailed(f"{len(failed)} gradient checks failed: {', '.join(failed)}")
    print(f"all {len(results)} checks passed")


class ValidationFailed(IrregTSError):
    pass


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
    "gradcheck": cmd_gradcheck,
}


def run_command(argv: Optional[Sequence[str]] = None, environ=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values, explicit = resolve(ns.command, ns, environ)
        HANDLERS[ns.command](values, explicit)
    except (IrregTSError, OSError, ValueError) as e:
        print(f"irregts {ns.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(run_command(argv))


if __name__ == "__main__":
    main()
