"""Command-line entry point: ``mdgcn {generate,train,cv,eval,explain}``.

Configuration is a flat JSON object. Flags override file values, and every
resolved value is echoed to the run log so a run can be repeated from its
``run_log.json`` alone (``mdgcn CMD --config run_log.json``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .data import (NotSPDWarning, SynthConfig, generate_synthetic, load_dataset, save_dataset,
                   stratified_kfold)
from .errors import ConfigError
from .explain import extract_correspondence, group_analysis, write_region_csv
from .model import READOUT_MODES
from .training import (Checkpoint, TrainConfig, binary_metrics, cross_validate, cv_table,
                       load_checkpoint, predict, save_checkpoint, sweep_layers, train,
                       write_cv_json)

log = logging.getLogger("mdgcn")

COMMANDS = ("generate", "train", "cv", "eval", "explain")
SWEEP_LAYERS = (1, 2, 3, 4)


@dataclass(frozen=True)
class Key:
    kind: str                 # int, float, bool, str, int_list
    default: object
    nullable: bool = False


def _keys() -> dict[str, Key]:
    keys: dict[str, Key] = {}
    kinds = {int: "int", float: "float", bool: "bool", str: "str"}
    synth, trainer = SynthConfig(), TrainConfig()
    for obj in (synth, trainer):
        for f in fields(obj):
            if f.name == "seed":
                continue
            value = getattr(obj, f.name)
            if value is None:
                keys[f.name] = Key("int", None, nullable=True)
                continue
            kind = "int_list" if isinstance(value, tuple) else kinds[type(value)]
            keys[f.name] = Key(kind, list(value) if isinstance(value, tuple) else value)
    keys.update({
        "seed": Key("int", 0),
        "manifest": Key("str", None, nullable=True),
        "checkpoint": Key("str", None, nullable=True),
        "out": Key("str", None, nullable=True),
        "k": Key("int", 10),
        "holdout_fold": Key("int", None, nullable=True),
        "layers_sweep": Key("bool", False),
        "n_perm": Key("int", 2000),
        "alpha": Key("float", 0.05),
        "threads": Key("int", 1),
    })
    return keys


KEYS = _keys()

REQUIRED = {
    "generate": ("n_regions", "n_per_group"),
    "train": ("manifest",),
    "cv": ("manifest",),
    "eval": ("manifest", "checkpoint"),
    "explain": ("manifest", "checkpoint"),
}
PATH_KEYS = ("manifest", "checkpoint")


def _check_type(key: str, value):
    entry = KEYS[key]
    if value is None:
        if entry.nullable:
            return None
        raise ConfigError(f"type error: {key} must be {entry.kind}, got null")
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
        "str": isinstance(value, str),
        "int_list": isinstance(value, list)
        and all(isinstance(v, int) and not isinstance(v, bool) for v in value),
    }[entry.kind]
    if not ok:
        raise ConfigError(
            f"type error: {key} must be {entry.kind}, got {type(value).__name__} {value!r}")
    return float(value) if entry.kind == "float" else value


@dataclass
class RunConfig:
    command: str
    values: dict
    explicit: frozenset

    def __getitem__(self, key):
        return self.values[key]

    def synth(self) -> SynthConfig:
        names = {f.name for f in fields(SynthConfig)}
        return SynthConfig(**{k: v for k, v in self.values.items() if k in names})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.values.items() if k in names})

    def to_dict(self) -> dict:
        return dict(sorted(self.values.items()))


def parse_config(command: str, file_values: dict | None = None,
                 overrides: dict | None = None) -> RunConfig:
    """Merge defaults, file values and overrides; validate types and required keys."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    merged: dict = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _check_type(key, value)
    missing = [k for k in REQUIRED[command] if merged.get(k) is None]
    if missing:
        raise ConfigError(
            f"missing required keys for {command}: {', '.join(REQUIRED[command])} "
            f"(missing: {', '.join(missing)})")
    values = {k: entry.default for k, entry in KEYS.items()}
    values.update(merged)
    cfg = RunConfig(command, values, frozenset(merged))
    # surface dataclass validation as config errors before any work starts
    try:
        if command == "generate":
            cfg.synth()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    if cfg["k"] < 2:
        raise ConfigError("k must be >= 2")
    for key in PATH_KEYS:
        if key in REQUIRED[command] and not Path(cfg[key]).is_file():
            raise ConfigError(f"{key} file not found: {cfg[key]}")
    return cfg


def read_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg} "
                          f"at line {exc.lineno}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    if set(doc) == {"command", "config", "version"}:
        # a previous run log: replay its config into a fresh output directory
        doc = {k: v for k, v in doc["config"].items() if k != "out"}
    return doc


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load(cfg: RunConfig):
    """Load the manifest, folding per-subject SPD warnings into one log line."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NotSPDWarning)
        ds = load_dataset(cfg["manifest"])
    spd = [w for w in caught if issubclass(w.category, NotSPDWarning)]
    for w in caught:
        if w not in spd:
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    if spd:
        log.info("%d matrices have a negative eigenvalue (expected for streamline counts)",
                 len(spd))
    return ds


def cmd_generate(cfg: RunConfig, out: Path) -> None:
    synth = cfg.synth()
    ds = generate_synthetic(synth)
    manifest = save_dataset(ds, out)
    _write_json(out / "ground_truth.json", {
        "effect_regions": list(synth.effect_regions),
        "effect_region_names": [ds.region_names[i] for i in synth.effect_regions],
        "effect_strength": synth.effect_strength,
        "labels": {s.subject_id: s.label for s in ds.samples},
    })
    log.info("wrote %d subjects to %s", len(ds), manifest)


def cmd_train(cfg: RunConfig, out: Path) -> None:
    ds = _load(cfg)
    tcfg = cfg.train_config()
    evaluation = None
    train_set, test_set = ds, None
    if cfg["holdout_fold"] is not None:
        folds = stratified_kfold(ds.labels, cfg["k"], cfg["seed"], stratified=tcfg.stratified)
        if not 0 <= cfg["holdout_fold"] < len(folds):
            raise ConfigError(f"holdout_fold must lie in [0, {cfg['k']})")
        tr, te = folds[cfg["holdout_fold"]]
        train_set, test_set = ds.subset(tr), ds.subset(te)
    params, hist = train(train_set, tcfg)
    if test_set is not None:
        pred, scores = predict(params, test_set)
        m = binary_metrics(test_set.labels, pred, scores)
        evaluation = {"fold": cfg["holdout_fold"], "test_ids": test_set.subject_ids,
                      "scores": [float(s) for s in scores], "accuracy": m.accuracy,
                      "precision": m.precision, "auc": m.auc}
    cp = Checkpoint(params.hyper, params.weights, tcfg.to_dict(), hist.best_epoch,
                    f"default_rng({tcfg.seed})", evaluation=evaluation)
    save_checkpoint(out / "checkpoint.json", cp)
    _write_json(out / "history.json", {"losses": hist.losses, "best_epoch": hist.best_epoch,
                                       "best_loss": hist.best_loss,
                                       "epochs_run": hist.epochs_run})
    log.info("trained %d epochs (best %d, loss %.6g)",
             hist.epochs_run, hist.best_epoch, hist.best_loss)


def cmd_cv(cfg: RunConfig, out: Path) -> None:
    ds = _load(cfg)
    tcfg = cfg.train_config()
    if cfg["layers_sweep"]:
        reports = sweep_layers(ds, tcfg, SWEEP_LAYERS, cfg["k"], cfg["threads"])
        for L, rep in reports.items():
            write_cv_json(rep, out / f"cv_report_L{L}.json")
        table = cv_table([reports[L] for L in SWEEP_LAYERS])
    else:
        rep = cross_validate(ds, tcfg, cfg["k"], cfg["threads"])
        write_cv_json(rep, out / "cv_report.json")
        table = cv_table([rep])
    (out / "cv_summary.csv").write_text(table)
    log.info("cv summary\n%s", table.rstrip())


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    ds = _load(cfg)
    params = load_checkpoint(cfg["checkpoint"]).params
    pred, scores = predict(params, ds)
    m = binary_metrics(ds.labels, pred, scores)
    _write_json(out / "metrics.json", {
        "accuracy": m.accuracy, "precision": m.precision, "auc": m.auc,
        "tp": m.tp, "fp": m.fp, "tn": m.tn, "fn": m.fn,
        "subjects": [{"id": sid, "label": int(y), "score": float(s), "pred": int(p)}
                     for sid, y, s, p in zip(ds.subject_ids, ds.labels, scores, pred)],
    })
    log.info("accuracy %.4f precision %.4f auc %.4f", m.accuracy, m.precision, m.auc)


def cmd_explain(cfg: RunConfig, out: Path) -> None:
    ds = _load(cfg)
    params = load_checkpoint(cfg["checkpoint"]).params
    corr = extract_correspondence(params, ds)
    stats = group_analysis(corr, ds.labels, cfg["n_perm"], cfg["alpha"], cfg["seed"],
                           cfg["threads"], ds.region_names)
    write_region_csv(stats, out / "region_stats.csv")
    sig = [s.name for s in stats if s.significant]
    log.info("%d of %d regions significant: %s", len(sig), len(stats), ", ".join(sig) or "-")


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "cv": cmd_cv,
            "eval": cmd_eval, "explain": cmd_explain}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mdgcn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mdgcn {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file (or a previous run_log.json)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory (default runs/<timestamp>_seed<seed>)")
        s.add_argument("--threads", type=int)
        s.add_argument("--readout", choices=READOUT_MODES)
        s.add_argument("--layers-sweep", action="store_true", default=None,
                       help="cv only: one report per depth L=1..4")
        s.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (value parsed as JSON)")
    return p


def _error_line(exc: BaseException) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc).replace("\n", " ")})


def _setup_logging(out: Path) -> logging.Handler:
    log.setLevel(logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(fmt)
    log.addHandler(handler)
    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in log.handlers):
        err = logging.StreamHandler(sys.stderr)
        err.setFormatter(fmt)
        log.addHandler(err)
    return handler


def main(argv=None) -> int:
    handler = None
    try:
        args = build_parser().parse_args(argv)
        file_values = read_config_file(args.config) if args.config else {}
        flags = _parse_set(args.set)
        for key, value in (("seed", args.seed), ("out", args.out), ("threads", args.threads),
                           ("readout_mode", args.readout), ("layers_sweep", args.layers_sweep)):
            if value is not None:
                flags[key] = value
        cfg = parse_config(args.command, file_values, flags)
        out = Path(cfg["out"] or Path("runs") / (
            time.strftime("%Y%m%d-%H%M%S") + f"_seed{cfg['seed']}"))
        out.mkdir(parents=True, exist_ok=True)
        cfg.values["out"] = str(out)
        handler = _setup_logging(out)
        log.info("mdgcn %s %s", __version__, args.command)
        for key, value in cfg.to_dict().items():
            origin = "set" if key in cfg.explicit else "default"
            log.info("config %s = %s (%s)", key, json.dumps(value), origin)
        _write_json(out / "run_log.json", {"command": args.command, "config": cfg.to_dict(),
                                           "version": __version__})
        HANDLERS[args.command](cfg, out)
        log.info("done")
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        print(_error_line(exc), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
