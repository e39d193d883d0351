"""Command-line entry point: ``dreg {gen,noise,train,eval,theory}``.

Each command reads an INI file (``--config``), writes its artifacts into
``--out`` and also writes ``resolved.ini``, the fully resolved configuration
with every default filled in and input paths made absolute. Running the same
command on ``resolved.ini`` reproduces every artifact byte for byte.

All randomness derives from ``[run] seed`` (overridable with ``--seed``)
through :func:`dreg._rng.derive_seed` with a fixed tag per purpose.

Exit codes: 0 success, 1 configuration error, 2 numeric or training
failure, 3 IO or parse error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import itertools
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dreg import metrics, synthdata, theory
from dreg._rng import derive_seed
from dreg.errors import ConfigError, DregError, NumericError, ParseError, TrainingError, UndefinedMetricError
from dreg.losses import LossSpec
from dreg.model import ModelConfig, load_params, save_params
from dreg.trainer import TrainConfig, evaluate, train

log = logging.getLogger("dreg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
REQUIRED = object()
RESOLVED_NAME = "resolved.ini"


@dataclass(frozen=True)
class Key:
    kind: str  # int, float, str, path, ints, floats
    default: object = None


def _fmt(kind, value) -> str:
    if kind in ("ints", "floats"):
        return ", ".join(_fmt(kind[:-1], v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def _parse(kind, raw: str, where: str, base: Path):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None
    if kind == "path":
        if not raw:
            raise ConfigError(f"{where}: empty path")
        p = Path(raw)
        return str((base / p).resolve() if not p.is_absolute() else p)
    return raw


_RUN = {"seed": Key("int", 0)}

SCHEMAS = {
    "gen": {
        "run": _RUN,
        "gen": {
            "kind": Key("str", "blobs"),
            "n": Key("int", 1000),
            "eta": Key("float", 0.0),
            "n_classes": Key("int", 4),
            "held_out": Key("int", 0),
            "radius": Key("float", 6.0),
            "spread": Key("float", 1.0),
            "d": Key("int", 10),
            "w_norm": Key("float", 0.3),
            "w_star": Key("floats"),
        },
        "split": {"train": Key("float", 0.8), "val": Key("float", 0.1), "test": Key("float", 0.1)},
    },
    "noise": {
        "run": _RUN,
        "noise": {
            "input": Key("path", REQUIRED),
            "n_classes": Key("int"),
            "mode": Key("str", "uniform"),
            "eta": Key("float"),
            "n_kept": Key("int"),
        },
    },
    "train": {
        "run": _RUN,
        "data": {"train": Key("path", REQUIRED), "n_classes": Key("int")},
        "model": {"hidden": Key("ints", (32,)), "activation": Key("str", "tanh")},
        "loss": {
            "kind": Key("str", "ce"),
            "epsilon": Key("float"),
            "gamma": Key("float"),
            "eta": Key("float"),
            "beta": Key("float"),
        },
        "train": {
            "batch_size": Key("int", 64),
            "epochs": Key("int", 100),
            "lr": Key("float", 0.1),
            "momentum": Key("float", 0.9),
            "weight_decay": Key("float", 0.0),
        },
    },
    "eval": {
        "run": _RUN,
        "data": {"test": Key("path", REQUIRED), "n_classes": Key("int")},
        "model": {"params": Key("path", REQUIRED)},
        "metrics": {"n_bins": Key("int", metrics.DEFAULT_BINS)},
    },
    "theory": {
        "run": _RUN,
        "theory": {
            "d": Key("int", 10),
            "w_norm": Key("float", 0.3),
            "w_star": Key("floats"),
            "n": Key("int", 100_000),
            "n_test": Key("int", 100_000),
            "n_bins": Key("int", metrics.DEFAULT_BINS),
            "iters": Key("int", 50),
            "etas": Key("floats", (0.1, 0.2, 0.3)),
            "epsilons": Key("floats", (0.05, 0.1, 0.3)),
        },
    },
}

# keys that only make sense for one variant of a section
_GEN_KEYS = {
    "blobs": ("kind", "n", "eta", "n_classes", "held_out", "radius", "spread"),
    "gmm": ("kind", "n", "eta", "d", "w_norm", "w_star"),
}
_NOISE_KEYS = {"uniform": ("input", "n_classes", "mode", "eta"), "held_out": ("input", "n_classes", "mode", "n_kept")}


class RunConfig:
    """Validated, fully resolved configuration of one command."""

    def __init__(self, command: str, values: dict, explicit=()):
        self.command = command
        self.values = values
        self.explicit = set(explicit)

    def __getitem__(self, section) -> dict:
        return self.values[section]

    def drop(self, section: str, keep) -> None:
        """Forget keys of ``section`` not in ``keep``, warning about any the user set."""
        for k in list(self.values[section]):
            if k not in keep:
                if (section, k) in self.explicit:
                    log.warning("[%s] %s is ignored here", section, k)
                del self.values[section][k]

    def to_dict(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items() if v is not None}
                for s, kv in self.values.items()}

    def to_ini(self) -> str:
        schema = SCHEMAS[self.command]
        lines = [f"# resolved configuration for: dreg {self.command}"]
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            for k, v in kv.items():
                if v is not None:
                    lines.append(f"{k} = {_fmt(schema[section][k].kind, v)}")
            lines.append("")
        return "\n".join(lines)


def load_config(command: str, path: str | None, seed: int | None = None) -> RunConfig:
    """Parse ``path`` against the command's schema; unknown sections or keys are errors."""
    schema = SCHEMAS[command]
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as e:
            raise ParseError(f"cannot read config: {e.strerror}", path=p) from None
        try:
            cp.read_string(text, source=str(p))
        except configparser.Error as e:
            raise ConfigError(f"{p}: {e}") from None
        base = p.resolve().parent
    for section in cp.sections():
        if section not in schema:
            raise ConfigError(f"unknown section [{section}] for command {command!r}")
        for key in cp[section]:
            if key not in schema[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    values = {}
    explicit = {(s, k) for s in cp.sections() for k in cp[s]}
    for section, keys in schema.items():
        values[section] = {}
        for key, spec in keys.items():
            where = f"[{section}] {key}"
            if cp.has_option(section, key):
                values[section][key] = _parse(spec.kind, cp[section][key], where, base)
            elif spec.default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in section [{section}]")
            else:
                values[section][key] = spec.default
    if seed is not None:
        values["run"]["seed"] = int(seed)
    return RunConfig(command, values, explicit)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _split_summary(ds) -> dict:
    return {"n": ds.n, "n_flag_false": int(np.sum(~ds.flags)), "n_classes": ds.n_classes}


def cmd_gen(cfg: RunConfig, out: Path) -> None:
    g = cfg["gen"]
    seed = cfg["run"]["seed"]
    kind = g["kind"]
    if kind not in _GEN_KEYS:
        raise ConfigError(f"[gen] kind must be one of {tuple(_GEN_KEYS)}, got {kind!r}")
    cfg.drop("gen", _GEN_KEYS[kind])
    seeds = {"sample": derive_seed(seed, "gen.sample"), "split": derive_seed(seed, "gen.split")}
    if kind == "gmm":
        w = g["w_star"] if g.get("w_star") is not None else theory.isotropic_w_star(g["d"], g["w_norm"])
        if g.get("w_star") is not None:
            cfg.drop("gen", ("kind", "n", "eta", "w_star"))
        ds = synthdata.sample_contaminated_gmm(synthdata.SynthConfig(g["n"], tuple(w), g["eta"], seeds["sample"]))
    else:
        n_blobs = g["n_classes"] + g["held_out"]
        if g["n_classes"] < 2 or g["held_out"] < 0:
            raise ConfigError("[gen] needs n_classes >= 2 and held_out >= 0")
        centers = synthdata.circle_centers(n_blobs, g["radius"])
        ds = synthdata.sample_blobs(g["n"], centers, g["spread"], seeds["sample"])
        if g["held_out"]:
            seeds["fold"] = derive_seed(seed, "gen.fold")
            ds = synthdata.fold_held_out_classes(ds, g["n_classes"], seeds["fold"])
        if g["eta"] > 0:
            if g["held_out"]:
                raise ConfigError("[gen] use either held_out or eta, not both")
            seeds["noise"] = derive_seed(seed, "gen.noise")
            ds = synthdata.inject_label_noise(ds, g["eta"], seeds["noise"])
    s = cfg["split"]
    parts = synthdata.split(ds, synthdata.SplitFractions(s["train"], s["val"], s["test"]), seeds["split"])
    files = {}
    for name, part in zip(("train", "val", "test"), parts):
        path = out / f"{name}.csv"
        synthdata.save_csv(part, path)
        files[f"{name}.csv"] = {**_split_summary(part), "sha256": _sha256(path)}
    manifest = {
        "command": "gen",
        "config": cfg.to_dict(),
        "derived_seeds": seeds,
        "files": files,
        "n_flag_false": int(np.sum(~ds.flags)),
    }
    _write(out / "manifest.json", _dump_json(manifest))
    log.info("wrote %d samples (%d flag=false) to %s", ds.n, manifest["n_flag_false"], out)


def cmd_noise(cfg: RunConfig, out: Path) -> None:
    c = cfg["noise"]
    mode = c["mode"]
    if mode not in _NOISE_KEYS:
        raise ConfigError(f"[noise] mode must be one of {tuple(_NOISE_KEYS)}, got {mode!r}")
    cfg.drop("noise", _NOISE_KEYS[mode])
    ds = synthdata.load_csv(c["input"], c.get("n_classes"))
    tag = "noise.uniform" if mode == "uniform" else "noise.fold"
    seed = derive_seed(cfg["run"]["seed"], tag)
    if mode == "uniform":
        if c.get("eta") is None:
            raise ConfigError("missing required key 'eta' in section [noise]")
        noisy = synthdata.inject_label_noise(ds, c["eta"], seed)
    else:
        if c.get("n_kept") is None:
            raise ConfigError("missing required key 'n_kept' in section [noise]")
        noisy = synthdata.fold_held_out_classes(ds, c["n_kept"], seed)
    path = out / "noisy.csv"
    synthdata.save_csv(noisy, path)
    manifest = {
        "command": "noise",
        "config": cfg.to_dict(),
        "derived_seeds": {tag.split(".")[1]: seed},
        "files": {"noisy.csv": {**_split_summary(noisy), "sha256": _sha256(path)}},
    }
    _write(out / "manifest.json", _dump_json(manifest))


def _loss_spec(cfg: RunConfig) -> LossSpec:
    section = cfg["loss"]
    spec = LossSpec(**section)
    cfg.drop("loss", ("kind",) + LossSpec.REQUIRED[spec.kind])
    return LossSpec(spec.kind, **{k: section[k] for k in LossSpec.REQUIRED[spec.kind]})


def cmd_train(cfg: RunConfig, out: Path) -> None:
    # validate everything before touching data
    spec = _loss_spec(cfg)
    t = cfg["train"]
    seed = cfg["run"]["seed"]
    seeds = {"init": derive_seed(seed, "train.init"), "shuffle": derive_seed(seed, "train.shuffle")}
    tcfg = TrainConfig(spec, t["batch_size"], t["epochs"], t["lr"], t["momentum"], t["weight_decay"], seeds["shuffle"])
    ds = synthdata.load_csv(cfg["data"]["train"], cfg["data"].get("n_classes"))
    m = cfg["model"]
    mcfg = ModelConfig((ds.d,) + tuple(m["hidden"]) + (ds.n_classes,), m["activation"], seed=seeds["init"])
    report = train(tcfg, mcfg, ds)
    save_params(report.params, out / "params.csv")
    _write(out / "train_report.json", report.to_json(config=cfg.to_dict(), derived_seeds=seeds,
                                                     final_loss=report.epoch_loss[-1]))
    log.info("trained %s for %d epochs, final loss %.6f", spec.kind, t["epochs"], report.epoch_loss[-1])


def _metrics_block(preds: metrics.PredictionSet, n_bins: int) -> dict:
    return {"n": len(preds), "metrics": metrics.full_report(preds, n_bins).to_dict()}


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    n_bins = cfg["metrics"]["n_bins"]
    if n_bins < 1:
        raise ConfigError("[metrics] n_bins must be >= 1")
    params = load_params(cfg["model"]["params"])
    ds = synthdata.load_csv(cfg["data"]["test"], cfg["data"].get("n_classes") or params.n_classes)
    if ds.n_classes != params.n_classes:
        raise ConfigError(f"dataset has {ds.n_classes} classes but the model predicts {params.n_classes}")
    ev = evaluate(params, ds)
    preds = metrics.PredictionSet(ev.probs, ds.labels)
    report = {"n_bins": n_bins, "all": _metrics_block(preds, n_bins), "notes": [], "config": cfg.to_dict()}
    curves = {"": preds}
    hard = ~ds.flags
    if hard.any():
        hp = preds.subset(hard)
        report["hard"] = _metrics_block(hp, n_bins)
        curves["_hard"] = hp
    else:
        report["notes"].append("no flag=false samples; hard-set section omitted")
    for name, block in (("all", report["all"]), ("hard", report.get("hard"))):
        if block is not None:
            for metric in ("aupr_err", "fpr_at_95tpr"):
                if metric not in block["metrics"]:
                    report["notes"].append(f"{name}: {metric} undefined (needs both correct and incorrect predictions)")
    for suffix, p in curves.items():
        _write(out / f"reliability{suffix}.csv", metrics.ece(p, n_bins)[1].to_csv())
        _write(out / f"risk_coverage{suffix}.csv", metrics.risk_coverage_csv(p))
    _write(out / "metrics.json", _dump_json(report))


def cmd_theory(cfg: RunConfig, out: Path, parallel: int = 1) -> None:
    c = cfg["theory"]
    if c["w_star"] is not None:
        w = c["w_star"]
        cfg.drop("theory", [k for k in c if k not in ("d", "w_norm")])
    else:
        w = theory.isotropic_w_star(c["d"], c["w_norm"])
    for eta in c["etas"]:
        if not (0.0 <= eta < 0.5):
            raise ConfigError(f"[theory] etas must lie in [0, 0.5), got {eta}")
    for eps in c["epsilons"]:
        if not (0.0 <= eps < 1.0):
            raise ConfigError(f"[theory] epsilons must lie in [0, 1), got {eps}")
    template = theory.TheoryParams(tuple(w), c["n"], c["etas"][0], c["epsilons"][0], cfg["run"]["seed"])
    grid = list(itertools.product(c["etas"], c["epsilons"]))
    report = theory.theorem_check(grid, template, c["n_test"], c["n_bins"], c["iters"], parallel)
    _write(out / "theorem.csv", report.to_csv())
    summary = report.to_dict()
    summary["config"] = cfg.to_dict()
    curves_dir = out / "curves"
    curves_dir.mkdir(exist_ok=True)
    for i, (cell, (eta, eps)) in enumerate(zip(summary["cells"], grid)):
        name = f"curve_{i:03d}.csv"
        _write(curves_dir / name, theory.calib_curve(eta, eps).to_csv())
        cell["curve"] = f"curves/{name}"
    _write(out / "theorem.json", _dump_json(summary))


COMMANDS = {"gen": cmd_gen, "noise": cmd_noise, "train": cmd_train, "eval": cmd_eval, "theory": cmd_theory}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dreg", description="Calibration experiments with dynamic regularization.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen": "generate a synthetic dataset and split it",
        "noise": "contaminate the labels of an existing dataset",
        "train": "train a classifier",
        "eval": "compute calibration and ranking metrics",
        "theory": "run the contamination-model simulation grid",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        if name == "theory":
            p.add_argument("--parallel", type=int, default=1, help="worker processes for grid cells")
    return parser


def run(argv=None) -> int:
    """Parse ``argv``, run the command and return the exit code."""
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.command, args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "theory":
            if args.parallel < 1:
                raise ConfigError("--parallel must be >= 1")
            cmd_theory(cfg, out, args.parallel)
        else:
            COMMANDS[args.command](cfg, out)
        _write(out / RESOLVED_NAME, cfg.to_ini())
    except ConfigError as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (NumericError, TrainingError, UndefinedMetricError) as e:
        log.error("runtime error: %s", e)
        return EXIT_RUNTIME
    except (ParseError, OSError) as e:
        log.error("IO error: %s", e)
        return EXIT_IO
    except DregError as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))
