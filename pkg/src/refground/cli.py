"""Command-line entry point.

Subcommands: gen-corpus, train, ground, eval, act, serve.  Settings merge
three layers with flags strongest: command-line flags, then REFGROUND_*
environment variables, then an optional JSON config file.  Machine-readable
results go to stdout, logs to stderr.  Exit codes: 0 success, 1 usage error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import evaluation, figures, seqmodel, training
from .actuation import GripperSpec, centroid, select_grasp, synthesize_cloud
from .pipeline import EngineConfig, GroundingError
from .scene import (ExpressionConfig, SceneConfig, generate_corpus, load_corpus,
                    load_scene_file, make_proposals, save_corpus, split_dataset)
from .seqmodel import TrainConfig
from .training import TrainSettings

ENV_PREFIX = "REFGROUND_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1, not argparse's default 2
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class Opt:
    name: str                 # flag name without leading dashes
    type: type = str
    default=None
    required: bool = False
    flag: bool = False        # store_true switch
    help: str = ""

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


_OPTIONS: dict[str, list[Opt]] = {
    "gen-corpus": [
        Opt("out", required=True, help="output corpus directory"),
        Opt("scenes", int, required=True, help="number of scenes to generate"),
        Opt("seed", int, default=0),
        Opt("min-objects", int, default=5),
        Opt("max-objects", int, default=12),
        Opt("train-frac", float, default=0.8),
        Opt("val-frac", float, default=0.1),
        Opt("test-frac", float, default=0.1),
    ],
    "train": [
        Opt("role", required=True, help="semantic or spatial"),
        Opt("corpus", required=True, help="corpus directory"),
        Opt("out", required=True, help="model bundle file"),
        Opt("epochs", int, default=None),
        Opt("seed", int, default=0),
        Opt("learning-rate", float, default=1e-3),
        Opt("batch-size", int, default=32),
    ],
    "ground": [
        Opt("scene", required=True, help="scene JSON file"),
        Opt("query", required=True),
        Opt("models", required=True, help="models directory"),
        Opt("aggregation", default="noisy-or", help="noisy-or or max"),
        Opt("emit-diagnostics", flag=True),
    ],
    "eval": [
        Opt("corpus", required=True),
        Opt("models", required=True),
        Opt("out", required=True, help="report JSON path"),
        Opt("include-timing", flag=True),
        Opt("no-figures", flag=True),
    ],
    "act": [
        Opt("scene", required=True),
        Opt("object", required=True, help="object id within the scene"),
        Opt("gripper", default="0.08,0.05", help="max_opening,finger_length (m)"),
    ],
    "serve": [
        Opt("models", required=True),
        Opt("corpus", required=True),
        Opt("port", int, default=8000),
        Opt("host", default="127.0.0.1"),
        Opt("static", default=None, help="directory of built UI assets"),
    ],
}

_ALL_KEYS = {o.dest for opts in _OPTIONS.values() for o in opts} | {"config"}


def _coerce(opt: Opt, value):
    if value is None:
        return None
    if opt.flag:
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    try:
        return opt.type(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid value for --{opt.name}: {value!r}") from exc


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(data) - _ALL_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return data


def _merge_settings(command: str, args: argparse.Namespace) -> dict:
    """flags > environment > config file > declared default."""
    config = _load_config_file(getattr(args, "config", None)
                               or os.environ.get(ENV_PREFIX + "CONFIG"))
    merged = {}
    for opt in _OPTIONS[command]:
        value = getattr(args, opt.dest)
        if value is None or (opt.flag and value is False):
            env = os.environ.get(ENV_PREFIX + opt.dest.upper())
            if env is not None:
                value = _coerce(opt, env)
            elif opt.dest in config:
                value = _coerce(opt, config[opt.dest])
            else:
                value = opt.default if not opt.flag else False
        if opt.required and value in (None, ""):
            raise UsageError(f"--{opt.name} is required")
        merged[opt.dest] = value
    return merged


def _build_parser() -> _Parser:
    parser = _Parser(prog="refground",
                     description="referring-expression grounding toolkit")
    parser.add_argument("--config", default=None,
                        help="JSON config file merged beneath flags")
    sub = parser.add_subparsers(dest="command")
    for command, opts in _OPTIONS.items():
        p = sub.add_parser(command)
        for opt in opts:
            if opt.flag:
                p.add_argument(f"--{opt.name}", action="store_true", default=False,
                               help=opt.help)
            else:
                p.add_argument(f"--{opt.name}", default=None, help=opt.help)
    return parser


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=1) + "\n")


def _log(message: str) -> None:
    sys.stderr.write(message + "\n")


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def _load_partitions(corpus_dir: Path, records):
    by_id = {r.scene.id: r for r in records}
    path = corpus_dir / "partitions.json"
    if not path.is_file():
        return {"train": records, "val": [], "test_a": [], "test_b": []}
    mapping = json.loads(path.read_text(encoding="utf-8"))
    return {name: [by_id[sid] for sid in ids if sid in by_id]
            for name, ids in mapping.items()}


def _cmd_gen_corpus(s: dict) -> int:
    ratios = (s["train_frac"], s["val_frac"], s["test_frac"])
    config = SceneConfig(min_objects=s["min_objects"], max_objects=s["max_objects"])
    _log(f"generating {s['scenes']} scenes (seed {s['seed']})")
    records = generate_corpus(s["scenes"], seed=s["seed"], scene_config=config,
                              expression_config=ExpressionConfig())
    train, val, test = split_dataset(records, ratios, seed=s["seed"])
    test_parts = evaluation.classify_test_partitions(test)
    out = Path(s["out"])
    save_corpus(out, records)
    partitions = {
        "train": sorted(r.scene.id for r in train),
        "val": sorted(r.scene.id for r in val),
        "test_a": sorted(r.scene.id for r in test_parts["test_a"]),
        "test_b": sorted(r.scene.id for r in test_parts["test_b"]),
    }
    (out / "partitions.json").write_text(json.dumps(partitions, indent=1) + "\n",
                                         encoding="utf-8")
    _emit({"out": str(out), "scenes": len(records),
           "expressions": sum(len(r.expressions) for r in records),
           "partitions": {k: len(v) for k, v in partitions.items()}})
    return 0


def _cmd_train(s: dict) -> int:
    role = s["role"]
    if role not in ("semantic", "spatial"):
        raise UsageError("--role must be semantic or spatial")
    corpus_dir = Path(s["corpus"])
    records = load_corpus(corpus_dir)
    if not records:
        raise RuntimeError(f"no scenes found in {corpus_dir}")
    train_records = _load_partitions(corpus_dir, records)["train"]
    settings = TrainSettings(
        learning_rate=s["learning_rate"], batch_size=s["batch_size"],
        seed=s["seed"],
        semantic_epochs=s["epochs"] or TrainSettings().semantic_epochs,
        spatial_epochs=s["epochs"] or TrainSettings().spatial_epochs,
    )
    vocab = training.build_vocabulary(train_records)
    _log(f"training {role} model on {len(train_records)} scenes "
         f"(vocab {vocab.size})")
    if role == "semantic":
        model, losses = training.train_semantic_model(train_records, vocab, settings)
        seqmodel.save_model(model, s["out"], extra={"feature_dim": settings.feature_dim})
    else:
        model, losses = training.train_spatial_model(train_records, vocab, settings)
        from .spatial import save_spatial_model
        save_spatial_model(model, s["out"])
    _emit({"role": role, "out": s["out"], "epochs": len(losses),
           "first_loss": losses[0], "final_loss": losses[-1]})
    return 0


def _aggregation_value(text: str) -> str:
    value = text.replace("-", "_")
    if value not in ("noisy_or", "max"):
        raise UsageError("--aggregation must be noisy-or or max")
    return value


def _cmd_ground(s: dict) -> int:
    engine = training.load_engine(s["models"])
    record = load_scene_file(s["scene"])
    proposals = make_proposals(record.scene, "ground_truth", seed=0)
    from . import pipeline as pipeline_mod
    result = pipeline_mod.ground(engine, record.scene, proposals, s["query"],
                                 _aggregation_value(s["aggregation"]))
    _emit(result.to_dict(include_diagnostics=s["emit_diagnostics"]))
    return 0


def _cmd_eval(s: dict) -> int:
    corpus_dir = Path(s["corpus"])
    records = load_corpus(corpus_dir)
    parts = _load_partitions(corpus_dir, records)
    partitions = {name: recs for name, recs in parts.items()
                  if name != "train" and recs}
    if not partitions:
        raise RuntimeError("corpus has no evaluation partitions")
    engine = training.load_engine(s["models"])
    _log(f"evaluating {sum(len(v) for v in partitions.values())} scenes "
         f"across {len(partitions)} partitions")
    report = evaluation.run_benchmark(engine, partitions)
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict(include_timing=s["include_timing"])
    out.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    out.with_suffix(".txt").write_text(report.text_table(), encoding="utf-8")
    if not s["no_figures"]:
        figures.render_report_figures(report, out.parent / "figures")
    _emit(payload)
    return 0


def _cmd_act(s: dict) -> int:
    record = load_scene_file(s["scene"])
    try:
        obj = record.scene.object_by_id(s["object"])
    except KeyError:
        raise RuntimeError(f"scene has no object {s['object']!r}") from None
    try:
        opening, finger = (float(x) for x in s["gripper"].split(","))
    except ValueError:
        raise UsageError("--gripper must be max_opening,finger_length") from None
    gripper = GripperSpec(max_opening=opening, finger_length=finger)
    cloud = synthesize_cloud(record.scene, obj)
    _emit({
        "object": obj.id,
        "centroid": list(centroid(cloud)),
        "grasp": select_grasp(obj.extent, gripper),
        "extent": obj.extent.as_list(),
    })
    return 0


def _cmd_serve(s: dict) -> int:
    import uvicorn

    from .api import create_app

    engine = training.load_engine(s["models"])
    records = load_corpus(Path(s["corpus"]))
    app = create_app(engine, records, static_dir=s["static"])
    _log(f"serving on http://{s['host']}:{s['port']}")
    uvicorn.run(app, host=s["host"], port=s["port"], log_level="warning")
    return 0


_HANDLERS = {
    "gen-corpus": _cmd_gen_corpus,
    "train": _cmd_train,
    "ground": _cmd_ground,
    "eval": _cmd_eval,
    "act": _cmd_act,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required "
                             f"({', '.join(_OPTIONS)})")
        settings = _merge_settings(args.command, args)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](settings)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return 1
    except (GroundingError, RuntimeError, OSError, ValueError, KeyError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
