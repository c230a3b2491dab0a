"""Command-line entry point: ``tvmgi <command> ...``.

Every command reads an optional JSON run config with ``gen``, ``model``,
``train`` and ``data`` sections, applies ``--set section.field=value``
overrides, validates everything, and only then starts work.  Exit codes:
0 success, 1 check failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .datamodel import SampleFormatError, dump_json, load_sample
from .evaluation import evaluate, evaluate_oracle
from .inference import assemble_montage, predict_segments
from .model import ModelConfig, ModelConfigError, load_checkpoint, predict_scores
from .synthgen import ConfigError, GenConfig, gen_dataset, load_dataset_manifest
from .training import TrainConfig, TrainConfigError, check_loss_gradients, train_from_manifest

log = logging.getLogger("tvmgi")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
RUN_CONFIG = "run_config.json"
SECTIONS = ("gen", "model", "train", "data")
DATA_DEFAULTS = {"n_train": 500, "n_test": 100}


class UsageError(Exception):
    """Bad flags, config values or input paths; maps to exit code 2."""


class RunConfig:
    """Validated union of the generator, model and training configs."""

    def __init__(self, raw: Dict[str, Dict]):
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise UsageError(f"{sorted(unknown)[0]}: unknown config section")
        self.raw = {k: dict(raw.get(k) or {}) for k in SECTIONS}
        try:
            self.gen = GenConfig.from_dict(self.raw["gen"])
            self.model = ModelConfig.from_dict(self.raw["model"])
            self.train = TrainConfig.from_dict(self.raw["train"])
        except (ConfigError, ModelConfigError, TrainConfigError) as e:
            section = {ConfigError: "gen", ModelConfigError: "model", TrainConfigError: "train"}[type(e)]
            raise UsageError(f"{section}.{e}") from e
        except TypeError as e:
            raise UsageError(str(e)) from e
        self.data = {**DATA_DEFAULTS, **self.raw["data"]}
        for key, value in self.data.items():
            if key not in DATA_DEFAULTS:
                raise UsageError(f"data.{key}: unknown field")
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise UsageError(f"data.{key}: must be a nonnegative integer, got {value!r}")

    def to_dict(self) -> Dict:
        return {"gen": self.gen.to_dict(), "model": self.model.to_dict(),
                "train": self.train.to_dict(), "data": dict(self.data)}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    raw: Dict[str, Dict] = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}") from e
        if not isinstance(raw, dict) or not all(isinstance(v, dict) for v in raw.values()):
            raise UsageError("config must be an object of sections")
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise UsageError(f"--set expects section.field=value, got {item!r}")
        raw.setdefault(section, {})[name] = _parse_value(value)
    return RunConfig(raw)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def _dataset(path: str):
    try:
        return load_dataset_manifest(path)
    except FileNotFoundError as e:
        raise UsageError(f"dataset not found: {path}") from e
    except (ConfigError, KeyError, ValueError) as e:
        raise UsageError(f"unreadable dataset manifest: {e}") from e


def _checkpoint(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from e
    except (ModelConfigError, SampleFormatError, KeyError, ValueError) as e:
        raise UsageError(f"unreadable checkpoint: {e}") from e


# ------------------------------------------------------------------ commands
def cmd_gen_data(args, rc: RunConfig) -> int:
    out = Path(args.out)
    gen_dataset(rc.gen, rc.data["n_train"], rc.data["n_test"], out, threads=args.threads)
    dump_json(rc.to_dict(), out / RUN_CONFIG)
    log.info("wrote %d train / %d test samples to %s", rc.data["n_train"], rc.data["n_test"], out)
    return EXIT_OK


def cmd_train(args, rc: RunConfig) -> int:
    manifest = _dataset(args.data)
    if rc.model.d_in != manifest.config.d_in:
        raise UsageError(f"model.d_in: {rc.model.d_in} does not match dataset feature dim "
                         f"{manifest.config.d_in}")
    if not manifest.train:
        raise UsageError(f"dataset {args.data} has no training samples")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = rc.to_dict()
    effective["gen"] = manifest.config.to_dict()
    dump_json(effective, out / RUN_CONFIG)
    result = train_from_manifest(manifest, rc.train, rc.model, out, threads=args.threads)
    log.info("trained %d steps; checkpoint in %s", len(result.log), out / "checkpoint")
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    manifest = _dataset(args.data)
    samples = [load_sample(p) for p in manifest.split(args.split)]
    if args.oracle:
        report, model_cfg = evaluate_oracle(samples), None
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --oracle is given")
        params, cfg = _checkpoint(args.checkpoint)
        if cfg.d_in != manifest.config.d_in:
            raise UsageError(f"model.d_in: checkpoint expects {cfg.d_in}, dataset has "
                             f"{manifest.config.d_in}")
        report, model_cfg = evaluate(samples, params, cfg, threads=args.threads), cfg.to_dict()
    sys.stderr.write(report.table() + "\n")
    _emit({"split": args.split, "oracle": bool(args.oracle), "n_samples": len(samples),
           "model": model_cfg, "metrics": report.to_dict()})
    return EXIT_OK


def cmd_montage(args, rc: RunConfig) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    params, cfg = _checkpoint(args.checkpoint)
    try:
        sample = load_sample(args.sample)
    except FileNotFoundError as e:
        raise UsageError(f"sample not found: {args.sample}") from e
    except SampleFormatError as e:
        raise UsageError(f"invalid sample: {e}") from e
    if sample.feature_dim != cfg.d_in:
        raise UsageError(f"model.d_in: checkpoint expects {cfg.d_in}, sample has {sample.feature_dim}")
    predictions = predict_segments(predict_scores(params, sample, cfg))
    timeline = assemble_montage(predictions, sample, args.threshold)
    doc = timeline.to_json()
    if args.out:
        dump_json(doc, args.out)
    else:
        _emit(doc)
    return EXIT_OK


def cmd_gradcheck(args, rc: RunConfig) -> int:
    if not args.tol > 0:
        raise UsageError("--tol must be > 0")
    report = check_loss_gradients(seed=args.seed, tol=args.tol)
    _emit({"seed": args.seed, "tol": args.tol, **report.to_dict()})
    if not report.passed:
        sys.stderr.write(f"gradient check failed: max_rel_err={report.max_rel_err:.3e} "
                         f"at {report.worst}\n")
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "montage": cmd_montage,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config with gen/model/train/data sections")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="override one config field (value parsed as JSON when possible)")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="tvmgi", description="Script-driven video montage toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--oracle", action="store_true", help="emit ground truth instead of model output")

    p = sub.add_parser("montage", parents=[common], help="assemble a timeline for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the objective")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        rc = load_run_config(args.config, args.set)
        return COMMANDS[args.command](args, rc)
    except UsageError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
