"""Command-line entry point: ``fcfd <subcommand> [options]``.

Failures print one line ``error <category>: <detail>`` to stderr and exit with
2 (usage), 3 (configuration, data or checkpoint problems) or 4 (numeric
failure during training).
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from . import analysis
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigNotFound, config_from_dict, config_hash, config_to_ini, load_config
from .data import (ImageDataset, ParseError, desk_datasets, load_data_dir, make_synthetic, read_cifar_binary,
                   to_tensor, write_data_dir, write_idx_dataset)
from .bridges import build_bridge_set
from .losses import NumericError
from .models import DESCRIPTIONS, REGISTRY, RegistryError, build_model, build_reference_pair
from .pathing import ConfigError
from .trainer import (Metrics, TrainConfig, TrainingDiverged, evaluate, pretrain_teacher, resolve_teacher,
                      train_offline, train_online)

log = logging.getLogger("fcfd")
DEFAULT_OUT = "fcfd-out"


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int = 3):
        super().__init__(message)
        self.category = category
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message.replace("\n", " "), 2)


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    command: list[str]
    artifacts: dict[str, str] = field(default_factory=dict)
    created: float = field(default_factory=time.time)
    finished: float | None = None

    def write(self, out: Path) -> None:
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# --- helpers -----------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get("FCFD_OUT") or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> TrainConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"optim.seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigNotFound as e:
        raise CliError("config:not-found", str(e)) from None
    except ConfigError as e:
        raise CliError("config:invalid", str(e)) from None
    return replace(cfg, device=args.device)


def _datasets(cfg: TrainConfig) -> tuple[ImageDataset, ImageDataset]:
    if cfg.data_dir:
        try:
            return load_data_dir(cfg.data_dir, cfg.num_classes)
        except FileNotFoundError as e:
            raise CliError("data:not-found", str(e)) from None
        except ValueError as e:  # includes ParseError
            raise CliError("data:invalid", str(e)) from None
    return desk_datasets(cfg.data_seed, cfg.num_classes, cfg.per_class, cfg.eval_per_class, cfg.image_size)


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError("checkpoint:not-found", f"{path} does not exist") from None
    except (CheckpointError, ValueError) as e:
        raise CliError("checkpoint:invalid", str(e)) from None


def _ckpt_config(ckpt, args) -> TrainConfig:
    if args.config:
        return _config(args)
    if "config" not in ckpt.meta:
        raise CliError("checkpoint:invalid", "checkpoint carries no config; pass --config")
    return config_from_dict(ckpt.meta["config"])


def _model_from(ckpt, prefix: str, cfg: TrainConfig):
    if prefix not in ckpt.manifest["models"]:
        raise CliError("checkpoint:invalid", f"checkpoint has no model {prefix!r}")
    role = ckpt.manifest["models"][prefix]["role"]
    model = build_model(cfg.pair, role, cfg.num_classes, cfg.image_size)
    try:
        return ckpt.load_model(model, prefix)
    except (CheckpointError, RuntimeError) as e:
        raise CliError("checkpoint:invalid", str(e).splitlines()[0]) from None


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


# --- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    if REGISTRY[cfg.pair] is None:
        raise CliError("config:invalid", f"model.pair: {cfg.pair!r} is a demo pair; use demo-toy")
    out = _out_dir(args)
    digest = config_hash(cfg)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        previous = json.loads(manifest_path.read_text()).get("config_hash")
        if previous != digest:
            raise CliError("config:run-dir-conflict",
                           f"{out} holds a run with config {previous}; use a fresh --out-dir")
    manifest = RunManifest(cfg.to_dict(), digest, ["train", *args.argv])
    artifacts = {"metrics": "metrics.jsonl", "student": "student.ckpt", "config": "config.ini"}
    if cfg.mode == "offline" and not cfg.teacher_ckpt:
        artifacts.update(teacher="teacher.ckpt", teacher_metrics="teacher-metrics.jsonl")
    manifest.artifacts = artifacts
    manifest.write(out)
    (out / "config.ini").write_text(config_to_ini(cfg))

    data = _datasets(cfg)
    meta = {"pair": cfg.pair, "config": cfg.to_dict(), "config_hash": digest}
    try:
        if cfg.mode == "offline":
            if cfg.teacher_ckpt:
                try:
                    teacher = resolve_teacher(cfg.teacher_ckpt, cfg)
                except FileNotFoundError:
                    raise CliError("checkpoint:not-found", f"{cfg.teacher_ckpt} does not exist") from None
                except CheckpointError as e:
                    raise CliError("checkpoint:invalid", str(e)) from None
            elif args.resume and (out / "teacher.ckpt").exists():
                teacher = resolve_teacher(str(out / "teacher.ckpt"), cfg)
                log.info("resumed teacher from %s", out / "teacher.ckpt")
            else:
                t = pretrain_teacher(cfg, data, Metrics(out / "teacher-metrics.jsonl"))
                teacher = t.student
                save_checkpoint(out / "teacher.ckpt", {"teacher": teacher},
                                meta={**meta, "accuracy": t.final_accuracy})
            result = train_offline(cfg, teacher, None, data, Metrics(out / "metrics.jsonl"))
            models = {"student": result.student}
        else:
            result = train_online(cfg, None, None, data, Metrics(out / "metrics.jsonl"))
            models = {"student": result.student, "teacher": result.teacher}
    except TrainingDiverged as e:
        raise CliError("numeric:diverged", str(e), 4) from None
    except NumericError as e:
        raise CliError("numeric:non-finite", str(e), 4) from None
    meta["accuracy"] = result.final_accuracy
    save_checkpoint(out / "student.ckpt", models, result.bridges, meta)
    manifest.finished = time.time()
    manifest.write(out)
    _emit({"event": "train", "accuracy": result.final_accuracy, "teacher_accuracy": result.teacher_accuracy,
           "out_dir": str(out), "config_hash": digest})
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    cfg = _ckpt_config(ckpt, args)
    model = _model_from(ckpt, args.model, cfg)
    _, held = _datasets(cfg)
    acc = evaluate(model, held)
    record = {"event": "eval", "checkpoint": str(args.checkpoint), "model": args.model, "accuracy": acc}
    out = _out_dir(args)
    (out / "eval.json").write_text(json.dumps(record, sort_keys=True) + "\n")
    _emit(record)
    return 0


def cmd_probe_sensitivity(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    cfg = _ckpt_config(ckpt, args)
    model = _model_from(ckpt, args.model, cfg)
    _, held = _datasets(cfg)
    n = min(args.samples, len(held)) if args.samples else len(held)
    x = to_tensor(held, slice(0, n))
    y = torch.from_numpy(held.labels[:n])
    if not 1 <= args.k <= model.num_stages:
        raise CliError("config:invalid", f"--k must lie in 1..{model.num_stages}")
    report = analysis.sensitivity_probe(model, args.k, args.directions, args.radius, x, y,
                                        seed=args.seed or 0)
    out = _out_dir(args)
    summary = {k: v for k, v in asdict(report).items() if k != "divergences"}
    (out / "sensitivity.json").write_text(json.dumps(asdict(report), sort_keys=True) + "\n")
    with open(out / "sensitivity.csv", "w", newline="") as f:
        w = csv.DictWriter(f, ["direction", "k", "radius", "divergence"])
        w.writeheader()
        w.writerows(report.rows())
    _emit({"event": "sensitivity", **summary})
    return 0


def cmd_probe_exit(args) -> int:
    t_ckpt = _load_ckpt(args.teacher)
    cfg = _ckpt_config(t_ckpt, args)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    teacher = _model_from(t_ckpt, "teacher", cfg)
    data = _datasets(cfg)
    schedule = replace(cfg, epochs=args.branch_epochs,
                       lr_milestones=tuple(round(m * args.branch_epochs / cfg.epochs) for m in cfg.lr_milestones))
    branch = analysis.train_exit_branch(teacher, args.k, data, schedule)
    record = {"event": "exit-probe", "k": args.k, "branch_accuracy": branch.history[-1]["accuracy"],
              "branch_params": branch.param_count(),
              "teacher_tail_params": analysis.tail_param_count(teacher, args.k), "students": {}}
    for path in args.student:
        s_ckpt = _load_ckpt(path)
        s_cfg = config_from_dict(s_ckpt.meta["config"]) if "config" in s_ckpt.meta else cfg
        student = _model_from(s_ckpt, "student", s_cfg)
        positions = sorted({e["position"] for e in s_ckpt.manifest["bridges"] or []})
        if args.k not in positions:
            raise CliError("checkpoint:invalid", f"{path} has no bridge at k={args.k} (has {positions})")
        bridges = s_ckpt.load_bridges(build_bridge_set(teacher, student, positions))
        acc = analysis.cross_probe(copy.deepcopy(branch), student, bridges.st(args.k), data,
                                   recalibrate=not args.no_recalibrate)
        record["students"][str(path)] = acc
    out = _out_dir(args)
    (out / "exit-probe.json").write_text(json.dumps(record, sort_keys=True) + "\n")
    _emit(record)
    return 0


def cmd_demo_toy(args) -> int:
    print(analysis.format_toy_demo(analysis.toy_demo()))
    return 0


def cmd_data_convert(args) -> int:
    try:
        images, labels = read_cifar_binary(args.input, cifar100=args.format == "cifar100", coarse=args.coarse)
    except FileNotFoundError as e:
        raise CliError("data:not-found", str(e)) from None
    except ValueError as e:  # includes ParseError
        raise CliError("data:invalid", str(e)) from None
    num_classes = args.num_classes or int(labels.max()) + 1
    ds = ImageDataset(images, labels, num_classes, args.split)
    out = _out_dir(args)
    paths = [out / f"{args.split}-images.idx", out / f"{args.split}-labels.idx"]
    write_idx_dataset(ds, *paths)
    _emit({"event": "data-convert", "count": len(ds), "num_classes": num_classes, "files": [str(p) for p in paths]})
    return 0


def cmd_data_synth(args) -> int:
    cfg = _config(args)
    seed = cfg.data_seed if args.seed is None else args.seed
    train = make_synthetic(cfg.num_classes, cfg.per_class, cfg.image_size, seed, "train")
    held = make_synthetic(cfg.num_classes, cfg.eval_per_class, cfg.image_size, seed, "eval")
    paths = write_data_dir(_out_dir(args), train, held)
    _emit({"event": "data-synth", "train": len(train), "eval": len(held), "files": [str(p) for p in paths]})
    return 0


def cmd_models(args) -> int:
    for name in sorted(REGISTRY):
        teacher, student = build_reference_pair(name)
        print(f"{name:<18} N={teacher.num_stages}  teacher {teacher.param_count():>7} params  "
              f"student {student.param_count():>7} params  {DESCRIPTIONS[name]}")
    return 0


# --- dispatch --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI (or .json) run configuration")
    common.add_argument("--seed", type=int, help="seed for every random choice of the command")
    common.add_argument("--out-dir", help=f"output directory (default: $FCFD_OUT or ./{DEFAULT_OUT})")
    common.add_argument("--device", default="cpu", choices=["cpu"], help="compute device")
    common.add_argument("--resume", action="store_true", help="reuse a teacher checkpoint already in --out-dir")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="fcfd", description="Function-consistent feature distillation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=func)
        return p

    add("train", cmd_train, "train a student (and a teacher when none is given)")
    p = add("eval", cmd_eval, "evaluate a model stored in a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", default="student", help="model name inside the checkpoint")
    p = add("probe-sensitivity", cmd_probe_sensitivity, "random-direction perturbation probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", default="teacher")
    p.add_argument("--k", type=int, default=2, help="stage whose output is perturbed")
    p.add_argument("--directions", type=int, default=512)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=0, help="eval samples to use (0 = all)")
    p = add("probe-exit", cmd_probe_exit, "train an exit branch on the teacher and probe students through it")
    p.add_argument("--teacher", required=True, help="checkpoint holding the teacher")
    p.add_argument("--student", action="append", default=[], help="student checkpoint (repeatable)")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--branch-epochs", type=int, default=15)
    p.add_argument("--no-recalibrate", action="store_true")
    add("demo-toy", cmd_demo_toy, "print the polynomial toy example")
    p = add("data-convert", cmd_data_convert, "convert CIFAR binary batches to the IDX-style format")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--split", default="train", choices=["train", "eval"])
    p.add_argument("--format", default="cifar10", choices=["cifar10", "cifar100"], help="record layout")
    p.add_argument("--coarse", action="store_true", help="CIFAR-100: use coarse labels")
    p.add_argument("--num-classes", type=int)
    add("data-synth", cmd_data_synth, "write the synthetic dataset in the IDX-style format")
    p = add("models", cmd_models, "model registry")
    p.add_argument("action", choices=["list"])
    return parser


def cli_dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.argv = list(argv[1:])
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        torch.manual_seed(args.seed or 0)
        return args.func(args)
    except CliError as e:
        print(f"error {e.category}: {e}", file=sys.stderr)
        return e.code
    except RegistryError as e:
        print(f"error config:invalid: {e.args[0]}", file=sys.stderr)
        return 3
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
