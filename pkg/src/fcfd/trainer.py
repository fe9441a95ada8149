"""Offline and online distillation loops, plain training and evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn

from .bridges import BridgeSet, build_bridge_set
from .checkpoint import load_checkpoint
from .data import ImageDataset, iterate_batches
from .losses import LossReport, LossWeights, NumericError, freeze, total_loss
from .models import build_model
from .pathing import ConfigError, SamplerConfig, norm_policy, routed_norms, sample_paths
from .staged import StagedModel, forward_full

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    pair: str = "tiny-hetero-pair"
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 0.05
    lr_milestones: tuple[int, ...] = (18, 24)
    lr_decay: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "offline"
    seed: int = 0
    eval_every: int = 1
    teacher_frozen: bool = True
    reverse_kd: bool = True
    augment: bool = True
    device: str = "cpu"
    # data
    num_classes: int = 10
    per_class: int = 300
    eval_per_class: int = 300
    image_size: int = 32
    data_seed: int = 0
    data_dir: str = ""
    teacher_ckpt: str = ""
    teacher_epochs: int | None = None

    def validate(self, num_stages: int | None = None) -> None:
        if self.epochs < 1:
            raise ConfigError("optim.epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("data.batch_size must be >= 2 (batch statistics need two samples)")
        ms = list(self.lr_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"optim.lr_milestones must be strictly increasing: {ms}")
        if ms and ms[-1] >= self.epochs:
            raise ConfigError(f"optim.lr_milestones must be < epochs ({self.epochs}): {ms}")
        if self.mode not in ("offline", "online"):
            raise ConfigError(f"model.mode must be 'offline' or 'online', got {self.mode!r}")
        if self.eval_every < 1:
            raise ConfigError("optim.eval_every must be >= 1")
        try:
            self.weights.validate()
        except ValueError as e:
            raise ConfigError(f"losses: {e}") from None
        self.effective_sampler().validate(num_stages)

    def effective_sampler(self) -> SamplerConfig:
        """Sampler restricted to the switch directions whose losses are enabled."""
        deltas = self.weights.path_deltas() or (0, 1)
        return replace(self.sampler, deltas=deltas, rng_seed=self.sampler.rng_seed * 1_000_003 + self.seed)

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.lr_decay ** sum(1 for m in self.lr_milestones if epoch >= m)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["sampler"]["candidate_positions"] = list(self.sampler.candidate_positions)
        d["sampler"]["deltas"] = list(self.sampler.deltas)
        return d


@dataclass
class RunState:
    iteration: int = 0
    epoch: int = 0
    best_eval_accuracy: float = 0.0
    data_generator: torch.Generator | None = None


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_report: LossReport | None):
        super().__init__(message)
        self.last_report = last_report


class Metrics:
    """Newline-delimited JSON records, kept in memory and optionally on disk."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("")

    def log(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def evals(self) -> list[dict]:
        return [r for r in self.records if r["event"] == "eval"]


@dataclass
class TrainResult:
    student: StagedModel
    bridges: BridgeSet | None
    metrics: Metrics
    final_accuracy: float
    state: RunState
    teacher: StagedModel | None = None
    teacher_accuracy: float | None = None


def derived_seed(seed: int, stream: str) -> int:
    streams = {"init": 1, "data": 2, "bridges": 3, "teacher": 4}
    return seed * 7919 + streams[stream]


class HybridModel(nn.Module):
    """Route ``x`` through one model up to stage ``k``, a bridge, then the other model."""

    def __init__(self, first: StagedModel, bridge: nn.Module, second: StagedModel, k: int):
        super().__init__()
        self.first, self.bridge, self.second, self.k = first, bridge, second, k

    def forward(self, x):
        _, feats = forward_full(self.first, x)
        hybrid = self.bridge.apply_to(feats[self.k - 1])
        out, _ = self.second.run(hybrid.values, hybrid.path_key, self.k, self.second.num_stages + 1)
        return out


@torch.no_grad()
def predict(model: Callable, ds: ImageDataset, batch_size: int = 500, policy: str = "strict",
            dtype=torch.float32) -> torch.Tensor:
    was_training = model.training if isinstance(model, nn.Module) else None
    if isinstance(model, nn.Module):
        model.eval()
    try:
        with norm_policy(policy):
            preds = [model(b.x).argmax(1) for b in iterate_batches(ds, batch_size, dtype=dtype)]
    finally:
        if was_training:
            model.train()
    return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)


def evaluate(model: Callable, ds: ImageDataset, policy: str = "strict", batch_size: int = 500) -> float:
    """Top-1 accuracy with eval-mode normalization; never mutates running statistics."""
    if len(ds) == 0:
        return 0.0
    preds = predict(model, ds, batch_size, policy)
    return (preds == torch.from_numpy(ds.labels)).double().mean().item()


def _optimizer(params, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _record(report: LossReport, state: RunState, lr: float) -> dict:
    rec = {"event": "iter", "iteration": state.iteration, "epoch": state.epoch, "lr": lr,
           "paths": [str(p) for p in report.paths_used], "total": report.total}
    rec.update(report.terms())
    return rec


def train_plain(cfg: TrainConfig, model: StagedModel, data: tuple[ImageDataset, ImageDataset],
                metrics: Metrics | None = None, epochs: int | None = None) -> TrainResult:
    """Cross-entropy training of a single model (teacher pre-training, baselines)."""
    train, held = data
    metrics = metrics or Metrics()
    epochs = epochs or cfg.epochs
    sched = replace(cfg, epochs=epochs, lr_milestones=tuple(round(m * epochs / cfg.epochs) for m in cfg.lr_milestones))
    opt = _optimizer(model.parameters(), cfg)
    state = RunState(data_generator=torch.Generator().manual_seed(derived_seed(cfg.seed, "data")))
    acc = 0.0
    for epoch in range(epochs):
        state.epoch = epoch
        lr = sched.lr_at(epoch)
        _set_lr(opt, lr)
        model.train()
        for batch in iterate_batches(train, cfg.batch_size, True, state.data_generator, cfg.augment, True):
            loss = nn.functional.cross_entropy(model(batch.x), batch.y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at iteration {state.iteration}", None)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            metrics.log({"event": "iter", "iteration": state.iteration, "epoch": epoch, "lr": lr,
                         "task": loss.item(), "total": loss.item(), "paths": []})
            state.iteration += 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch == epochs - 1:
            acc = evaluate(model, held)
            state.best_eval_accuracy = max(state.best_eval_accuracy, acc)
            metrics.log({"event": "eval", "epoch": epoch, "iteration": state.iteration, "accuracy": acc})
    model.eval()
    return TrainResult(model, None, metrics, acc, state)


def resolve_teacher(teacher, cfg: TrainConfig) -> StagedModel:
    if isinstance(teacher, StagedModel):
        return teacher
    ckpt = load_checkpoint(teacher)
    model = build_model(cfg.pair, "teacher", cfg.num_classes, cfg.image_size, seed=0)
    return ckpt.load_model(model, "teacher")


def _distill(cfg: TrainConfig, teacher: StagedModel, student: StagedModel,
             data: tuple[ImageDataset, ImageDataset], metrics: Metrics | None,
             bridges: BridgeSet | None, online: bool) -> TrainResult:
    cfg.validate(student.num_stages)
    if teacher.num_stages != student.num_stages:
        raise ConfigError(f"teacher has N={teacher.num_stages} stages but student has N={student.num_stages}")
    train, held = data
    metrics = metrics or Metrics()
    sampler = cfg.effective_sampler()
    w = cfg.weights
    positions = sampler.candidate_positions
    sample = bool(w.path_deltas())
    if bridges is None and (w.use_app or sample):
        bridges = build_bridge_set(teacher, student, positions, seed=derived_seed(cfg.seed, "bridges"))

    frozen = cfg.teacher_frozen and not online
    if frozen:
        freeze(teacher)
    params = list(student.parameters()) + (list(bridges.parameters()) if bridges is not None else [])
    groups = [{"params": params}]
    if online:
        groups.append({"params": list(teacher.parameters())})
    opt = _optimizer(groups, cfg)

    state = RunState(data_generator=torch.Generator().manual_seed(derived_seed(cfg.seed, "data")))
    acc = 0.0
    report = None
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lr = cfg.lr_at(epoch)
        _set_lr(opt, lr)
        # teacher BN runs on batch statistics so pure and hybrid teacher passes agree;
        # hybrid keys accumulate their own running statistics
        teacher.train()
        student.train()
        if bridges is not None:
            bridges.train()
        for batch in iterate_batches(train, cfg.batch_size, True, state.data_generator, cfg.augment, True):
            paths = sample_paths(sampler, state.iteration) if sample else []
            try:
                report = total_loss(batch.x, batch.y, teacher, student, bridges, paths, w, positions,
                                    teacher_frozen=frozen, online=online, reverse_kd=cfg.reverse_kd)
            except NumericError as e:
                raise TrainingDiverged(f"iteration {state.iteration}: {e}", report) from None
            opt.zero_grad(set_to_none=True)
            report.loss.backward()
            opt.step()
            metrics.log(_record(report, state, lr))
            state.iteration += 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            acc = evaluate(student, held)
            state.best_eval_accuracy = max(state.best_eval_accuracy, acc)
            rec = {"event": "eval", "epoch": epoch, "iteration": state.iteration, "accuracy": acc}
            if online:
                rec["teacher_accuracy"] = evaluate(teacher, held)
            metrics.log(rec)
    student.eval()
    teacher.eval()
    t_acc = metrics.evals()[-1].get("teacher_accuracy") if online else None
    return TrainResult(student, bridges, metrics, acc, state, teacher, t_acc)


def train_offline(cfg: TrainConfig, teacher, student: StagedModel | None,
                  data: tuple[ImageDataset, ImageDataset], metrics: Metrics | None = None,
                  bridges: BridgeSet | None = None) -> TrainResult:
    """Distil a frozen teacher (model or FCFD-CKPT-1 path) into ``student``."""
    teacher = resolve_teacher(teacher, cfg)
    if student is None:
        student = build_model(cfg.pair, "student", cfg.num_classes, cfg.image_size,
                              seed=derived_seed(cfg.seed, "init"))
    return _distill(cfg, teacher, student, data, metrics, bridges, online=False)


def train_online(cfg: TrainConfig, teacher: StagedModel | None, student: StagedModel | None,
                 data: tuple[ImageDataset, ImageDataset], metrics: Metrics | None = None,
                 bridges: BridgeSet | None = None) -> TrainResult:
    """Mutual training from scratch: teacher task loss and reverse KD are added."""
    if teacher is None:
        teacher = build_model(cfg.pair, "teacher", cfg.num_classes, cfg.image_size,
                              seed=derived_seed(cfg.seed, "teacher"))
    if student is None:
        student = build_model(cfg.pair, "student", cfg.num_classes, cfg.image_size,
                              seed=derived_seed(cfg.seed, "init"))
    return _distill(cfg, teacher, student, data, metrics, bridges, online=True)


def pretrain_teacher(cfg: TrainConfig, data: tuple[ImageDataset, ImageDataset],
                     metrics: Metrics | None = None) -> TrainResult:
    teacher = build_model(cfg.pair, "teacher", cfg.num_classes, cfg.image_size,
                          seed=derived_seed(cfg.seed, "teacher"))
    return train_plain(cfg, teacher, data, metrics, epochs=cfg.teacher_epochs)


def norm_checksum(model: nn.Module) -> float:
    """Sum over every routed running statistic; used to check evaluation purity."""
    total = 0.0
    for m in routed_norms(model):
        for st in m.stats.values():
            total += st.running_mean.double().sum().item() + st.running_var.double().sum().item() + st.update_count
    return total
