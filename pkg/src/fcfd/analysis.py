"""Diagnostic probes: the polynomial toy example, random-direction sensitivity,
and exit branches that read teacher features at an intermediate position."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bridges import Bridge
from .data import ImageDataset, iterate_batches
from .losses import app_loss
from .models import build_tail, teacher_arch, toy_pair
from .pathing import PathKey, cumulative_stats, norm_policy, routed_norms
from .staged import FeatureMap, StagedModel, forward_from, forward_full
from .trainer import TrainConfig, TrainingDiverged, derived_seed


# --- toy example -----------------------------------------------------------

def toy_output(m1, m2):
    return m1 ** 4 + 5 * m2 ** 2


def toy_demo(ring_points: int = 16) -> dict:
    """Baseline, the two axis-aligned candidates and a unit ring around (4, 4).

    Integer points are evaluated exactly; every value is also pushed through
    the staged toy teacher in float64 and checked against the exact result.
    """
    teacher, _ = toy_pair()
    teacher = teacher.double()
    x = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    out, feats = forward_full(teacher, x)
    m = tuple(int(v) for v in feats[0].values.flatten().tolist())
    base = toy_output(Fraction(m[0]), Fraction(m[1]))
    assert out.item() == float(base)

    def row(point):
        p = torch.tensor(point, dtype=torch.float64).view(1, 2, 1, 1)
        routed = forward_from(teacher, FeatureMap(p, 1, "student", PathKey(("probe",))), 1, 2).item()
        exact = toy_output(Fraction(point[0]), Fraction(point[1])) if all(float(c).is_integer() for c in point) else None
        if exact is not None:
            assert routed == float(exact)
        value = exact if exact is not None else routed
        app = app_loss(feats[0].values, p).item()
        return {"point": point, "output": value, "deviation": abs(value - base), "app": app}

    candidates = [row((3, 4)), row((4, 3))]
    ring = [row((m[0] + math.cos(a), m[1] + math.sin(a)))
            for a in np.linspace(0, 2 * math.pi, ring_points, endpoint=False)]
    return {"input": 1, "feature": m, "baseline_output": base, "candidates": candidates, "ring": ring}


def format_toy_demo(result: dict) -> str:
    lines = [f"x = {result['input']}  feature (m1, m2) = {result['feature']}  output = {result['baseline_output']}",
             "candidate   output   deviation   L_app"]
    for r in result["candidates"]:
        lines.append(f"{str(tuple(r['point'])):<10}  {str(r['output']):>6}   {str(r['deviation']):>9}   {r['app']:.4f}")
    lines.append("unit ring around the target (equal L_app, varying deviation):")
    for r in result["ring"]:
        p = "(%.3f, %.3f)" % r["point"]
        lines.append(f"  {p:<16} output {float(r['output']):9.3f}  deviation {float(r['deviation']):8.3f}  L_app {r['app']:.4f}")
    return "\n".join(lines)


# --- sensitivity probe -----------------------------------------------------

@dataclass
class SensitivityReport:
    k: int
    radius: float
    divergences: list[float]
    min: float
    mean: float
    max: float
    clean_accuracy: float | None = None
    worst_accuracy: float | None = None
    best_accuracy: float | None = None

    def rows(self) -> list[dict]:
        return [{"direction": i, "k": self.k, "radius": self.radius, "divergence": d}
                for i, d in enumerate(self.divergences)]


def random_directions(num: int, dim: int, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    """``num`` directions uniform on the unit sphere in ``dim`` dimensions."""
    g = torch.Generator().manual_seed(seed)
    d = torch.randn(num, dim, generator=g, dtype=torch.float64)
    return (d / d.norm(dim=1, keepdim=True)).to(dtype)


def _divergence(ref: torch.Tensor, out: torch.Tensor, scalar: bool) -> torch.Tensor:
    if scalar:
        return (out - ref).abs().flatten(1).sum(1)
    log_p = F.log_softmax(ref, 1)
    return (log_p.exp() * (log_p - F.log_softmax(out, 1))).sum(1)


@torch.no_grad()
def sensitivity_probe(model: StagedModel, k: int, num_directions: int = 512, radius: float = 1.0,
                      batch: torch.Tensor | None = None, labels: torch.Tensor | None = None,
                      directions: torch.Tensor | None = None, seed: int = 0,
                      chunk: int = 500) -> SensitivityReport:
    """Move ``F^k`` by ``radius`` along each direction and measure the output change.

    Divergence is KL(p_before || p_after) for classifier heads and absolute
    deviation for scalar heads, averaged over the batch.  With ``labels``, the
    report also holds accuracy when each sample takes its worst (largest
    divergence) or best (smallest) direction.
    """
    if not 1 <= k <= model.num_stages:
        raise ValueError(f"k={k} out of range 1..{model.num_stages}")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    shape = model.stage_output_shapes[k - 1]
    dim = int(np.prod(shape))
    if directions is None:
        directions = random_directions(num_directions, dim, seed)
    directions = directions.reshape(len(directions), *shape)
    scalar = model.num_classes == 1
    model.eval()
    div_sum = torch.zeros(len(directions), dtype=torch.float64)
    correct = {"clean": 0, "worst": 0, "best": 0}
    total = 0
    for start in range(0, len(batch), chunk):
        xb = batch[start:start + chunk]
        ref, feats = forward_full(model, xb)
        f = feats[k - 1]
        dirs = directions.to(f.values.dtype)
        per = torch.empty(len(dirs), len(xb), dtype=torch.float64)
        preds = torch.empty(len(dirs), len(xb), dtype=torch.long)
        for i, d in enumerate(dirs):
            moved = FeatureMap(f.values + radius * d, k, f.origin_model, f.path_key)
            out = forward_from(model, moved, k, model.num_stages + 1)
            per[i] = _divergence(ref, out, scalar).double()
            preds[i] = out.argmax(1)
        div_sum += per.sum(1)
        total += len(xb)
        if labels is not None:
            yb = labels[start:start + chunk]
            cols = torch.arange(len(xb))
            correct["clean"] += (ref.argmax(1) == yb).sum().item()
            correct["worst"] += (preds[per.argmax(0), cols] == yb).sum().item()
            correct["best"] += (preds[per.argmin(0), cols] == yb).sum().item()
    divs = (div_sum / total).tolist()
    report = SensitivityReport(k, radius, divs, min(divs), sum(divs) / len(divs), max(divs))
    if labels is not None:
        report.clean_accuracy = correct["clean"] / total
        report.worst_accuracy = correct["worst"] / total
        report.best_accuracy = correct["best"] / total
    return report


# --- exit branches ---------------------------------------------------------

@dataclass
class ExitBranch:
    """A classifier reading features at position ``k`` of the teacher.

    ``net`` is applied from stage ``start`` on: 0 for a dedicated tail network,
    ``k`` when ``net`` is a copy of the teacher itself.
    """
    k: int
    net: StagedModel
    start: int = 0
    source_key: PathKey | None = None
    history: list[dict] = field(default_factory=list)

    def __call__(self, feature: FeatureMap) -> torch.Tensor:
        out, _ = self.net.run(feature.values, feature.path_key, self.start, self.net.num_stages + 1)
        return out

    def bind_source(self, key: PathKey) -> None:
        """Make ``key`` the fallback statistics key (the key the branch was trained on)."""
        self.source_key = key
        cur = key
        for i in range(self.start + 1, self.net.num_stages + 1):
            for m in routed_norms(self.net.stages[i - 1]):
                m.default_key = cur
            cur = cur.extend(self.net.stage_token(i))

    def param_count(self) -> int:
        n = self.net.num_stages
        if self.start == 0:
            return self.net.param_count()
        return sum(p.numel() for i in range(self.start, n) for p in self.net.stages[i].parameters()) + \
            sum(p.numel() for p in self.net.classifier.parameters())


def tail_param_count(model: StagedModel, k: int) -> int:
    return sum(p.numel() for s in model.stages[k:] for p in s.parameters()) + \
        sum(p.numel() for p in model.classifier.parameters())


def copy_branch(teacher: StagedModel, k: int) -> ExitBranch:
    """The teacher's own remaining stages and head as an exit branch."""
    net = copy.deepcopy(teacher)
    branch = ExitBranch(k, net, start=k)
    branch.bind_source(teacher.pure_key(k))
    return branch


def build_exit_branch(teacher: StagedModel, pair: str, k: int, width: int = 2, seed: int = 0) -> ExitBranch:
    """Teacher architecture tail after ``k`` with ``width`` times the channels."""
    c, h, _ = teacher.stage_output_shapes[k - 1]
    net = build_tail(f"exit-branch@{k}", teacher_arch(pair).widened(width), k, c, teacher.num_classes, h, seed=seed)
    return ExitBranch(k, net)


def _teacher_features(teacher: StagedModel, x: torch.Tensor, k: int) -> FeatureMap:
    with torch.no_grad():
        feats = forward_full(teacher, x)[1]
    return feats[k - 1]


def train_exit_branch(teacher: StagedModel, k: int, data: tuple[ImageDataset, ImageDataset],
                      schedule: TrainConfig, pair: str | None = None, branch: ExitBranch | None = None,
                      shuffle_labels: bool = False) -> ExitBranch:
    """Train a branch with cross-entropy on frozen teacher features at ``k``."""
    train, held = data
    if shuffle_labels:
        rng = np.random.default_rng(schedule.seed)
        train = train.with_labels(rng.permutation(train.labels))
    if branch is None:
        branch = build_exit_branch(teacher, pair or schedule.pair, k, seed=derived_seed(schedule.seed, "init"))
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    net = branch.net
    opt = torch.optim.SGD(net.parameters(), lr=schedule.base_lr, momentum=schedule.momentum,
                          weight_decay=schedule.weight_decay)
    gen = torch.Generator().manual_seed(derived_seed(schedule.seed, "data"))
    branch.bind_source(teacher.pure_key(k))
    for epoch in range(schedule.epochs):
        for g in opt.param_groups:
            g["lr"] = schedule.lr_at(epoch)
        net.train()
        for b in iterate_batches(train, schedule.batch_size, True, gen, schedule.augment, True):
            loss = F.cross_entropy(branch(_teacher_features(teacher, b.x, k)), b.y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"exit branch diverged in epoch {epoch}", None)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        branch.history.append({"epoch": epoch, "loss": loss.item()})
    net.eval()
    branch.history.append({"accuracy": branch_accuracy(branch, teacher, held)})
    return branch


@torch.no_grad()
def _probe_accuracy(branch: ExitBranch, feature_fn, ds: ImageDataset, policy: str = "strict") -> float:
    branch.net.eval()
    hits = 0
    with norm_policy(policy):
        for b in iterate_batches(ds, 500):
            hits += (branch(feature_fn(b.x)).argmax(1) == b.y).sum().item()
    return hits / len(ds)


def branch_accuracy(branch: ExitBranch, teacher: StagedModel, ds: ImageDataset) -> float:
    """Accuracy of the branch on the teacher's own features."""
    teacher.eval()
    return _probe_accuracy(branch, lambda x: _teacher_features(teacher, x, branch.k), ds)


def weight_checksum(module: nn.Module) -> float:
    return sum(p.detach().double().sum().item() for p in module.parameters())


@torch.no_grad()
def cross_probe(branch: ExitBranch, student: StagedModel, bridge: Bridge,
                data: tuple[ImageDataset, ImageDataset], recalibrate: bool = True,
                policy: str = "strict") -> float:
    """Top-1 accuracy of the branch fed with bridged student features.

    Recalibration re-estimates the branch's running statistics for the bridged
    student path key with one cumulative pass over the train split; branch
    weights are never touched.
    """
    train, held = data
    k = branch.k
    expected = branch.net.stage_output_shapes[branch.start - 1] if branch.start else branch.net.input_shape
    if tuple(bridge.out_shape) != tuple(expected):
        raise ValueError(f"bridge output {bridge.out_shape} does not match branch entry {tuple(expected)}")
    student.eval()
    bridge.eval()

    def feature(x):
        return bridge.apply_to(forward_full(student, x)[1][k - 1])

    if recalibrate:
        probe_key = feature(to_first(train)).path_key
        for m in routed_norms(branch.net):
            for key in list(m.stats):
                if key.tokens[:len(probe_key.tokens)] == probe_key.tokens:
                    m.reset_stats(key)
        branch.net.train()
        with cumulative_stats():
            for b in iterate_batches(train, 500):
                branch(feature(b.x))
        branch.net.eval()
    return _probe_accuracy(branch, feature, held, policy)


def to_first(ds: ImageDataset) -> torch.Tensor:
    return next(iterate_batches(ds, 2)).x
