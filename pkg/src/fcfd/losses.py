"""Distillation objectives: task, KD, appearance, function and function-prime terms.

"L2" between features is the mean squared error over all elements.  KL terms
are ``tau**2 * KL(p_teacher || p_other)`` averaged over the batch, with one
temperature shared by every KL term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .bridges import BridgeSet
from .pathing import PathSpec
from .staged import FeatureMap, StagedModel, forward_from, forward_full


class NumericError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class LossWeights:
    w_task: float = 1.0
    w_kd: float = 1.0
    # shared by L_app and the L2 terms of L_func (and L_func'-L2)
    w_app: float = 5.0
    # shared by the KL term of L_func and by L_func'
    w_func_kl: float = 0.2
    temperature: float = 4.0
    func_mode: str = "full"
    use_task: bool = True
    use_kd: bool = True
    use_app: bool = True
    use_func_kl: bool = True
    use_func_l2: bool = True
    use_func_prime: bool = True
    include_func_prime_l2: bool = False

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        for name in ("w_task", "w_kd", "w_app", "w_func_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.func_mode not in ("full", "partial"):
            raise ValueError(f"func_mode must be 'full' or 'partial', got {self.func_mode!r}")

    @property
    def func_enabled(self) -> bool:
        return self.use_func_kl or self.use_func_l2

    @property
    def func_prime_enabled(self) -> bool:
        return self.use_func_prime or self.include_func_prime_l2

    def path_deltas(self) -> tuple[int, ...]:
        """Switch directions worth sampling given the enabled terms."""
        return tuple(d for d, on in ((0, self.func_prime_enabled), (1, self.func_enabled)) if on)


def _check_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"{name}: non-finite values")


def kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, tau: float) -> torch.Tensor:
    """``tau^2 * KL(softmax(z_t/tau) || softmax(z_s/tau))``, batch mean."""
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(f"logit shapes differ: {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}")
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    _check_finite("kd logits", teacher_logits, student_logits)
    log_p_t = F.log_softmax(teacher_logits / tau, dim=1)
    log_p_s = F.log_softmax(student_logits / tau, dim=1)
    kl = F.kl_div(log_p_s, log_p_t, reduction="batchmean", log_target=True)
    return kl * tau ** 2


def app_loss(teacher_feature, bridged_student, k: int | None = None) -> torch.Tensor:
    a = teacher_feature.values if isinstance(teacher_feature, FeatureMap) else teacher_feature
    b = bridged_student.values if isinstance(bridged_student, FeatureMap) else bridged_student
    if a.shape != b.shape:
        raise ShapeError(f"appearance loss at k={k}: teacher {tuple(a.shape)} vs bridged student {tuple(b.shape)}")
    return F.mse_loss(b, a)


def fd_distance(a: torch.Tensor, b: torch.Tensor, is_distribution: bool, tau: float = 1.0) -> torch.Tensor:
    """KD-style KL on logits when ``is_distribution``, else mean squared error.

    ``a`` is the reference (teacher-side) value.
    """
    if a.shape != b.shape:
        raise ShapeError(f"fd_distance: {tuple(a.shape)} vs {tuple(b.shape)}")
    if is_distribution:
        return kd_loss(a, b, tau)
    return F.mse_loss(b, a)


def func_loss(teacher: StagedModel, teacher_feature: FeatureMap, bridged_student: FeatureMap, k: int,
              mode: str = "full", tau: float = 1.0,
              teacher_targets: dict[int, torch.Tensor] | None = None) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Compare teacher-tail outputs of ``F_t^k`` and of the bridged student feature.

    Returns the unweighted sum and the per-``l`` terms, ``l`` in ``k+1 .. N+1``
    (``l = N+1`` is the KL term on logits, or squared error for a scalar head).  ``mode="partial"`` keeps only
    ``l = k+1``.  ``teacher_targets`` maps ``l`` to cached pure-teacher outputs;
    missing entries are recomputed from ``teacher_feature``.  Targets are detached.
    """
    n = teacher.num_stages
    expected = teacher.stage_output_shapes[k - 1]
    if bridged_student.shape != expected:
        raise ShapeError(f"func loss at k={k}: bridged student {bridged_student.shape} vs teacher {expected}")
    last = k + 1 if mode == "partial" else n + 1
    terms: dict[int, torch.Tensor] = {}
    cur = bridged_student
    tgt_cur = teacher_feature
    for l in range(k + 1, last + 1):
        out = forward_from(teacher, cur, l - 1, l)
        if teacher_targets is not None and l in teacher_targets:
            target = teacher_targets[l]
        else:
            target_out = forward_from(teacher, tgt_cur, l - 1, l)
            target = target_out if l == n + 1 else target_out.values
            if l <= n:
                tgt_cur = target_out
        if l <= n:
            terms[l] = fd_distance(target.detach(), out.values, False)
            cur = out
        else:
            # a single-output head is a regression output: KL over one class is always 0
            terms[l] = fd_distance(target.detach(), out, teacher.num_classes > 1, tau)
    return sum(terms.values()), terms


def func_prime_loss(teacher_logits: torch.Tensor, hybrid_logits: torch.Tensor, tau: float) -> torch.Tensor:
    return kd_loss(teacher_logits, hybrid_logits, tau)


def func_prime_l2(student: StagedModel, bridged_teacher: FeatureMap, k: int,
                  student_targets: dict[int, torch.Tensor]) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """L2 between student-tail features of the bridged teacher feature and of ``F_s^k``.

    Terms for ``l = k+1 .. N``; ``student_targets[l]`` holds the pure student
    feature at ``l`` and is detached.
    """
    terms: dict[int, torch.Tensor] = {}
    cur = bridged_teacher
    for l in range(k + 1, student.num_stages + 1):
        cur = forward_from(student, cur, l - 1, l)
        terms[l] = F.mse_loss(cur.values, student_targets[l].detach())
    total = sum(terms.values()) if terms else bridged_teacher.values.new_zeros(())
    return total, terms


@dataclass
class LossReport:
    num_stages: int
    task: float | None = None
    kd: float | None = None
    app: dict[int, float] = field(default_factory=dict)
    func: dict[tuple[int, int], float] = field(default_factory=dict)
    func_prime: dict[int, float] = field(default_factory=dict)
    func_prime_l2: dict[tuple[int, int], float] = field(default_factory=dict)
    teacher_task: float | None = None
    reverse_kd: float | None = None
    total: float = 0.0
    paths_used: list[PathSpec] = field(default_factory=list)
    loss: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def weighted_total(self, w: LossWeights) -> float:
        """Recompute the total from the reported terms."""
        total = 0.0
        if self.task is not None:
            total += w.w_task * self.task
        if self.kd is not None:
            total += w.w_kd * self.kd
        total += sum(w.w_app * v for v in self.app.values())
        for (k, l), v in self.func.items():
            total += (w.w_func_kl if l == self.num_stages + 1 else w.w_app) * v
        total += sum(w.w_func_kl * v for v in self.func_prime.values())
        total += sum(w.w_app * v for v in self.func_prime_l2.values())
        if self.teacher_task is not None:
            total += w.w_task * self.teacher_task
        if self.reverse_kd is not None:
            total += w.w_kd * self.reverse_kd
        return total

    def terms(self) -> dict[str, float]:
        out: dict[str, float] = {}
        if self.task is not None:
            out["task"] = self.task
        if self.kd is not None:
            out["kd"] = self.kd
        for k, v in sorted(self.app.items()):
            out[f"app/{k}"] = v
        for (k, l), v in sorted(self.func.items()):
            out[f"func/{k}/{'out' if l == self.num_stages + 1 else l}"] = v
        for k, v in sorted(self.func_prime.items()):
            out[f"func_prime/{k}"] = v
        for (k, l), v in sorted(self.func_prime_l2.items()):
            out[f"func_prime_l2/{k}/{l}"] = v
        if self.teacher_task is not None:
            out["teacher_task"] = self.teacher_task
        if self.reverse_kd is not None:
            out["reverse_kd"] = self.reverse_kd
        return out


def freeze(model: torch.nn.Module) -> None:
    for p in model.parameters():
        p.requires_grad_(False)


def total_loss(x: torch.Tensor, y: torch.Tensor, teacher: StagedModel, student: StagedModel,
               bridges: BridgeSet | None, paths: list[PathSpec], weights: LossWeights,
               positions: list[int] | tuple[int, ...] = (), teacher_frozen: bool = True,
               online: bool = False, reverse_kd: bool = True, cache: bool = True) -> LossReport:
    """Composite objective over the pure paths plus the sampled hybrid paths.

    ``positions`` are the appearance-matching positions (all of them, every
    iteration); ``paths`` are this iteration's sampled ``<k, delta>`` routes.
    With ``cache=False`` every term recomputes its prefixes from scratch.
    ``online`` adds the teacher's task loss and (with ``reverse_kd``) the KD
    term that teaches the teacher from the student.
    """
    w = weights
    n = student.num_stages
    tau = w.temperature
    if teacher_frozen:
        freeze(teacher)
    report = LossReport(num_stages=n, paths_used=list(paths))
    parts: list[tuple[str, float, torch.Tensor]] = []

    def add(name: str, weight: float, value: torch.Tensor) -> float:
        if not torch.isfinite(value):
            raise NumericError(f"non-finite loss term {name}")
        parts.append((name, weight, value))
        return value.item()

    def teacher_pass():
        if teacher_frozen:
            with torch.no_grad():
                return forward_full(teacher, x)
        return forward_full(teacher, x)

    needs_teacher = online or w.use_kd or (w.use_app and len(positions) > 0) or len(paths) > 0
    t_logits, t_feats = teacher_pass() if needs_teacher else (None, None)
    s_logits, s_feats = forward_full(student, x)

    if w.use_task:
        report.task = add("task", w.w_task, F.cross_entropy(s_logits, y))
    if w.use_kd:
        report.kd = add("kd", w.w_kd, kd_loss(t_logits.detach(), s_logits, tau))
    if online:
        report.teacher_task = add("teacher_task", w.w_task, F.cross_entropy(t_logits, y))
        if reverse_kd:
            report.reverse_kd = add("reverse_kd", w.w_kd, kd_loss(s_logits.detach(), t_logits, tau))

    bridged_st: dict[int, FeatureMap] = {}

    def bridged_student(k: int) -> FeatureMap:
        if not cache:
            _, feats = forward_full(student, x)
            return bridges.st(k).apply_to(feats[k - 1])
        if k not in bridged_st:
            bridged_st[k] = bridges.st(k).apply_to(s_feats[k - 1])
        return bridged_st[k]

    def teacher_feats():
        if cache:
            return t_logits, t_feats
        return teacher_pass()

    if w.use_app:
        for k in positions:
            _, tf = teacher_feats()
            report.app[k] = add(f"app/{k}", w.w_app, app_loss(tf[k - 1].values.detach(), bridged_student(k), k))

    for path in paths:
        k = path.k
        if path.delta == 1 and w.func_enabled:
            tl, tf = teacher_feats()
            targets = {l: tf[l - 1].values for l in range(k + 1, n + 1)}
            targets[n + 1] = tl
            try:
                _, terms = func_loss(teacher, tf[k - 1], bridged_student(k), k, w.func_mode, tau,
                                     targets if cache else None)
            except NumericError as e:
                raise NumericError(f"func on path {path}: {e}") from None
            for l, v in terms.items():
                is_kl = l == n + 1
                if (is_kl and w.use_func_kl) or (not is_kl and w.use_func_l2):
                    name = f"func/{k}/{'out' if is_kl else l}@{path}"
                    report.func[(k, l)] = add(name, w.w_func_kl if is_kl else w.w_app, v)
        elif path.delta == 0 and w.func_prime_enabled:
            tl, tf = teacher_feats()
            ft = tf[k - 1]
            ft = FeatureMap(ft.values.detach(), ft.origin_stage, ft.origin_model, ft.path_key)
            hybrid = bridges.ts(k).apply_to(ft)
            if w.use_func_prime:
                p_ts = forward_from(student, hybrid, k, n + 1)
                report.func_prime[k] = add(f"func_prime/{k}@{path}", w.w_func_kl,
                                           func_prime_loss(tl.detach(), p_ts, tau))
            if w.include_func_prime_l2 and k < n:
                if cache:
                    s_targets = {l: s_feats[l - 1].values for l in range(k + 1, n + 1)}
                else:
                    _, sf = forward_full(student, x)
                    s_targets = {l: sf[l - 1].values for l in range(k + 1, n + 1)}
                _, terms = func_prime_l2(student, hybrid, k, s_targets)
                for l, v in terms.items():
                    report.func_prime_l2[(k, l)] = add(f"func_prime_l2/{k}/{l}@{path}", w.w_app, v)

    if parts:
        loss = sum(weight * value for _, weight, value in parts)
    else:
        loss = s_logits.sum() * 0.0
    report.loss = loss
    report.total = loss.item()
    if not math.isfinite(report.total):
        raise NumericError("non-finite total loss")
    return report
