"""Staged networks: an ordered list of stage transforms plus a classifier head.

Teacher and student are both wrapped into :class:`StagedModel` so features can
be taken after any stage and re-entered into any later stage of either model.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .pathing import ROOT_KEY, PathKey, path_scope, set_default_key, shape_probe

Shape = tuple[int, int, int]


class InputShapeError(ValueError):
    pass


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    values: torch.Tensor
    origin_stage: int
    origin_model: str
    path_key: PathKey

    @property
    def shape(self) -> Shape:
        return tuple(self.values.shape[1:])


class StagedModel(nn.Module):
    """Stages ``M^1..M^N`` followed by a classifier ``C``.

    ``role`` is ``"teacher"`` or ``"student"`` (anything else is allowed for
    auxiliary networks); its first letter tags the module identifiers used in
    path keys, e.g. ``Mt3`` or ``Cs``.
    """

    def __init__(self, name: str, stages: Sequence[nn.Module], classifier: nn.Module,
                 input_shape: Shape, num_classes: int, role: str = "student", tag: str | None = None,
                 post_relu_features: bool = False):
        super().__init__()
        self.post_relu_features = post_relu_features
        if len(stages) < 1:
            raise ValueError("a staged model needs at least one stage")
        self.id = name
        self.role = role
        self.tag = tag or role[0]
        self.stages = nn.ModuleList(stages)
        self.classifier = classifier
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        for i, stage in enumerate(self.stages, start=1):
            set_default_key(stage, self.pure_key(i - 1))
        self.stage_output_shapes = self._trace_shapes()

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage_token(self, i: int) -> str:
        return f"M{self.tag}{i}" if i <= self.num_stages else f"C{self.tag}"

    def pure_key(self, k: int) -> PathKey:
        """Key of the pure-path feature after stage ``k`` (``k = 0`` is the input)."""
        return ROOT_KEY.extend(*(self.stage_token(i) for i in range(1, k + 1)))

    def _trace_shapes(self) -> list[Shape]:
        dtype = next((p.dtype for p in self.parameters() if p.is_floating_point()), torch.float32)
        x = torch.zeros((2,) + self.input_shape, dtype=dtype)
        shapes = []
        with torch.no_grad(), shape_probe():
            for stage in self.stages:
                x = stage(x)
                shapes.append(tuple(x.shape[1:]))
            out = self.classifier(x)
        if out.shape[1:] != (self.num_classes,):
            raise ValueError(f"{self.id}: classifier yields {tuple(out.shape[1:])}, "
                             f"expected ({self.num_classes},)")
        return shapes

    def run(self, x: torch.Tensor, key: PathKey, start: int, stop: int) -> tuple[torch.Tensor, PathKey]:
        """Apply stages ``start+1 .. stop`` (``stop = N+1`` includes the classifier)."""
        for i in range(start + 1, stop + 1):
            module = self.stages[i - 1] if i <= self.num_stages else self.classifier
            with path_scope(key):
                x = module(x)
            key = key.extend(self.stage_token(i))
        return x, key

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.run(x, ROOT_KEY, 0, self.num_stages + 1)[0]

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def check_input(model: StagedModel, batch: torch.Tensor) -> None:
    if batch.dim() != len(model.input_shape) + 1 or tuple(batch.shape[1:]) != model.input_shape:
        raise InputShapeError(
            f"{model.id}: expected input of shape (batch, {', '.join(map(str, model.input_shape))}), "
            f"got {tuple(batch.shape)}")


def forward_full(model: StagedModel, batch: torch.Tensor) -> tuple[torch.Tensor, list[FeatureMap]]:
    """Pure forward pass returning logits and the features after every stage."""
    check_input(model, batch)
    feats = []
    x, key = batch, ROOT_KEY
    for k in range(1, model.num_stages + 1):
        x, key = model.run(x, key, k - 1, k)
        feats.append(FeatureMap(x, k, model.role, key))
    logits, _ = model.run(x, key, model.num_stages, model.num_stages + 1)
    return logits, feats


def forward_from(model: StagedModel, feature: FeatureMap, start_stage: int, stop_stage: int):
    """Compose stages ``start_stage+1 .. stop_stage`` onto ``feature``.

    Returns a :class:`FeatureMap` for ``stop_stage <= N`` and a logits tensor
    for ``stop_stage = N+1``.  The result's path key extends ``feature.path_key``.
    """
    n = model.num_stages
    k, l = start_stage, stop_stage
    if not (1 <= k < l <= n + 1):
        raise RoutingError(f"{model.id}: need 1 <= start < stop <= {n + 1}, got start={k}, stop={l}")
    expected = model.stage_output_shapes[k - 1]
    if feature.shape != expected:
        raise RoutingError(f"{model.id}: stage {k + 1} expects input {expected}, got {feature.shape}")
    x, key = model.run(feature.values, feature.path_key, k, l)
    if l == n + 1:
        return x
    return FeatureMap(x, l, model.role, key)
