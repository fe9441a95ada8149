"""Shape-adapting bridges between student and teacher feature spaces.

Each bridge is one convolution followed by one BatchNorm, plus a leaky ReLU
when the target feature is post-ReLU.  The convolution flavour is fixed by the
spatial ratio between source and target:

=========  ================  ======  ======  =======
ratio      kind              kernel  stride  padding
=========  ================  ======  ======  =======
same       stride1_conv      3       1       1
half       stride2_conv      3       2       1
double     transposed_conv   4       2       1
=========  ================  ======  ======  =======

Parameter count of a bridge mapping ``c_in`` to ``c_out`` channels is
``c_in * c_out * kernel**2 + 2 * c_out`` (bias-free convolution plus the
BatchNorm scale and shift); see :func:`expected_param_count`.
"""
from __future__ import annotations

from typing import Iterable

import torch
import torch.nn as nn

from .staged import FeatureMap, Shape, StagedModel

STUDENT_TO_TEACHER = "student_to_teacher"
TEACHER_TO_STUDENT = "teacher_to_student"
LEAKY_SLOPE = 0.1

KERNELS = {"stride1_conv": 3, "stride2_conv": 3, "transposed_conv": 4}


class UnsupportedGeometryError(ValueError):
    pass


def infer_bridge_kind(in_shape: Shape, out_shape: Shape) -> str:
    _, hi, wi = in_shape
    _, ho, wo = out_shape
    if (ho, wo) == (hi, wi):
        return "stride1_conv"
    if hi % 2 == 0 and wi % 2 == 0 and (ho * 2, wo * 2) == (hi, wi):
        return "stride2_conv"
    if (ho, wo) == (hi * 2, wi * 2):
        return "transposed_conv"
    raise UnsupportedGeometryError(f"cannot bridge {tuple(in_shape)} -> {tuple(out_shape)}: "
                                   "spatial ratio must be 1, 1/2 or 2 on both axes")


def expected_param_count(kind: str, in_channels: int, out_channels: int) -> int:
    return in_channels * out_channels * KERNELS[kind] ** 2 + 2 * out_channels


class Bridge(nn.Module):
    def __init__(self, direction: str, position: int, in_shape: Shape, out_shape: Shape,
                 post_relu_target: bool = False):
        super().__init__()
        self.direction = direction
        self.position = position
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.kind = infer_bridge_kind(in_shape, out_shape)
        cin, cout = in_shape[0], out_shape[0]
        if self.kind == "transposed_conv":
            self.conv = nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False)
        else:
            self.conv = nn.Conv2d(cin, cout, 3, 2 if self.kind == "stride2_conv" else 1, 1, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.LeakyReLU(LEAKY_SLOPE) if post_relu_target else nn.Identity()

    @property
    def token(self) -> str:
        return ("Bst" if self.direction == STUDENT_TO_TEACHER else "Bts") + str(self.position)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.bn(self.conv(x)))

    def apply_to(self, feature: FeatureMap) -> FeatureMap:
        target = "teacher" if self.direction == STUDENT_TO_TEACHER else "student"
        return FeatureMap(self(feature.values), self.position, target, feature.path_key.extend(self.token))


class IdentityBridge(Bridge):
    """Pass-through bridge for equal shapes (self-distillation and probes)."""

    def __init__(self, direction: str, position: int, shape: Shape):
        nn.Module.__init__(self)
        self.direction = direction
        self.position = position
        self.in_shape = self.out_shape = tuple(shape)
        self.kind = "identity"

    def forward(self, x):
        return x


class BridgeSet(nn.Module):
    def __init__(self, bridges: Iterable[Bridge]):
        super().__init__()
        self.bridges = nn.ModuleDict()
        for b in bridges:
            name = f"{'st' if b.direction == STUDENT_TO_TEACHER else 'ts'}{b.position}"
            if name in self.bridges:
                raise ValueError(f"duplicate bridge {name}")
            self.bridges[name] = b

    def st(self, k: int) -> Bridge:
        return self.bridges[f"st{k}"]

    def ts(self, k: int) -> Bridge:
        return self.bridges[f"ts{k}"]

    @property
    def positions(self) -> list[int]:
        return sorted({b.position for b in self.bridges.values()})

    def keys(self):
        return [(b.direction, b.position) for b in self.bridges.values()]

    def __len__(self) -> int:
        return len(self.bridges)


def _check_positions(teacher: StagedModel, student: StagedModel, positions) -> list[int]:
    if teacher.num_stages != student.num_stages:
        raise ValueError(f"stage count mismatch: teacher N={teacher.num_stages}, student N={student.num_stages}")
    positions = sorted(set(positions))
    bad = [k for k in positions if not 1 <= k <= teacher.num_stages]
    if bad:
        raise ValueError(f"bridge positions {bad} outside 1..{teacher.num_stages}")
    return positions


def build_bridge_set(teacher: StagedModel, student: StagedModel, positions: Iterable[int],
                     seed: int | None = None) -> BridgeSet:
    positions = _check_positions(teacher, student, positions)
    bridges = []
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        for k in positions:
            t_shape = teacher.stage_output_shapes[k - 1]
            s_shape = student.stage_output_shapes[k - 1]
            try:
                bridges.append(Bridge(STUDENT_TO_TEACHER, k, s_shape, t_shape, teacher.post_relu_features))
                bridges.append(Bridge(TEACHER_TO_STUDENT, k, t_shape, s_shape, student.post_relu_features))
            except UnsupportedGeometryError as e:
                raise UnsupportedGeometryError(f"position {k}: {e}") from None
    return BridgeSet(bridges)


def identity_bridge_set(teacher: StagedModel, student: StagedModel, positions: Iterable[int]) -> BridgeSet:
    positions = _check_positions(teacher, student, positions)
    bridges = []
    for k in positions:
        shape = teacher.stage_output_shapes[k - 1]
        if student.stage_output_shapes[k - 1] != shape:
            raise UnsupportedGeometryError(f"position {k}: identity bridge needs equal shapes, got "
                                           f"{student.stage_output_shapes[k - 1]} vs {shape}")
        bridges += [IdentityBridge(STUDENT_TO_TEACHER, k, shape), IdentityBridge(TEACHER_TO_STUDENT, k, shape)]
    return BridgeSet(bridges)
