"""Desk-scale reference architectures and the teacher/student pair registry."""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn

from .pathing import RoutedBatchNorm2d
from .staged import StagedModel


class RegistryError(KeyError):
    pass


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride, 1, bias=False)


ACTIVATIONS = {"relu": torch.relu, "tanh": torch.tanh}


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1, activation: str = "relu"):
        super().__init__()
        self.act = ACTIVATIONS[activation]
        self.conv1 = conv3x3(cin, cout, stride)
        self.bn1 = RoutedBatchNorm2d(cout)
        self.conv2 = conv3x3(cout, cout)
        self.bn2 = RoutedBatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), RoutedBatchNorm2d(cout))

    def forward(self, x):
        out = self.act(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return self.act(out + identity)


class MobileBlock(nn.Module):
    """Inverted residual: 1x1 expand, 3x3 depthwise, 1x1 project."""

    def __init__(self, cin: int, cout: int, stride: int = 1, expand: int = 2, activation: str = "relu"):
        super().__init__()
        self.act = ACTIVATIONS[activation]
        hidden = cin * expand
        self.expand = nn.Conv2d(cin, hidden, 1, bias=False)
        self.bn1 = RoutedBatchNorm2d(hidden)
        self.depthwise = nn.Conv2d(hidden, hidden, 3, stride, 1, groups=hidden, bias=False)
        self.bn2 = RoutedBatchNorm2d(hidden)
        self.project = nn.Conv2d(hidden, cout, 1, bias=False)
        self.bn3 = RoutedBatchNorm2d(cout)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        out = self.act(self.bn1(self.expand(x)))
        out = self.act(self.bn2(self.depthwise(out)))
        out = self.bn3(self.project(out))
        if self.residual:
            out = out + x
        # stage features are taken post-activation
        return self.act(out)


BLOCKS = {"basic": BasicBlock, "mobile": MobileBlock}


@dataclass(frozen=True)
class StageSpec:
    channels: int
    stride: int
    blocks: int = 1


@dataclass(frozen=True)
class ArchSpec:
    block: str
    stem_channels: int
    stem_stride: int
    stages: tuple[StageSpec, ...]
    in_channels: int = 3
    # "tanh" gives a smooth network for finite-difference checks
    activation: str = "relu"

    def widened(self, factor: int) -> "ArchSpec":
        return replace(self, stem_channels=self.stem_channels * factor,
                       stages=tuple(replace(s, channels=s.channels * factor) for s in self.stages))


def build_stage(arch: ArchSpec, i: int, in_channels: int) -> nn.Sequential:
    """Stage ``i`` (1-based); stage 1 owns the stem."""
    spec = arch.stages[i - 1]
    block = BLOCKS[arch.block]
    layers: list[nn.Module] = []
    if i == 1:
        layers += [nn.Conv2d(arch.in_channels, arch.stem_channels, 3, arch.stem_stride, 1, bias=False),
                   RoutedBatchNorm2d(arch.stem_channels), nn.ReLU() if arch.activation == "relu" else nn.Tanh()]
        in_channels = arch.stem_channels
    for b in range(spec.blocks):
        layers.append(block(in_channels, spec.channels, spec.stride if b == 0 else 1, activation=arch.activation))
        in_channels = spec.channels
    return nn.Sequential(*layers)


def build_head(in_channels: int, num_classes: int) -> nn.Sequential:
    return nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(in_channels, num_classes))


def build_cnn(name: str, arch: ArchSpec, num_classes: int, image_size: int, role: str,
              seed: int | None = None) -> StagedModel:
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        stages, cin = [], arch.in_channels
        for i in range(1, len(arch.stages) + 1):
            stages.append(build_stage(arch, i, cin))
            cin = arch.stages[i - 1].channels
        head = build_head(cin, num_classes)
    return StagedModel(name, stages, head, (arch.in_channels, image_size, image_size), num_classes, role=role,
                       post_relu_features=arch.activation == "relu")


def build_tail(name: str, arch: ArchSpec, k: int, in_channels: int, num_classes: int,
               input_hw: int, seed: int | None = None) -> StagedModel:
    """Stages ``k+1..N`` of ``arch`` plus a head, accepting ``in_channels`` at entry.

    Used for exit branches that read a feature at position ``k``.
    """
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        stages, cin = [], in_channels
        for i in range(k + 1, len(arch.stages) + 1):
            stages.append(build_stage(arch, i, cin))
            cin = arch.stages[i - 1].channels
        head = build_head(cin, num_classes)
    return StagedModel(name, stages, head, (in_channels, input_hw, input_hw), num_classes,
                       role="branch", tag="e", post_relu_features=arch.activation == "relu")


# Toy pair: the two-stage polynomial network out = m1^4 + 5 m2^2 with
# (m1, m2) = (5x^2 - 1, 2x + 2).  Features are (batch, 2, 1, 1).

class ToyTeacherStage(nn.Module):
    def forward(self, x):
        return torch.cat([5 * x ** 2 - 1, 2 * x + 2], dim=1)


class ToyStudentStage(nn.Module):
    """Two-parameter map ``x -> (a x, b x)``."""

    def __init__(self):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(2))

    def forward(self, x):
        return x * self.scale.view(1, 2, 1, 1)


class ToyHead(nn.Module):
    def forward(self, m):
        m = m.flatten(1)
        return (m[:, 0] ** 4 + 5 * m[:, 1] ** 2).unsqueeze(1)


def toy_pair() -> tuple[StagedModel, StagedModel]:
    teacher = StagedModel("toy-teacher", [ToyTeacherStage()], ToyHead(), (1, 1, 1), 1, role="teacher")
    student = StagedModel("toy-student", [ToyStudentStage()], ToyHead(), (1, 1, 1), 1, role="student")
    return teacher, student


# Stage cuts are the four natural block boundaries.  Spatial sizes below are
# for 32x32 inputs.
TEACHER_ARCH = ArchSpec("basic", 32, 2, (StageSpec(32, 1, 2), StageSpec(64, 2), StageSpec(128, 2),
                                         StageSpec(128, 1)))                        # 16, 8, 4, 4
RESNET_STUDENT_ARCH = ArchSpec("basic", 16, 2, (StageSpec(16, 1), StageSpec(32, 2), StageSpec(64, 2),
                                                StageSpec(64, 1)))                  # 16, 8, 4, 4
MOBILE_STUDENT_ARCH = ArchSpec("mobile", 16, 2, (StageSpec(16, 1), StageSpec(24, 1), StageSpec(48, 2),
                                                 StageSpec(96, 2)))                 # 16, 16, 8, 4

REGISTRY = {
    "tiny-resnet-pair": (TEACHER_ARCH, RESNET_STUDENT_ARCH),
    "tiny-hetero-pair": (TEACHER_ARCH, MOBILE_STUDENT_ARCH),
    "toy-scalar-pair": None,
}

DESCRIPTIONS = {
    "tiny-resnet-pair": "basic-block teacher (32-128 ch) / narrower basic-block student, N=4",
    "tiny-hetero-pair": "basic-block teacher / inverted-residual student with shifted downsampling, N=4",
    "toy-scalar-pair": "polynomial toy network (5x^2-1)^4 + 5(2x+2)^2 / 2-parameter student, N=1",
}


def pair_num_stages(name: str) -> int:
    if name not in REGISTRY:
        raise RegistryError(f"unknown model pair {name!r}; valid names: {', '.join(sorted(REGISTRY))}")
    return 1 if REGISTRY[name] is None else len(REGISTRY[name][0].stages)


def teacher_arch(name: str) -> ArchSpec:
    if REGISTRY.get(name) is None:
        raise RegistryError(f"no CNN architecture for {name!r}; valid CNN pairs: "
                            f"{sorted(k for k, v in REGISTRY.items() if v)}")
    return REGISTRY[name][0]


def build_reference_pair(name: str, num_classes: int = 10, image_size: int = 32,
                         seed: int = 0) -> tuple[StagedModel, StagedModel]:
    if name not in REGISTRY:
        raise RegistryError(f"unknown model pair {name!r}; valid names: {', '.join(sorted(REGISTRY))}")
    if name == "toy-scalar-pair":
        return toy_pair()
    t_arch, s_arch = REGISTRY[name]
    teacher = build_cnn(f"{name}/teacher", t_arch, num_classes, image_size, "teacher", seed=seed)
    student = build_cnn(f"{name}/student", s_arch, num_classes, image_size, "student", seed=seed + 1)
    return teacher, student


def build_model(name: str, role: str, num_classes: int = 10, image_size: int = 32, seed: int = 0) -> StagedModel:
    """Build only one side of a registered pair."""
    if name not in REGISTRY:
        raise RegistryError(f"unknown model pair {name!r}; valid names: {', '.join(sorted(REGISTRY))}")
    if name == "toy-scalar-pair":
        return toy_pair()[0 if role == "teacher" else 1]
    arch = REGISTRY[name][0 if role == "teacher" else 1]
    return build_cnn(f"{name}/{role}", arch, num_classes, image_size, role, seed=seed)
