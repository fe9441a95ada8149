"""Path descriptors, per-iteration path sampling and provenance-keyed BatchNorm.

Every activation carries a :class:`PathKey` naming the stage-level modules that
produced it.  Normalization layers inside the backbones are
:class:`RoutedBatchNorm2d`, which keep one set of running statistics per key
while sharing a single affine transform across all keys.
"""
from __future__ import annotations

import contextlib
import contextvars
import random
from dataclasses import dataclass
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


class MissingStatisticsError(KeyError):
    pass


@dataclass(frozen=True)
class PathKey:
    tokens: tuple[str, ...] = ()

    def extend(self, *tokens: str) -> "PathKey":
        return PathKey(self.tokens + tuple(tokens))

    def __str__(self) -> str:
        return "/".join(self.tokens) if self.tokens else "<input>"

    @classmethod
    def parse(cls, text: str) -> "PathKey":
        if text == "<input>":
            return cls()
        return cls(tuple(text.split("/")))


ROOT_KEY = PathKey()


@dataclass(frozen=True, order=True)
class PathSpec:
    """A hybrid route ``<k, delta>``.

    ``delta == 1``: student up to stage k, bridge, then teacher stages (L_func).
    ``delta == 0``: teacher up to stage k, bridge, then student stages (L_func').
    """

    k: int
    delta: int

    def __post_init__(self):
        if self.delta not in (0, 1):
            raise ConfigError(f"delta must be 0 or 1, got {self.delta}")

    def __str__(self) -> str:
        return f"<{self.k},{self.delta}>"


@dataclass
class SamplerConfig:
    candidate_positions: tuple[int, ...] = (2, 3)
    paths_per_iter: int = 2
    rng_seed: int = 0
    deltas: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        self.candidate_positions = tuple(sorted(set(int(k) for k in self.candidate_positions)))
        self.deltas = tuple(sorted(set(int(d) for d in self.deltas)))

    @property
    def k_min(self) -> int:
        if not self.candidate_positions:
            raise ConfigError("sampler.candidate_positions is empty")
        return self.candidate_positions[0]

    def validate(self, num_stages: int | None = None) -> None:
        if not self.candidate_positions:
            raise ConfigError("sampler.candidate_positions is empty")
        if any(k < 1 for k in self.candidate_positions):
            raise ConfigError(f"sampler.candidate_positions must be >= 1: {self.candidate_positions}")
        if num_stages is not None and any(k > num_stages for k in self.candidate_positions):
            raise ConfigError(
                f"sampler.candidate_positions {self.candidate_positions} exceed stage count {num_stages}")
        if not self.deltas or any(d not in (0, 1) for d in self.deltas):
            raise ConfigError(f"sampler.deltas must be a non-empty subset of {{0, 1}}: {self.deltas}")
        n = len(self.candidate_positions) * len(self.deltas)
        if not 1 <= self.paths_per_iter <= n:
            raise ConfigError(
                f"sampler.paths_per_iter={self.paths_per_iter} must lie in [1, {n}] "
                f"for {n} candidate paths")


def enumerate_candidates(cfg: SamplerConfig) -> list[PathSpec]:
    """Cross product of candidate positions and switch directions, in (k, delta) order."""
    if not cfg.candidate_positions:
        raise ConfigError("sampler.candidate_positions is empty")
    return [PathSpec(k, d) for k in cfg.candidate_positions for d in cfg.deltas]


def sample_paths(cfg: SamplerConfig, iteration: int) -> list[PathSpec]:
    """Uniform sample without replacement, reproducible from ``(rng_seed, iteration)``."""
    cfg.validate()
    candidates = enumerate_candidates(cfg)
    # string seeds hash deterministically (sha512) in random.Random
    rng = random.Random(f"fcfd-sampler:{cfg.rng_seed}:{iteration}")
    return rng.sample(candidates, cfg.paths_per_iter)


# Active routing state.  Context variables keep concurrent evaluators in
# different threads from seeing each other's keys.
_active_key: contextvars.ContextVar[PathKey] = contextvars.ContextVar("fcfd_path_key", default=ROOT_KEY)
_eval_policy: contextvars.ContextVar[str] = contextvars.ContextVar("fcfd_norm_policy", default="strict")
_passthrough: contextvars.ContextVar[bool] = contextvars.ContextVar("fcfd_norm_passthrough", default=False)
_cumulative: contextvars.ContextVar[bool] = contextvars.ContextVar("fcfd_norm_cumulative", default=False)


@contextlib.contextmanager
def _set(var: contextvars.ContextVar, value) -> Iterator[None]:
    token = var.set(value)
    try:
        yield
    finally:
        var.reset(token)


def path_scope(key: PathKey):
    """Route every :class:`RoutedBatchNorm2d` called inside the block under ``key``."""
    return _set(_active_key, key)


def current_path_key() -> PathKey:
    return _active_key.get()


def norm_policy(policy: str):
    """Set the eval-mode unknown-key policy: ``"strict"`` or ``"fallback"``."""
    if policy not in ("strict", "fallback"):
        raise ConfigError(f"unknown normalization policy {policy!r}")
    return _set(_eval_policy, policy)


def shape_probe():
    # normalization becomes identity; used to trace shapes without touching statistics
    return _set(_passthrough, True)


def cumulative_stats():
    """Train-mode updates use a cumulative average instead of the EMA (recalibration)."""
    return _set(_cumulative, True)


@dataclass
class NormStats:
    running_mean: torch.Tensor
    running_var: torch.Tensor
    update_count: int = 0

    def clone(self) -> "NormStats":
        return NormStats(self.running_mean.clone(), self.running_var.clone(), self.update_count)


class RoutedBatchNorm2d(nn.Module):
    """BatchNorm with per-:class:`PathKey` running statistics and a shared affine."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.stats: dict[PathKey, NormStats] = {}
        self.default_key: PathKey | None = None

    def _new_stats(self) -> NormStats:
        return NormStats(
            torch.zeros(self.num_features, dtype=self.weight.dtype, device=self.weight.device),
            torch.ones(self.num_features, dtype=self.weight.dtype, device=self.weight.device),
        )

    def _apply(self, fn, *args, **kwargs):
        super()._apply(fn, *args, **kwargs)
        for st in self.stats.values():
            st.running_mean = fn(st.running_mean)
            st.running_var = fn(st.running_var)
        return self

    def reset_stats(self, key: PathKey | None = None) -> None:
        if key is None:
            self.stats.clear()
        else:
            self.stats.pop(key, None)

    def resolve_key(self, key: PathKey) -> PathKey:
        if key in self.stats:
            return key
        if _eval_policy.get() == "fallback" and self.default_key in self.stats:
            return self.default_key
        raise MissingStatisticsError(
            f"no running statistics for path key '{key}' in eval mode "
            f"(known: {sorted(str(k) for k in self.stats)})")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if _passthrough.get():
            return x
        return routed_norm_forward(self, x, _active_key.get(), "train" if self.training else "eval")

    def extra_repr(self) -> str:
        return f"{self.num_features}, eps={self.eps}, momentum={self.momentum}, keys={len(self.stats)}"


def routed_norm_forward(state: RoutedBatchNorm2d, x: torch.Tensor, key: PathKey, mode: str) -> torch.Tensor:
    """Normalize ``x`` with the statistics selected by ``key``.

    In ``"train"`` mode the batch statistics are used and only ``stats[key]``
    receives the moving-average update.  In ``"eval"`` mode ``stats[key]`` is
    used as-is (see :func:`norm_policy` for unknown keys).
    """
    if mode == "train":
        st = state.stats.get(key)
        if st is None:
            st = state.stats[key] = state._new_stats()
        st.update_count += 1
        momentum = 1.0 / st.update_count if _cumulative.get() else state.momentum
        return F.batch_norm(x, st.running_mean, st.running_var, state.weight, state.bias,
                            True, momentum, state.eps)
    if mode == "eval":
        st = state.stats[state.resolve_key(key)]
        return F.batch_norm(x, st.running_mean, st.running_var, state.weight, state.bias,
                            False, 0.0, state.eps)
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def routed_norms(module: nn.Module) -> list[RoutedBatchNorm2d]:
    return [m for m in module.modules() if isinstance(m, RoutedBatchNorm2d)]


def set_default_key(module: nn.Module, key: PathKey) -> None:
    for m in routed_norms(module):
        m.default_key = key
