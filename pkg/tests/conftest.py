from __future__ import annotations

from dataclasses import replace

import pytest
import torch

from fcfd.models import ArchSpec, StageSpec, build_cnn

torch.set_num_threads(1)

# Tiny pair (teacher spatial 8/4/2, student 8/8/4).  Finite differences need a
# smooth network: with ReLU some perturbation of 1e-4 always crosses a kink.
TINY_TEACHER = ArchSpec("basic", 4, 1, (StageSpec(4, 1), StageSpec(6, 2), StageSpec(8, 2)), activation="tanh")
TINY_STUDENT = ArchSpec("mobile", 3, 1, (StageSpec(3, 1), StageSpec(4, 1), StageSpec(6, 2)), activation="tanh")


def tiny_pair(dtype=torch.float64, num_classes: int = 5, seed: int = 0, activation: str = "tanh"):
    t_arch = replace(TINY_TEACHER, activation=activation)
    s_arch = replace(TINY_STUDENT, activation=activation)
    teacher = build_cnn("tiny/teacher", t_arch, num_classes, 8, "teacher", seed=seed).to(dtype)
    student = build_cnn("tiny/student", s_arch, num_classes, 8, "student", seed=seed + 1).to(dtype)
    return teacher, student


def tiny_batch(n: int = 4, dtype=torch.float64, num_classes: int = 5, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 3, 8, 8, generator=g, dtype=dtype)
    y = torch.randint(0, num_classes, (n,), generator=g)
    return x, y


def central_difference(fn, param: torch.nn.Parameter, indices, eps: float = 1e-4) -> torch.Tensor:
    """Numerical d fn / d param at the given flat indices (float64)."""
    flat = param.data.view(-1)
    out = []
    for i in indices:
        orig = flat[i].item()
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        out.append((up - down) / (2 * eps))
    return torch.tensor(out, dtype=torch.float64)


# Central differences at eps = 1e-4 carry ~1e-12 round-off; below this both
# gradients are zero for practical purposes and a ratio is meaningless.
ZERO_GRAD = 1e-8


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(a.norm().item(), b.norm().item())
    return 0.0 if scale < ZERO_GRAD else (a - b).norm().item() / scale


@pytest.fixture
def pair64():
    return tiny_pair()


@pytest.fixture(scope="session")
def desk():
    """Lazily trained desk-scale teacher, students and exit branches (see desk.py)."""
    from desk import DeskRuns
    return DeskRuns()


# --- acceptance report --------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, title, ok, detail, seconds, budget)``."""
    def record(n: int, title: str, ok: bool, detail: str, seconds: float, budget: float) -> bool:
        in_time = seconds < budget
        verdict = "PASS" if ok and in_time else "FAIL"
        line = f"[{verdict}] criterion {n}: {title} | {detail} | {seconds:.1f}s (budget {budget:.0f}s)"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok and in_time
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
