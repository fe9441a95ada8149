import copy
import math
from fractions import Fraction

import pytest
import torch

from fcfd.analysis import (branch_accuracy, build_exit_branch, copy_branch, cross_probe, format_toy_demo,
                           random_directions, sensitivity_probe, tail_param_count, toy_demo, train_exit_branch,
                           weight_checksum)
from fcfd.bridges import IdentityBridge, build_bridge_set
from fcfd.data import desk_datasets, iterate_batches
from fcfd.models import REGISTRY, build_model, toy_pair
from fcfd.trainer import TrainConfig, evaluate, pretrain_teacher

from conftest import tiny_batch, tiny_pair


def warmed(model, x):
    """One train-mode pass so the pure path keys have running statistics."""
    model.train()
    with torch.no_grad():
        model(x)
    return model.eval()


# --- toy example -------------------------------------------------------------

def test_toy_demo_values():
    r = toy_demo()
    assert r["feature"] == (4, 4)
    assert r["baseline_output"] == Fraction(336)
    by_point = {tuple(c["point"]): c for c in r["candidates"]}
    assert by_point[(3, 4)]["output"] == 161 and by_point[(3, 4)]["deviation"] == 175
    assert by_point[(4, 3)]["output"] == 301 and by_point[(4, 3)]["deviation"] == 35
    assert by_point[(3, 4)]["app"] == by_point[(4, 3)]["app"] == 0.5


def test_toy_ring_has_constant_appearance_loss():
    ring = toy_demo(ring_points=24)["ring"]
    assert len(ring) == 24
    assert all(abs(p["app"] - 0.5) < 1e-9 for p in ring)
    devs = [float(p["deviation"]) for p in ring]
    assert max(devs) - min(devs) > 100


def test_toy_demo_text():
    text = format_toy_demo(toy_demo(4))
    assert "336" in text and "175" in text and "35" in text


# --- sensitivity probe -------------------------------------------------------

def test_zero_radius_gives_zero_divergence():
    x, y = tiny_batch(6)
    teacher = warmed(tiny_pair()[0], x)
    rep = sensitivity_probe(teacher, 2, num_directions=32, radius=0.0, batch=x, labels=y)
    assert rep.divergences == [0.0] * 32
    assert rep.min == rep.mean == rep.max == 0.0
    assert rep.worst_accuracy == rep.best_accuracy == rep.clean_accuracy


def test_toy_directions():
    teacher = toy_pair()[0].double()
    dirs = torch.tensor([[-1.0, 0.0], [0.0, -1.0]], dtype=torch.float64)
    rep = sensitivity_probe(teacher, 1, radius=1.0, batch=torch.ones(1, 1, 1, 1, dtype=torch.float64),
                            directions=dirs)
    assert rep.divergences == [175.0, 35.0]
    assert rep.divergences.index(rep.max) == 0


def test_direction_order_is_irrelevant():
    x, _ = tiny_batch(5)
    teacher = warmed(tiny_pair()[0], x)
    dim = math.prod(teacher.stage_output_shapes[1])
    dirs = random_directions(16, dim, seed=3, dtype=torch.float64)
    perm = torch.randperm(16, generator=torch.Generator().manual_seed(0))
    a = sensitivity_probe(teacher, 2, radius=0.7, batch=x, directions=dirs)
    b = sensitivity_probe(teacher, 2, radius=0.7, batch=x, directions=dirs[perm])
    assert [a.divergences[i] for i in perm.tolist()] == b.divergences
    assert (a.min, a.max) == (b.min, b.max) == (min(a.divergences), max(a.divergences))
    assert a.min <= a.mean <= a.max and a.min >= 0


def test_directions_are_unit_vectors():
    d = random_directions(64, 40, seed=1, dtype=torch.float64)
    assert torch.allclose(d.norm(dim=1), torch.ones(64, dtype=torch.float64), atol=1e-12)


def test_probe_rejects_bad_position():
    teacher, _ = tiny_pair()
    x, _ = tiny_batch(2)
    for k in (0, 4):
        with pytest.raises(ValueError, match="out of range"):
            sensitivity_probe(teacher, k, num_directions=2, batch=x)


# --- exit branches -----------------------------------------------------------

@pytest.fixture(scope="module")
def small_setup():
    data = desk_datasets(0, num_classes=3, per_class=40, eval_per_class=40, image_size=16, noise=0.1)
    cfg = TrainConfig(epochs=4, batch_size=20, lr_milestones=(3,), num_classes=3, image_size=16)
    teacher = pretrain_teacher(cfg, data).student
    return data, cfg, teacher


def test_copied_branch_matches_teacher(small_setup):
    data, _, teacher = small_setup
    for k in (1, 2, 3):
        assert branch_accuracy(copy_branch(teacher, k), teacher, data[1]) == evaluate(teacher, data[1])


def test_identity_student_reproduces_branch(small_setup):
    data, _, teacher = small_setup
    k = 2
    branch = copy_branch(teacher, k)
    student = copy.deepcopy(teacher)
    bridge = IdentityBridge("st", k, teacher.stage_output_shapes[k - 1])
    own = branch_accuracy(branch, teacher, data[1])
    before = weight_checksum(branch.net)
    assert cross_probe(branch, student, bridge, data, recalibrate=False, policy="fallback") == own
    cross_probe(branch, student, bridge, data)
    assert weight_checksum(branch.net) == before


def test_shape_mismatch_rejected(small_setup):
    data, _, teacher = small_setup
    branch = copy_branch(teacher, 3)
    bridge = IdentityBridge("st", 2, teacher.stage_output_shapes[1])
    with pytest.raises(ValueError, match="does not match"):
        cross_probe(branch, teacher, bridge, data)


def test_shuffled_label_branch_at_chance():
    data = desk_datasets(0, num_classes=10, per_class=30, eval_per_class=40, image_size=16)
    teacher = build_model("tiny-hetero-pair", "teacher", 10, 16, seed=0)
    warmed(teacher, next(iterate_batches(data[0], 100)).x)
    schedule = TrainConfig(epochs=3, batch_size=50, lr_milestones=(), image_size=16)
    branch = train_exit_branch(teacher, 3, data, schedule, shuffle_labels=True)
    acc = branch.history[-1]["accuracy"]
    assert abs(acc - 0.1) < 4 * math.sqrt(0.09 / len(data[1]))


@pytest.mark.parametrize("pair", [p for p, v in REGISTRY.items() if v])
def test_branch_is_wider_than_teacher_tail(pair):
    teacher = build_model(pair, "teacher")
    for k in range(1, teacher.num_stages):
        branch = build_exit_branch(teacher, pair, k)
        assert branch.param_count() > tail_param_count(teacher, k)
        assert branch.net.input_shape == teacher.stage_output_shapes[k - 1]
        assert branch.net.num_classes == teacher.num_classes


# --- desk scale (slow) ---------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("k", [2, 3])
def test_trained_branch_close_to_teacher(desk, k):
    teacher_acc = evaluate(desk.teacher(), desk.data[1])
    own = desk.branch(k).history[-1]["accuracy"]
    print(f"k={k}: branch {own:.4f} teacher {teacher_acc:.4f}")
    assert own >= teacher_acc - 0.02


@pytest.mark.slow
def test_untrained_student_probes_at_chance(desk):
    student = build_model("tiny-hetero-pair", "student", seed=5)
    teacher = desk.teacher()
    bridges = build_bridge_set(teacher, student, [3], seed=5)
    warmed(student, next(iterate_batches(desk.data[0], 256)).x)
    held = desk.data[1]
    acc = cross_probe(copy.deepcopy(desk.branch(3)), student, bridges.st(3), desk.data)
    chance = 1 / teacher.num_classes
    assert abs(acc - chance) < 4 * math.sqrt(chance * (1 - chance) / len(held))
