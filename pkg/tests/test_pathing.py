import itertools
from collections import Counter

import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from fcfd.pathing import (ConfigError, MissingStatisticsError, PathKey, PathSpec, RoutedBatchNorm2d,
                          SamplerConfig, cumulative_stats, enumerate_candidates, norm_policy, path_scope,
                          routed_norm_forward, sample_paths)

A, B, C = PathKey(("Ms1",)), PathKey(("Mt1", "Bts1")), PathKey(("Ms1", "Bst1", "Mt2"))


def test_candidates_for_two_positions():
    assert enumerate_candidates(SamplerConfig((2, 3))) == [PathSpec(2, 0), PathSpec(2, 1), PathSpec(3, 0),
                                                         PathSpec(3, 1)]


@pytest.mark.parametrize("ks,n", [((3,), 2), ((1, 2, 3), 6)])
def test_candidate_counts(ks, n):
    assert len(enumerate_candidates(SamplerConfig(ks))) == n


def test_empty_positions_rejected():
    with pytest.raises(ConfigError):
        enumerate_candidates(SamplerConfig(()))
    with pytest.raises(ConfigError):
        SamplerConfig(()).validate()


def test_full_draw_returns_every_candidate():
    cfg = SamplerConfig((2, 3), paths_per_iter=4)
    assert sorted(sample_paths(cfg, 7)) == enumerate_candidates(cfg)


def test_too_many_paths_rejected():
    with pytest.raises(ConfigError, match="paths_per_iter"):
        sample_paths(SamplerConfig((2, 3), paths_per_iter=5), 0)


@given(st.integers(0, 2**31), st.integers(0, 10**6))
def test_sampling_is_deterministic(seed, it):
    cfg = SamplerConfig((2, 3), 2, seed)
    first = sample_paths(cfg, it)
    assert first == sample_paths(cfg, it)
    assert len(set(first)) == 2


def test_marginal_frequencies():
    cfg = SamplerConfig((2, 3), 2, rng_seed=0)
    counts = Counter()
    subsets = Counter()
    n = 10_000
    for it in range(n):
        s = sample_paths(cfg, it)
        counts.update(s)
        subsets[tuple(sorted(s))] += 1
    for c in enumerate_candidates(cfg):
        assert abs(counts[c] / n - 0.5) <= 0.02
    # uniform over the C(4,2) = 6 subsets, hence uniform marginals
    all_subsets = list(itertools.combinations(enumerate_candidates(cfg), 2))
    assert len(all_subsets) == 6
    assert chisquare([subsets[s] for s in all_subsets]).pvalue > 0.01
    assert chisquare([counts[c] for c in enumerate_candidates(cfg)]).pvalue > 0.01


def test_pathkey_string_round_trip():
    assert str(C) == "Ms1/Bst1/Mt2"
    assert PathKey.parse(str(C)) == C
    assert str(PathKey()) == "<input>" and PathKey.parse("<input>") == PathKey()
    assert A.extend("Bst1") == PathKey(("Ms1", "Bst1"))


def test_pathspec_validation():
    with pytest.raises(ConfigError):
        PathSpec(2, 2)
    assert str(PathSpec(3, 1)) == "<3,1>"


# --- routed normalization ---------------------------------------------------

def fresh_bn(channels=1, dtype=torch.float64):
    return RoutedBatchNorm2d(channels).to(dtype)


def test_ema_update_from_fresh_key():
    bn = fresh_bn()
    bn.stats[B] = bn._new_stats()
    b_before = bn.stats[B].clone()
    x = torch.tensor([0.0, 2.0], dtype=torch.float64).view(2, 1, 1, 1)
    routed_norm_forward(bn, x, A, "train")
    assert bn.stats[A].running_mean.item() == pytest.approx(0.1, abs=1e-15)
    # unbiased batch variance of [0, 2] is 2: 0.9 * 1 + 0.1 * 2
    assert bn.stats[A].running_var.item() == pytest.approx(1.1, abs=1e-15)
    assert torch.equal(bn.stats[B].running_mean, b_before.running_mean)
    assert torch.equal(bn.stats[B].running_var, b_before.running_var)


def test_same_batch_two_keys():
    bn = fresh_bn(3)
    x = torch.randn(4, 3, 2, 2, dtype=torch.float64)
    ya = routed_norm_forward(bn, x, A, "train")
    yb = routed_norm_forward(bn, x, B, "train")
    assert torch.equal(ya, yb)
    assert set(bn.stats) == {A, B}


def test_eval_on_running_mean_returns_shift():
    bn = fresh_bn(2)
    routed_norm_forward(bn, torch.randn(8, 2, 3, 3, dtype=torch.float64), A, "train")
    with torch.no_grad():
        bn.weight.copy_(torch.tensor([2.0, -3.0]))
        bn.bias.copy_(torch.tensor([0.5, 7.0]))
    x = bn.stats[A].running_mean.view(1, 2, 1, 1).expand(3, 2, 4, 4)
    out = routed_norm_forward(bn, x, A, "eval")
    assert torch.allclose(out, bn.bias.view(1, 2, 1, 1).expand_as(out), atol=1e-12, rtol=0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0, 1, 2]), st.integers(0, 2**16)), min_size=1, max_size=12))
def test_statistics_isolation(calls):
    keys = [A, B, C]
    mixed = fresh_bn(2, torch.float32)
    for key_index, seed in calls:
        x = torch.randn(4, 2, 3, 3, generator=torch.Generator().manual_seed(seed))
        with path_scope(keys[key_index]):
            mixed(x)
    for target in range(3):
        replay = fresh_bn(2, torch.float32)
        for key_index, seed in calls:
            if key_index == target:
                x = torch.randn(4, 2, 3, 3, generator=torch.Generator().manual_seed(seed))
                with path_scope(keys[target]):
                    replay(x)
        key = keys[target]
        assert (key in mixed.stats) == (key in replay.stats)
        if key in replay.stats:
            assert torch.equal(mixed.stats[key].running_mean, replay.stats[key].running_mean)
            assert torch.equal(mixed.stats[key].running_var, replay.stats[key].running_var)
            assert mixed.stats[key].update_count == replay.stats[key].update_count


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([0, 1, 2]), min_size=3, max_size=10), st.integers(0, 2**16))
def test_affine_sharing(order, seed):
    keys = [A, B, C]
    bn = fresh_bn(2)
    g = torch.Generator().manual_seed(seed)
    for i in range(3):                            # every key has statistics
        with path_scope(keys[i]):
            bn(torch.randn(4, 2, 3, 3, generator=g, dtype=torch.float64))
    for i in order:
        with path_scope(keys[i]):
            bn(torch.randn(4, 2, 3, 3, generator=g, dtype=torch.float64))
    probe = torch.randn(2, 2, 3, 3, generator=g, dtype=torch.float64)
    src, dst = keys[order[0]], keys[(order[0] + 1) % 3]
    bn.eval()
    with path_scope(dst):
        before = bn(probe).detach()
    dst_stats = bn.stats[dst].clone()
    bn.train()
    opt = torch.optim.SGD(bn.parameters(), lr=0.1)
    with path_scope(src):
        loss = (bn(torch.randn(4, 2, 3, 3, generator=g, dtype=torch.float64)) - 1.0).pow(2).mean()
    loss.backward()
    opt.step()
    bn.eval()
    with path_scope(dst):
        after = bn(probe)
    assert not torch.equal(before, after)
    assert torch.equal(bn.stats[dst].running_mean, dst_stats.running_mean)
    assert torch.equal(bn.stats[dst].running_var, dst_stats.running_var)


def test_unknown_key_policy():
    bn = fresh_bn()
    bn.default_key = A
    routed_norm_forward(bn, torch.randn(4, 1, 2, 2, dtype=torch.float64), A, "train")
    bn.eval()
    x = torch.randn(2, 1, 2, 2, dtype=torch.float64)
    with path_scope(B), pytest.raises(MissingStatisticsError, match="Mt1/Bts1"):
        bn(x)
    with path_scope(B), norm_policy("fallback"):
        fb = bn(x)
    with path_scope(A):
        assert torch.equal(fb, bn(x))


def test_cumulative_stats_average_exactly():
    bn = fresh_bn()
    batches = [torch.randn(5, 1, 2, 2, dtype=torch.float64) for _ in range(4)]
    with cumulative_stats(), path_scope(A):
        for b in batches:
            bn(b)
    means = torch.stack([b.mean() for b in batches])
    assert bn.stats[A].running_mean.item() == pytest.approx(means.mean().item(), abs=1e-12)
