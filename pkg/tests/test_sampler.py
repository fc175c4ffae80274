import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from activemeta import sampler, segnet
from activemeta.errors import ConfigError
from activemeta.sampler import BAD, GOOD, ScoredSample, partition
from activemeta.synthdata import GenConfig, Sample, gen_patient


def scored(scores, pool="inner", patient="p"):
    return [ScoredSample(patient, i, pool, s) for i, s in enumerate(scores)]


def test_split_floor_rule():
    slices = list(range(25))
    inner, outer = sampler.split_inner_outer(slices, 0.5, 3)
    assert (len(inner), len(outer)) == (12, 13)
    assert sorted(inner + outer) == slices
    assert sampler.split_inner_outer(slices, 0.5, 3) == (inner, outer)
    assert sampler.split_inner_outer([0, 1], 0.5, 0)[0] in ([0], [1])


def test_split_errors():
    with pytest.raises(sampler.SamplerError):
        sampler.split_inner_outer([1], 0.5, 0)
    with pytest.raises(ConfigError):
        sampler.split_inner_outer([1, 2, 3], 1.0, 0)


def test_partition_threshold():
    p = partition(scored([0.9, 0.3, 0.6]), 0.5)
    assert [s.slice for s in p.good] == [0, 2]
    assert [s.slice for s in p.bad] == [1]
    assert len(partition(scored([0.9, 0.3, 0.0]), 0.0).bad) == 0
    assert [s.slice for s in partition(scored([0.5]), 0.5).good] == [0]


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1))
def test_partition_correctness(scores, tau):
    p = partition(scored(scores), tau)
    assert all(s.score >= tau for s in p.good)
    assert all(s.score < tau for s in p.bad)
    assert sorted(s.slice for s in p.all()) == list(range(len(scores)))


def test_active_sorting_examples():
    bad = [ScoredSample("p", 1, "inner", 0.30), ScoredSample("p", 2, "inner", 0.10),
           ScoredSample("p", 3, "inner", 0.45)]
    good = [ScoredSample("p", 4, "inner", 0.80), ScoredSample("p", 5, "inner", 0.95)]
    inner = sampler.TaskPartition(good, bad, 0.5)
    outer = partition(scored([0.2, 0.7, 0.1, 0.9, 0.5], "outer", "q"), 0.5)
    sched = sampler.order_active(inner, outer)
    assert [d.slice for d, _ in sched.pairs] == [2, 5, 1, 4, 3]
    assert sched.origins == [BAD, GOOD, BAD, GOOD, BAD]
    # D' is the extreme of the matching outer partition, used once
    assert [o.score for _, o in sched.pairs] == [0.1, 0.9, 0.2, 0.7, 0.5]


def test_active_tie_break_by_slice():
    inner = partition(scored([0.2, 0.2, 0.2]), 0.5)
    outer = partition(scored([0.1, 0.1, 0.1], "outer"), 0.5)
    sched = sampler.order_active(inner, outer)
    assert [d.slice for d, _ in sched.pairs] == [0, 1, 2]
    assert [o.slice for _, o in sched.pairs] == [0, 1, 2]


score_lists = st.lists(st.floats(0, 1), min_size=1, max_size=20)


@given(score_lists, score_lists)
def test_active_is_permutation(inner_scores, outer_scores):
    inner = partition(scored(inner_scores), 0.5)
    outer = partition(scored(outer_scores, "outer"), 0.5)
    sched = sampler.order_active(inner, outer)
    n = min(len(inner_scores), len(outer_scores))
    assert len(sched) == n
    used_inner = [d.slice for d, _ in sched.pairs]
    used_outer = [o.slice for _, o in sched.pairs]
    assert len(set(used_inner)) == n and len(set(used_outer)) == n
    if len(outer_scores) >= len(inner_scores):
        assert sorted(used_inner) == list(range(len(inner_scores)))


@given(score_lists, score_lists, st.floats(0.01, 100))
def test_active_argsort_invariance(inner_scores, outer_scores, k):
    inner = partition(scored(inner_scores), 0.5)
    outer = partition(scored(outer_scores, "outer"), 0.5)

    def scaled(p):
        return sampler.TaskPartition([ScoredSample(s.patient, s.slice, s.pool, s.score * k) for s in p.good],
                                     [ScoredSample(s.patient, s.slice, s.pool, s.score * k) for s in p.bad], p.tau)

    a = sampler.order_active(inner, outer)
    b = sampler.order_active(scaled(inner), scaled(outer))
    assert [(d.key, o.key) for d, o in a.pairs] == [(d.key, o.key) for d, o in b.pairs]


def test_alternation_continues_with_remaining_set():
    inner = partition(scored([0.1, 0.9, 0.8, 0.7]), 0.5)
    outer = partition(scored([0.5] * 4, "outer"), 0.5)
    sched = sampler.order_active(inner, outer)
    assert sched.origins == [BAD, GOOD, GOOD, GOOD]


def test_passive_rules():
    inner = partition(scored([0.1, 0.9]), 0.5)
    outer = partition(scored([0.2, 0.8, 0.3, 0.7], "outer"), 0.5)
    sched = sampler.order_passive(inner, outer, 4)
    assert [d.slice for d, _ in sched.pairs] == [0, 1]  # (b1, .), (g1, .)
    assert sched.pairs[0][1].score < 0.5 <= sched.pairs[1][1].score
    again = sampler.order_passive(inner, outer, 4)
    assert [(d.key, o.key) for d, o in sched.pairs] == [(d.key, o.key) for d, o in again.pairs]


@given(score_lists, st.integers(0, 2**40))
def test_passive_coverage_and_fallback(scores, seed):
    inner = partition(scored(scores), 0.5)
    outer = partition(scored([0.9] * (len(scores) + 1), "outer"), 0.5)  # no bad outer samples
    sched = sampler.order_passive(inner, outer, seed)
    assert len(sched) == len(scores)
    assert len({o.key for _, o in sched.pairs}) == len(scores)
    assert sorted(d.slice for d, _ in sched.pairs) == list(range(len(scores)))


def test_passive_differs_across_seeds():
    inner = partition(scored(np.linspace(0, 1, 12)), 0.5)
    outer = partition(scored(np.linspace(0, 1, 13), "outer"), 0.5)
    orders = {tuple(d.slice for d, _ in sampler.order_passive(inner, outer, s).pairs) for s in range(5)}
    assert len(orders) > 1


def test_empty_pools_rejected():
    empty = sampler.TaskPartition([], [], 0.5)
    full = partition(scored([0.3]), 0.5)
    with pytest.raises(sampler.SamplerError):
        sampler.order_active(empty, full)
    with pytest.raises(sampler.SamplerError):
        sampler.order_passive(full, empty, 0)
    with pytest.raises(sampler.SamplerError):
        sampler.order_naive([], 0)


def test_naive_order():
    pool = [Sample(np.zeros((1, 4, 4)), np.zeros((4, 4), np.uint8), "p", i) for i in range(9)]
    a = sampler.order_naive(pool, 1)
    assert [d.slice for d, _ in a.pairs] == [d.slice for d, _ in sampler.order_naive(pool, 1).pairs]
    assert sorted(d.slice for d, _ in a.pairs) == list(range(9))
    assert all(o is None and d.score is None for d, o in a.pairs)
    assert a.origins == []


def test_order_log_rows():
    inner = partition(scored([0.1, 0.9]), 0.5)
    outer = partition(scored([0.2, 0.8], "outer"), 0.5)
    rows = sampler.order_active(inner, outer).log_rows(7)
    assert rows[0] == ["7", "0", "inner", "bad", "p", "0", "0.100000"]
    assert rows[1] == ["7", "0", "outer", "bad", "p", "0", "0.200000"]
    assert len(rows) == 4


def test_decompose_with_overfit_model():
    """A model whose logits reproduce the labels puts every sample in good."""
    v = gen_patient("target", 0, GenConfig(image_size=16, slices=4))
    cfg = segnet.NetworkConfig(4, 4, 2, 16)
    params = segnet.zeros_like_params(cfg)
    p = sampler.decompose_tasks(params, v.slices, 0.5)
    # the zero model predicts all background: lesion slices are bad
    lesion = [s.index for s in v.slices if (s.y > 0).any()]
    assert sorted(s.slice for s in p.bad) == lesion


def test_perfect_scores_leave_bad_empty(monkeypatch):
    v = gen_patient("target", 0, GenConfig(image_size=16, slices=4))
    monkeypatch.setattr(segnet, "predict_batch", lambda params, x: np.stack([s.y for s in v.slices]))
    p = sampler.decompose_tasks(None, v.slices, 0.5)
    assert p.bad == [] and len(p.good) == 4
