import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsr.checks import random_sequence, toy_catalog
from cdsr.model import ModelConfig, SequenceModel
from cdsr.perf import (
    balanced_partition,
    bench,
    causal_pairs,
    compositions,
    count_attention_pairs,
    corpus_delta,
    format_bench,
    instrumented_forward,
    parse_bench,
    sample_domains,
)


def test_equal_split_hand_values():
    rep = count_attention_pairs(np.repeat(np.arange(4), 25))
    assert rep.intra_causal_pairs == 1300
    assert rep.dense_causal_pairs == 5050
    assert rep.quadratic_ratio == 0.25


def test_single_domain_intra_equals_dense():
    rep = count_attention_pairs([3] * 17)
    assert rep.intra_causal_pairs == rep.dense_causal_pairs
    assert rep.check() == []


def test_uneven_split_quadratic_terms():
    rep = count_attention_pairs([0] * 50 + [1] * 30 + [2] * 20)
    assert sum(s * s for s in rep.sizes.values()) == 3800
    assert rep.delta == 0.5
    assert 3800 <= rep.delta * 100**2


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 512), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_delta_bound(S, D, seed):
    d = np.random.default_rng(seed).integers(0, D, size=S)
    rep = count_attention_pairs(d)
    assert rep.intra_causal_pairs <= rep.delta * S * (S + 1) / 2 + S
    assert rep.check() == []


@pytest.mark.parametrize("D", [1, 2, 3, 4])
def test_balanced_partition_is_optimal(D):
    for S in range(D, 21):
        best = min(sum(causal_pairs(s) for s in c) for c in compositions(S, D))
        assert sum(causal_pairs(s) for s in balanced_partition(S, D)) == best


def test_compositions_count():
    # C(S-1, D-1) compositions
    assert len(list(compositions(10, 3))) == 36


def test_instrumented_hand_case():
    cat = toy_catalog(3, 4)
    m = SequenceModel(ModelConfig(k=4, h=1, L=1, n_max=8, use_ddsr=False), cat)
    _, counter = instrumented_forward([4, 5, 8, 6], [1, 1, 2, 1], 1, m)
    assert counter.attention == 7


def test_dense_flag_counts_full_triangle():
    cat = toy_catalog(3, 4)
    m = SequenceModel(ModelConfig(k=8, h=2, L=2, n_max=16, intra_domain_mask=False), cat)
    seq = random_sequence(np.random.default_rng(0), 11, 3, 4)
    _, c = instrumented_forward(seq.items, seq.domains, 0, m)
    assert c.attention == causal_pairs(11) * 2 * 2


def test_doubling_layers_doubles_count():
    cat = toy_catalog(3, 4)
    seq = random_sequence(np.random.default_rng(1), 13, 3, 4)
    counts = []
    for L in (1, 2):
        m = SequenceModel(ModelConfig(k=8, h=2, L=L, n_max=16), cat)
        counts.append(instrumented_forward(seq.items, seq.domains, 0, m)[1])
    assert counts[1].attention == 2 * counts[0].attention
    assert counts[1].ddsr == 2 * counts[0].ddsr


@pytest.mark.parametrize("D", [1, 2, 5])
def test_ddsr_cost_is_linear_in_domains(D):
    cat = toy_catalog(D, 3)
    seq = random_sequence(np.random.default_rng(D), 9, D, 3)
    m = SequenceModel(ModelConfig(k=8, h=2, L=1, n_max=16), cat)
    _, c = instrumented_forward(seq.items, seq.domains, 0, m)
    assert c.ddsr == D * causal_pairs(9)


def test_corpus_delta_is_max():
    assert corpus_delta([[0, 1], [0, 0, 0, 1]]) == 0.75


def test_bench_rows_and_counts():
    rows = bench(3, [8, 16, 24], repeats=1, k=8, h=2, seed=0)
    assert [r.S for r in rows] == [8, 16, 24]
    text = format_bench(rows)
    parsed = parse_bench(text)
    assert list(parsed[0]) == ["S", "D", "distribution", "dense_pairs", "intra_pairs", "ratio", "delta",
                               "median_ms_dense", "median_ms_intra"]
    rng = np.random.default_rng(0)
    for r in rows:
        d = sample_domains(r.S, 3, "uniform", rng)
        assert r.dense_pairs == causal_pairs(r.S)
        assert r.intra_pairs == count_attention_pairs(d).intra_causal_pairs


def test_zipf_is_skewed():
    d = sample_domains(20000, 4, "zipf", np.random.default_rng(0))
    counts = np.bincount(d, minlength=4)
    assert counts[0] > counts[1] > counts[2] > counts[3]


def test_unknown_distribution():
    with pytest.raises(ValueError):
        sample_domains(10, 2, "pareto", np.random.default_rng(0))
