import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsr.batch import next_domains_of
from cdsr.embeddings import EmbeddingTables, lookup_items, tape, transition_term
from cdsr.numerics import Tensor, grad_check


def tables(k=4, items=6, domains=3, n_max=10, seed=0):
    return EmbeddingTables.init(items, domains, n_max, k, np.random.default_rng(seed))


def test_lookup_single_row():
    t = tables()
    assert np.array_equal(lookup_items(t.item, [0]).data, t.item.data[:1])


def test_lookup_repeated_index_gives_identical_rows():
    out = lookup_items(tables().item, [2, 2]).data
    assert np.array_equal(out[0], out[1])


def test_lookup_gradient_counts_occurrences():
    t = tables()
    idx = [1, 3, 1, 1]
    lookup_items(t.item, idx).sum().backward()
    want = np.zeros_like(t.item.data)
    want[1], want[3] = 3.0, 1.0
    assert np.array_equal(t.item.grad, want)
    assert grad_check(lambda: (lookup_items(t.item, idx) ** 2).sum(), [t.item]) <= 1e-4


def test_no_transition_means_item_plus_position():
    t = tables()
    items, doms = [0, 3, 5], [1, 1, 1]
    e = lookup_items(t.item, items)
    out = tape(e, doms, next_domains_of(doms, 1), t).data
    assert np.array_equal(out, t.item.data[items] + t.position.data[:3])


def test_identity_weights_give_elementwise_product():
    t = tables()
    t.tape_W.data = np.eye(4)
    t.tape_b.data = np.zeros(4)
    r = transition_term(t, [0], [2]).data[0]
    assert np.array_equal(r, t.domain.data[2] * t.domain.data[0])


def test_transition_hand_value():
    t = tables(k=2, domains=2)
    t.domain.data = np.array([[1.0, 2.0], [3.0, 4.0]])
    t.tape_W.data = np.eye(2)
    t.tape_b.data = np.array([1.0, 1.0])
    assert np.array_equal(transition_term(t, [0], [1]).data[0], [6.0, 12.0])


def test_disabled_tape_is_item_plus_position():
    t = tables()
    items, doms = [0, 3, 5], [0, 1, 2]
    e = lookup_items(t.item, items)
    out = tape(e, doms, next_domains_of(doms, 0), t, enabled=False).data
    assert np.array_equal(out, t.item.data[items] + t.position.data[:3])


def test_padding_rows_are_zero():
    t = tables()
    e = lookup_items(t.item, [0, 0, 1])
    out = tape(e, [-1, 0, 1], [0, 1, 2], t, valid=np.array([False, True, True]), positions=[0, 0, 1]).data
    assert np.array_equal(out[0], np.zeros(4))
    assert np.array_equal(out[1], t.item.data[0] + t.position.data[0] + transition_term(t, [0], [1]).data[0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=8), st.integers(0, 1))
def test_absent_domain_rows_do_not_matter(doms, q):
    t = tables(domains=3)
    items = [d * 2 for d in doms]
    nxt = next_domains_of(doms, q)
    before = tape(lookup_items(t.item, items), doms, nxt, t).data
    t.domain.data[2] = 123.0
    after = tape(lookup_items(t.item, items), doms, nxt, t).data
    assert np.array_equal(before, after)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_tape_is_local_to_current_and_next_domain(seed):
    rng = np.random.default_rng(seed)
    t = tables(domains=3)
    n = int(rng.integers(3, 9))
    i = int(rng.integers(0, n))
    doms = rng.integers(0, 3, size=n)
    items = doms * 2 + rng.integers(0, 2, size=n)
    q = int(rng.integers(0, 3))
    base = tape(lookup_items(t.item, items), doms, next_domains_of(doms, q), t).data[i]
    d2, it2 = rng.integers(0, 3, size=n), rng.integers(0, 6, size=n)
    keep = np.zeros(n, dtype=bool)
    keep[i] = True
    if i + 1 < n:
        keep[i + 1] = True
    d2[keep] = doms[keep]
    it2[i] = items[i]
    q2 = q if i == n - 1 else int(rng.integers(0, 3))
    out = tape(lookup_items(t.item, it2), d2, next_domains_of(d2, q2), t).data[i]
    assert np.array_equal(base, out)


def test_tape_gradients():
    rng = np.random.default_rng(1)
    t = tables()
    for p in t.parameters().values():
        p.data = rng.uniform(-1, 1, size=p.shape)
    doms = np.array([0, 0, 1, 2, 1])
    items = doms * 2
    w = rng.uniform(-1, 1, size=(5, 4))
    f = lambda: (tape(lookup_items(t.item, items), doms, next_domains_of(doms, 0), t) * w).sum()
    assert grad_check(f, t.parameters()) <= 1e-4


def test_init_scales():
    t = tables(k=32, items=500, seed=3)
    assert abs(t.item.data.std() - 0.02) < 0.002
    assert np.array_equal(t.tape_b.data, np.zeros(32))
    assert np.abs(t.tape_W.data - np.eye(32)).max() < 0.2
    assert isinstance(t.item, Tensor)
