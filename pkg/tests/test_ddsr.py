import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsr.ddsr import DdsrParams, build_domain_states, combine, ddsr_attend, last_seen_index, phi
from cdsr.numerics import Tensor, grad_check


def test_phi_examples():
    doms = [1, 2, 1, 3]  # 0-based positions below
    assert phi(doms, 1, 3) == 2
    assert phi(doms, 3, 1) is None
    assert phi(doms, 2, 3) == 1


def test_single_domain_states_copy_rows():
    H = Tensor(np.arange(12.0).reshape(4, 3))
    st_ = build_domain_states(H, [0, 0, 0, 0], 2)
    assert np.array_equal(st_.states.data[0], H.data)
    assert np.array_equal(st_.states.data[1], np.zeros((4, 3)))
    assert st_.present[0].all() and not st_.present[1].any()


def test_last_seen_row():
    H = Tensor(np.arange(9.0).reshape(3, 3))
    st_ = build_domain_states(H, [0, 1, 0], 2)
    assert np.array_equal(st_.states.data[0, 1], H.data[0])
    assert np.array_equal(st_.states.data[1, 2], H.data[1])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.lists(st.integers(0, 4), min_size=1, max_size=60))
def test_sweep_matches_brute_force(D, raw):
    doms = [d % D for d in raw]
    src = last_seen_index(doms, D)
    for d in range(D):
        for i in range(len(doms)):
            j = phi(doms, d, i)
            assert src[d, i] == (-1 if j is None else j)


def test_padding_is_never_seen():
    src = last_seen_index(np.array([[-1, -1, 0, 1]]), 2)
    assert src[0, 0].tolist() == [-1, -1, 2, 2]


def _layer_norm(x):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(max(var, 1e-12))


def _unrolled(H, doms, D, Wc, bc, Wq, bq):
    """Direct loop evaluation of the domain-state attention for one sequence."""
    n, k = H.shape
    K = [H[j] @ Wc[:, :k] + bc[:k] for j in range(n)]
    V = [H[j] @ Wc[:, k:] + bc[k:] for j in range(n)]
    out = []
    for i in range(n):
        total = np.zeros(k)
        for d in range(D):
            last = None
            for j in range(i + 1):
                if doms[j] == d:
                    last = j
            state = H[last] if last is not None else np.zeros(k)
            q = state @ Wq + bq
            s = np.array([q @ K[j] / np.sqrt(k) for j in range(i + 1)])
            w = np.exp(s - s.max())
            w /= w.sum()
            total += sum(w[j] * V[j] for j in range(i + 1))
        out.append(_layer_norm(total))
    return np.array(out)


def test_hand_unrolled_two_domains():
    k = 3
    p = DdsrParams.init(k, np.random.default_rng(0))
    p.W_c.data = np.array([[1.0, 0, 0, 0.5, 0, 0], [0, 1.0, 0, 0, 0.5, 0], [0, 0, 1.0, 0, 0, 0.5]])
    p.b_c.data = np.array([0.1, 0, 0, 0, 0.2, 0])
    p.W_q.data = np.eye(k)
    p.b_q.data = np.array([0.0, 0.3, 0.0])
    H = np.array([[1.0, -1.0, 0.5], [0.2, 0.4, -0.3]])
    doms = [0, 1]
    C = ddsr_attend(Tensor(H), build_domain_states(Tensor(H), doms, 2), p).data
    assert np.allclose(C, _unrolled(H, doms, 2, p.W_c.data, p.b_c.data, p.W_q.data, p.b_q.data), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_random_matches_unrolled(seed):
    rng = np.random.default_rng(seed)
    k, D, n = 4, int(rng.integers(1, 4)), int(rng.integers(1, 8))
    p = DdsrParams.init(k, rng)
    for t in p.parameters().values():
        t.data = rng.uniform(-1, 1, size=t.shape)
    H = rng.normal(size=(n, k))
    doms = rng.integers(0, D, size=n)
    C = ddsr_attend(Tensor(H), build_domain_states(Tensor(H), doms, D), p).data
    assert np.allclose(C, _unrolled(H, doms, D, *(t.data for t in p.parameters().values())), atol=1e-10)


def test_single_position_single_domain():
    k = 4
    rng = np.random.default_rng(3)
    p = DdsrParams.init(k, rng)
    H = rng.normal(size=(1, k))
    C = ddsr_attend(Tensor(H), build_domain_states(Tensor(H), [0], 1), p).data
    V = H[0] @ p.W_c.data[:, k:] + p.b_c.data[k:]
    assert np.allclose(C[0], _layer_norm(V))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ddsr_is_causal(seed):
    rng = np.random.default_rng(seed)
    n, k, D = int(rng.integers(2, 10)), 4, 3
    p = DdsrParams.init(k, rng)
    doms = rng.integers(0, D, size=n)
    H = rng.normal(size=(n, k))
    j = int(rng.integers(1, n))
    H2 = H.copy()
    H2[j:] = rng.normal(size=(n - j, k))
    d2 = doms.copy()
    d2[j:] = rng.integers(0, D, size=n - j)
    a = ddsr_attend(Tensor(H), build_domain_states(Tensor(H), doms, D), p).data
    b = ddsr_attend(Tensor(H2), build_domain_states(Tensor(H2), d2, D), p).data
    assert np.array_equal(a[:j], b[:j])


def test_exclude_absent_only_affects_rows_with_unseen_domains():
    rng = np.random.default_rng(0)
    k = 4
    p = DdsrParams.init(k, rng)
    p.b_q.data = rng.normal(size=k)
    H = Tensor(rng.normal(size=(4, k)))
    doms = [0, 0, 1, 2]
    st_ = build_domain_states(H, doms, 3)
    a = ddsr_attend(H, st_, p).data
    b = ddsr_attend(H, st_, p, exclude_absent=True).data
    assert np.array_equal(a[3], b[3])
    # one key at position 0, so only the scale differs and layer norm removes it
    assert np.allclose(a[0], b[0])
    assert not np.allclose(a[1], b[1])


def test_padding_rows_are_zero_and_ignored():
    rng = np.random.default_rng(1)
    k = 4
    p = DdsrParams.init(k, rng)
    H = rng.normal(size=(1, 4, k))
    H[0, 0] = 0.0
    doms = np.array([[-1, 0, 1, 0]])
    valid = doms >= 0
    C = ddsr_attend(Tensor(H), build_domain_states(Tensor(H), doms, 2), p, valid).data
    assert np.array_equal(C[0, 0], np.zeros(k))
    ref = ddsr_attend(Tensor(H[0, 1:]), build_domain_states(Tensor(H[0, 1:]), doms[0, 1:], 2), p).data
    assert np.allclose(C[0, 1:], ref, atol=1e-12)


def test_combine():
    a, b = Tensor(np.ones((2, 2))), Tensor(np.full((2, 2), 3.0))
    z = Tensor(np.zeros((2, 2)))
    assert np.array_equal(combine(a, z).data, a.data)
    assert np.array_equal(combine(z, b).data, b.data)
    assert np.array_equal(combine(a, b).data, combine(b, a).data)


def test_ddsr_gradients():
    rng = np.random.default_rng(4)
    k, n, D = 6, 5, 3
    p = DdsrParams.init(k, rng)
    for t in p.parameters().values():
        t.data = rng.uniform(-0.5, 0.5, size=t.shape)
    H = Tensor(rng.uniform(-1, 1, size=(n, k)), requires_grad=True)
    doms = np.array([0, 2, 0, 1, 2])
    w = rng.uniform(-1, 1, size=(n, k))
    f = lambda: (ddsr_attend(H, build_domain_states(H, doms, D), p) * w).mean()
    assert grad_check(f, {"H": H, **p.parameters()}) <= 1e-4
