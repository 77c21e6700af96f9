import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cdsr.dataio import (
    Catalog,
    ConsistencyError,
    DataError,
    EmptyAfterFilteringError,
    InteractionEvent,
    ParseError,
    SynthConfig,
    UserSequence,
    generate_synthetic,
    ingest,
    parse_events,
    preprocess,
    read_corpus,
    sequences_to_events,
    split_leave_one_out,
    write_corpus,
    write_events,
)


def ev(u, i, d, t):
    return InteractionEvent(u, i, d, t)


# -- ingest ------------------------------------------------------------------------------


def test_ingest_empty_file(tmp_path):
    p = tmp_path / "e.tsv"
    p.write_text("")
    assert ingest(p) == []


def test_ingest_keeps_file_order(tmp_path):
    p = tmp_path / "e.tsv"
    p.write_text("u1\ta\tbooks\t5\nu2\tb\tmovies\t1\nu1\tc\tbooks\t3\n")
    out = ingest(p)
    assert [e.item for e in out] == ["a", "b", "c"]
    assert out[1] == ev("u2", "b", "movies", 1)


def test_missing_field_names_line(tmp_path):
    p = tmp_path / "e.tsv"
    p.write_text("u1\ta\tbooks\t5\nu2\tb\tmovies\n")
    with pytest.raises(ParseError, match="line 2|:2"):
        ingest(p)
    try:
        ingest(p)
    except ParseError as exc:
        assert exc.lineno == 2


def test_item_in_two_domains_is_rejected():
    with pytest.raises(ConsistencyError):
        parse_events(["u\ta\tbooks\t1\n", "u\ta\tmovies\t2\n"])


def test_comments_and_blank_lines_are_skipped():
    assert len(parse_events(["# header\n", "\n", "u\ta\tx\t1\n"])) == 1


# -- preprocess --------------------------------------------------------------------------


def test_singleton_items_are_all_dropped():
    events = [ev("u", f"i{j}", "d", j) for j in range(12)]
    with pytest.raises(EmptyAfterFilteringError):
        preprocess(events)


def test_six_users_sharing_ten_items_are_kept():
    events = [ev(f"u{u}", f"i{j}", "d", 10 * u + j) for u in range(6) for j in range(10)]
    cat, seqs = preprocess(events)
    assert len(seqs) == 6 and all(len(s) == 10 for s in seqs)
    assert cat.num_items == 10


def test_sequences_sorted_by_timestamp_with_stable_ties():
    rng = np.random.default_rng(0)
    events = []
    for u in range(6):
        ts = rng.integers(0, 4, size=10)
        events += [ev(f"u{u}", f"i{j}", f"d{j % 2}", int(t)) for j, t in enumerate(ts)]
    order = list(rng.permutation(len(events)))
    shuffled = [events[k] for k in order]
    cat, seqs = preprocess(shuffled)
    names = list(dict.fromkeys(e.user for e in shuffled))
    for s in seqs:
        name = names[s.user]
        mine = [(e.timestamp, pos, e.item) for pos, e in enumerate(shuffled) if e.user == name]
        want = [cat.item_index[i] for _, _, i in sorted(mine)]
        assert s.items == want


def test_truncation_keeps_most_recent():
    events = [ev(f"u{u}", f"i{j % 12}", "d", j) for u in range(6) for j in range(30)]
    cat, seqs = preprocess(events, n_max=20)
    assert all(len(s) == 20 for s in seqs)
    assert [cat.item_ids[i] for i in seqs[0].items] == [f"i{j % 12}" for j in range(10, 30)]


def _random_events(rng, users=30, items=25, domains=3, per_user=(5, 25)):
    dom_of = {f"i{j}": f"d{j % domains}" for j in range(items)}
    events = []
    for u in range(users):
        n = int(rng.integers(*per_user))
        for t in range(n):
            it = f"i{int(rng.integers(items))}"
            events.append(ev(f"u{u}", it, dom_of[it], int(rng.integers(0, 50))))
    return events


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_preprocess_is_a_fixed_point(seed):
    events = _random_events(np.random.default_rng(seed))
    try:
        cat, seqs = preprocess(events, n_max=15)
    except EmptyAfterFilteringError:
        return
    cat.validate(seqs)
    again_cat, again = preprocess(sequences_to_events(cat, seqs), n_max=15)

    def named(c, ss):
        return [[c.item_ids[i] for i in s.items] for s in ss]

    # dense indices may be relabelled; the content must not change
    assert named(again_cat, again) == named(cat, seqs)
    assert sorted(again_cat.item_ids) == sorted(cat.item_ids)


def test_catalog_validate_catches_domain_mismatch():
    cat = Catalog(["a", "b"], ["x", "y"], np.array([0, 1]))
    with pytest.raises(DataError):
        cat.validate([UserSequence(0, [0, 1], [0, 0])])


# -- corpus files ------------------------------------------------------------------------


def test_corpus_round_trip(tmp_path):
    cat, seqs = generate_synthetic(SynthConfig(num_users=20, seed=4))
    p = tmp_path / "c.tsv"
    write_corpus(p, cat, seqs)
    cat2, seqs2 = read_corpus(p)
    assert np.array_equal(cat2.domain_of_item, cat.domain_of_item)
    assert [(s.items, s.domains) for s in seqs2] == [(s.items, s.domains) for s in seqs]


def test_events_round_trip(tmp_path):
    cat, seqs = generate_synthetic(SynthConfig(num_users=5, seed=1))
    events = sequences_to_events(cat, seqs)
    p = tmp_path / "e.tsv"
    write_events(p, events, header="demo")
    assert ingest(p) == events
    assert p.read_text().startswith("# demo\n")


# -- synthetic data ----------------------------------------------------------------------


def test_synthetic_is_deterministic():
    a = generate_synthetic(SynthConfig(num_users=50, seed=9))[1]
    b = generate_synthetic(SynthConfig(num_users=50, seed=9))[1]
    assert [(s.items, s.domains) for s in a] == [(s.items, s.domains) for s in b]


def test_single_domain_synthetic():
    cat, seqs = generate_synthetic(SynthConfig(num_users=20, num_domains=1))
    assert all(set(s.domains) == {0} for s in seqs)
    cat.validate(seqs)


def test_zero_users():
    cat, seqs = generate_synthetic(SynthConfig(num_users=0))
    assert seqs == []


def _top_items(seqs, m):
    """Each user's most frequent local item in domains 0 and 1 (users seeing both)."""
    a, b = [], []
    for s in seqs:
        it, dm = np.asarray(s.items), np.asarray(s.domains)
        if (dm == 0).any() and (dm == 1).any():
            a.append(np.bincount(it[dm == 0] % m, minlength=m).argmax())
            b.append(np.bincount(it[dm == 1] % m, minlength=m).argmax())
    return np.array(a), np.array(b)


def _binned_table(a, b, bins):
    table = np.zeros((bins, bins))
    np.add.at(table, (a % bins, b % bins), 1)
    return table


def test_no_affinity_gives_independent_domains():
    m = 10
    cfg = SynthConfig(num_users=10_000, num_domains=2, items_per_domain=m, cross_affinity=0.0,
                      seq_len_min=12, seq_len_max=16, seed=11)
    a, b = _top_items(generate_synthetic(cfg)[1], m)
    table = _binned_table(a, b, m)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    p = stats.chi2_contingency(table).pvalue
    assert p > 0.01


def _mutual_info(a, b, m):
    joint = _binned_table(a, b, m) / len(a)
    pa, pb = joint.sum(axis=1, keepdims=True), joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def test_full_affinity_gives_measurable_mutual_information():
    m = 10
    cfg = SynthConfig(num_users=10_000, num_domains=2, items_per_domain=m, cross_affinity=1.0,
                      seq_len_min=12, seq_len_max=16, seed=12)
    a, b = _top_items(generate_synthetic(cfg)[1], m)
    mi = _mutual_info(a, b, m)
    rng = np.random.default_rng(0)
    null = np.array([_mutual_info(a, rng.permutation(b), m) for _ in range(100)])
    assert mi > null.mean() + 3 * null.std()


def test_synth_config_validation():
    with pytest.raises(DataError):
        generate_synthetic(SynthConfig(cross_affinity=1.5))


# -- leave-one-out -----------------------------------------------------------------------


def test_split_holds_out_final_item():
    train, targets = split_leave_one_out([UserSequence(0, [4, 5, 6], [0, 1, 0])])
    assert train[0].items == [4, 5] and train[0].domains == [0, 1]
    assert targets[0].target_item == 6 and targets[0].target_domain == 0
    assert targets[0].prefix_items == [4, 5]


def test_split_length_two_boundary():
    train, _ = split_leave_one_out([UserSequence(0, [1, 2], [0, 0])])
    assert train[0].items == [1]


def test_split_rejects_length_one():
    with pytest.raises(DataError):
        split_leave_one_out([UserSequence(0, [1], [0])])


def test_split_is_deterministic_on_train_portion():
    seqs = generate_synthetic(SynthConfig(num_users=30, seed=2))[1]
    a, _ = split_leave_one_out(seqs)
    b, _ = split_leave_one_out(seqs)
    assert [s.items for s in a] == [s.items for s in b]
