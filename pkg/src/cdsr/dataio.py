"""Interaction-log ingestion, k-core preprocessing, synthetic data and splits.

Event-log format: UTF-8, one event per line, ``user<TAB>item<TAB>domain<TAB>timestamp``.
Lines starting with ``#`` are comments.

Corpus format (preprocessed)::

    #users=<N> items=<M> domains=<D>
    #item_domains=<d_0>,<d_1>,...,<d_{M-1}>
    user_idx<TAB>item,item,...<TAB>domain,domain,...
"""

from __future__ import annotations

import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .seeding import component_rng

N_MAX = 200


class DataError(ValueError):
    """Base class for data problems."""


class ParseError(DataError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class ConsistencyError(DataError):
    pass


class EmptyAfterFilteringError(DataError):
    pass


@dataclass(frozen=True)
class InteractionEvent:
    user: str
    item: str
    domain: str
    timestamp: int

    def __post_init__(self):
        if not (self.user and self.item and self.domain):
            raise DataError(f"empty id in {self!r}")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp in {self!r}")


@dataclass
class UserSequence:
    user: int
    items: list[int]
    domains: list[int]

    def __post_init__(self):
        if len(self.items) != len(self.domains):
            raise DataError(
                f"user {self.user}: {len(self.items)} items but {len(self.domains)} domains"
            )

    def __len__(self) -> int:
        return len(self.items)

    @property
    def n(self) -> int:
        return len(self.items)


@dataclass
class Catalog:
    """Item/domain vocabularies and the item partition into domains."""

    item_ids: list[str]
    domain_ids: list[str]
    domain_of_item: np.ndarray
    item_index: dict[str, int] = field(init=False, repr=False)
    domain_index: dict[str, int] = field(init=False, repr=False)
    items_in_domain: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.domain_of_item = np.asarray(self.domain_of_item, dtype=np.int64)
        if len(self.domain_of_item) != len(self.item_ids):
            raise DataError("domain_of_item must cover every item")
        if len(self.domain_of_item) and (
            self.domain_of_item.min() < 0 or self.domain_of_item.max() >= len(self.domain_ids)
        ):
            raise DataError("domain_of_item refers to an unknown domain")
        self.item_index = {s: i for i, s in enumerate(self.item_ids)}
        self.domain_index = {s: i for i, s in enumerate(self.domain_ids)}
        self.items_in_domain = [
            np.flatnonzero(self.domain_of_item == d) for d in range(len(self.domain_ids))
        ]

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_domains(self) -> int:
        return len(self.domain_ids)

    def validate(self, seqs: list[UserSequence]) -> None:
        """Raise if any sequence step lies outside its domain's item partition."""
        for s in seqs:
            items = np.asarray(s.items)
            if items.size and (items.min() < 0 or items.max() >= self.num_items):
                raise ConsistencyError(f"user {s.user}: item index out of range")
            if not np.array_equal(self.domain_of_item[items], np.asarray(s.domains)):
                raise ConsistencyError(f"user {s.user}: item/domain mismatch")


# -- ingest -------------------------------------------------------------------------


def parse_events(lines, source="<events>") -> list[InteractionEvent]:
    events = []
    seen_domain: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(source, lineno, f"expected 4 tab-separated fields, got {len(parts)}")
        user, item, domain, ts = parts
        try:
            ts_val = int(ts)
        except ValueError:
            raise ParseError(source, lineno, f"bad timestamp {ts!r}") from None
        try:
            ev = InteractionEvent(user, item, domain, ts_val)
        except DataError as exc:
            raise ParseError(source, lineno, str(exc)) from None
        prev = seen_domain.setdefault(item, domain)
        if prev != domain:
            raise ConsistencyError(
                f"{source}:{lineno}: item {item!r} appears under domains {prev!r} and {domain!r}"
            )
        events.append(ev)
    return events


def ingest(path) -> list[InteractionEvent]:
    """Load an event log, preserving file order."""
    with open(path, encoding="utf-8") as fh:
        return parse_events(fh, source=os.fspath(path))


def write_events(path, events, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        for ev in events:
            fh.write(f"{ev.user}\t{ev.item}\t{ev.domain}\t{ev.timestamp}\n")


# -- preprocess -----------------------------------------------------------------------


def _order_and_truncate(events, n_max):
    by_user = defaultdict(list)
    for pos, ev in enumerate(events):
        by_user[ev.user].append((ev.timestamp, pos, ev))
    kept = []
    for rows in by_user.values():
        rows.sort(key=lambda r: (r[0], r[1]))
        kept.extend(rows[-n_max:])
    kept.sort(key=lambda r: r[1])
    return [r[2] for r in kept]


def preprocess(events, min_count: int = 5, min_len: int = 10, n_max: int = N_MAX):
    """Filter to a joint fixed point and build dense-indexed user sequences.

    Users and items occurring fewer than ``min_count`` times are removed
    repeatedly; users shorter than ``min_len`` and history beyond the most
    recent ``n_max`` events are removed inside the same loop, so that the
    output is itself a fixed point of this function.

    Returns ``(catalog, sequences)``.
    """
    if not events:
        raise DataError("no events to preprocess")
    user_min = max(min_count, min_len)
    cur = list(events)
    while True:
        cur = _order_and_truncate(cur, n_max)
        users = Counter(ev.user for ev in cur)
        items = Counter(ev.item for ev in cur)
        nxt = [ev for ev in cur if users[ev.user] >= user_min and items[ev.item] >= min_count]
        if len(nxt) == len(cur):
            break
        cur = nxt
    if not cur:
        raise EmptyAfterFilteringError("empty-after-filtering: no interactions survive preprocessing")

    user_idx: dict[str, int] = {}
    item_idx: dict[str, int] = {}
    dom_idx: dict[str, int] = {}
    item_dom: list[int] = []
    for ev in cur:
        user_idx.setdefault(ev.user, len(user_idx))
        d = dom_idx.setdefault(ev.domain, len(dom_idx))
        if ev.item not in item_idx:
            item_idx[ev.item] = len(item_idx)
            item_dom.append(d)
    catalog = Catalog(list(item_idx), list(dom_idx), np.array(item_dom, dtype=np.int64))

    by_user = defaultdict(list)
    for pos, ev in enumerate(cur):
        by_user[ev.user].append((ev.timestamp, pos, ev))
    seqs = []
    for name, u in user_idx.items():
        rows = sorted(by_user[name], key=lambda r: (r[0], r[1]))
        seqs.append(
            UserSequence(
                u,
                [item_idx[r[2].item] for r in rows],
                [dom_idx[r[2].domain] for r in rows],
            )
        )
    return catalog, seqs


def sequences_to_events(catalog: Catalog, seqs) -> list[InteractionEvent]:
    """Flatten sequences back to events (timestamps are step positions)."""
    return [
        InteractionEvent(f"u{s.user}", catalog.item_ids[i], catalog.domain_ids[d], t)
        for s in seqs
        for t, (i, d) in enumerate(zip(s.items, s.domains))
    ]


# -- corpus files --------------------------------------------------------------------------


def write_corpus(path, catalog: Catalog, seqs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#users={len(seqs)} items={catalog.num_items} domains={catalog.num_domains}\n")
        fh.write("#item_domains=" + ",".join(str(int(d)) for d in catalog.domain_of_item) + "\n")
        for s in seqs:
            fh.write(
                f"{s.user}\t{','.join(map(str, s.items))}\t{','.join(map(str, s.domains))}\n"
            )


def read_corpus(path):
    """Inverse of :func:`write_corpus`.  String ids are the decimal indices."""
    header = None
    item_domains = None
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#users="):
                try:
                    header = dict(tok.split("=") for tok in line[1:].split())
                    header = {k: int(v) for k, v in header.items()}
                except ValueError:
                    raise ParseError(path, lineno, "bad corpus header") from None
                continue
            if line.startswith("#item_domains="):
                body = line[len("#item_domains=") :]
                item_domains = [int(x) for x in body.split(",")] if body else []
                continue
            if line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, "expected user, items, domains")
            try:
                seqs.append(
                    UserSequence(
                        int(parts[0]),
                        [int(x) for x in parts[1].split(",") if x],
                        [int(x) for x in parts[2].split(",") if x],
                    )
                )
            except (ValueError, DataError) as exc:
                raise ParseError(path, lineno, str(exc)) from None
    if header is None:
        raise ParseError(path, 1, "missing '#users=... items=... domains=...' header")
    n_items, n_dom = header["items"], header["domains"]
    if item_domains is None:
        item_domains = np.full(n_items, -1, dtype=np.int64)
        for s in seqs:
            item_domains[s.items] = s.domains
        if (item_domains < 0).any():
            raise DataError(f"{path}: some items never occur and no #item_domains line given")
    if len(item_domains) != n_items:
        raise DataError(f"{path}: header says {n_items} items, item_domains has {len(item_domains)}")
    catalog = Catalog(
        [str(i) for i in range(n_items)], [str(d) for d in range(n_dom)], np.array(item_domains)
    )
    catalog.validate(seqs)
    return catalog, seqs


# -- synthetic data ----------------------------------------------------------------------------


@dataclass
class SynthConfig:
    num_users: int = 500
    num_domains: int = 3
    items_per_domain: int = 50
    seq_len_min: int = 12
    seq_len_max: int = 30
    cross_affinity: float = 0.8
    seed: int = 0
    latent_dim: int = 8
    sharpness: float = 3.0
    domain_concentration: float = 1.0

    def validate(self):
        if self.num_users < 0:
            raise DataError("num_users must be >= 0")
        if min(self.num_domains, self.items_per_domain, self.seq_len_min, self.latent_dim) < 1:
            raise DataError("counts must be >= 1")
        if self.seq_len_max < self.seq_len_min:
            raise DataError("seq_len_max < seq_len_min")
        if not 0.0 <= self.cross_affinity <= 1.0:
            raise DataError("cross_affinity must lie in [0, 1]")


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def generate_synthetic(cfg: SynthConfig):
    """Sample a multi-domain corpus with controllable cross-domain correlation.

    Each user holds one latent vector shared by all domains plus an
    independent latent per domain.  At every step the domain comes from the
    user's own domain mixture; with probability ``cross_affinity`` the item is
    drawn from a softmax over ``item_factors @ shared``, otherwise from the
    domain-private latent.  With ``cross_affinity=0`` item choices in
    different domains are independent given nothing.
    """
    cfg.validate()
    rng = component_rng(cfg.seed, "data")
    D, m, f = cfg.num_domains, cfg.items_per_domain, cfg.latent_dim
    factors = rng.normal(0.0, 1.0 / np.sqrt(f), size=(D, m, f))
    item_ids = [f"i{d}_{j}" for d in range(D) for j in range(m)]
    catalog = Catalog(item_ids, [f"d{d}" for d in range(D)], np.repeat(np.arange(D), m))

    seqs = []
    for u in range(cfg.num_users):
        mix = rng.dirichlet(np.full(D, cfg.domain_concentration))
        shared = rng.normal(size=f)
        private = rng.normal(size=(D, f))
        n = int(rng.integers(cfg.seq_len_min, cfg.seq_len_max + 1))
        p_shared = _softmax(cfg.sharpness * factors @ shared)  # (D, m)
        p_private = _softmax(cfg.sharpness * np.einsum("dmf,df->dm", factors, private))
        doms = rng.choice(D, size=n, p=mix)
        coin = rng.random(n) < cfg.cross_affinity
        probs = np.where(coin[:, None], p_shared[doms], p_private[doms])
        cdf = np.cumsum(probs, axis=1)
        draw = rng.random(n)[:, None] * cdf[:, -1:]
        local = np.minimum((cdf <= draw).sum(axis=1), m - 1)
        seqs.append(UserSequence(u, (doms * m + local).tolist(), doms.tolist()))
    return catalog, seqs


# -- splits ---------------------------------------------------------------------------------


@dataclass
class EvalTarget:
    user: int
    prefix_items: list[int]
    prefix_domains: list[int]
    target_item: int
    target_domain: int


def split_leave_one_out(seqs):
    """Hold out each user's final interaction.

    Returns ``(train, targets)`` where ``train[u]`` is the first ``n-1`` steps
    and ``targets[u]`` carries that same prefix plus the held-out item.
    """
    train, targets = [], []
    for s in seqs:
        if len(s) < 2:
            raise DataError(f"user {s.user}: leave-one-out needs length >= 2, got {len(s)}")
        train.append(UserSequence(s.user, list(s.items[:-1]), list(s.domains[:-1])))
        targets.append(
            EvalTarget(s.user, list(s.items[:-1]), list(s.domains[:-1]), s.items[-1], s.domains[-1])
        )
    return train, targets
