"""Left-padded batches of variable-length sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD_DOMAIN = -1


@dataclass
class SequenceBatch:
    """Aligned ``(B, n)`` index arrays.

    Padding sits on the left.  ``positions`` count from the first real event
    of each row; padded slots hold 0 there and in ``items``, ``-1`` in the
    domain arrays.  ``next_domains[b, i]`` is the domain the step-``i`` hidden
    state is asked to predict into (the following event's domain, or the query
    domain at the last position).
    """

    items: np.ndarray
    domains: np.ndarray
    next_domains: np.ndarray
    valid: np.ndarray
    positions: np.ndarray
    targets: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.items.shape[0]

    @property
    def length(self) -> int:
        return self.items.shape[1]

    @property
    def pad_lens(self) -> np.ndarray:
        return self.length - self.valid.sum(axis=1)


def next_domains_of(domains, query_domain: int) -> np.ndarray:
    """Per-position "next domain": the shifted domain sequence ending in ``query_domain``."""
    d = np.asarray(domains, dtype=np.int64)
    return np.append(d[1:], np.int64(query_domain))


def make_batch(items_list, domains_list, query_domains, targets_list=None) -> SequenceBatch:
    B = len(items_list)
    if not (len(domains_list) == len(query_domains) == B):
        raise ValueError("items, domains and query domains must have one entry per row")
    n = max((len(x) for x in items_list), default=0)
    items = np.zeros((B, n), dtype=np.int64)
    domains = np.full((B, n), PAD_DOMAIN, dtype=np.int64)
    nxt = np.full((B, n), PAD_DOMAIN, dtype=np.int64)
    valid = np.zeros((B, n), dtype=bool)
    positions = np.zeros((B, n), dtype=np.int64)
    targets = None if targets_list is None else np.full((B, n), -1, dtype=np.int64)
    for b, (it, dm, q) in enumerate(zip(items_list, domains_list, query_domains)):
        m = len(it)
        if len(dm) != m:
            raise ValueError(f"row {b}: {m} items but {len(dm)} domains")
        if m == 0:
            continue
        s = n - m
        items[b, s:] = it
        domains[b, s:] = dm
        nxt[b, s:] = next_domains_of(dm, q)
        valid[b, s:] = True
        positions[b, s:] = np.arange(m)
        if targets is not None:
            targets[b, s:] = targets_list[b]
    return SequenceBatch(items, domains, nxt, valid, positions, targets)


def single(items, domains, query_domain: int) -> SequenceBatch:
    return make_batch([list(items)], [list(domains)], [query_domain])
