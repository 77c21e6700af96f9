"""Item, domain and position tables and transition-aware positional embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, take

INIT_STD = 0.02


@dataclass
class EmbeddingTables:
    item: Tensor  # (num_items, k), also the output table
    domain: Tensor  # (num_domains, k)
    position: Tensor  # (n_max, k)
    tape_W: Tensor  # (k, k)
    tape_b: Tensor  # (k,)

    @classmethod
    def init(cls, num_items: int, num_domains: int, n_max: int, k: int, rng) -> EmbeddingTables:
        def normal(*shape):
            return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

        return cls(
            item=normal(num_items, k),
            domain=normal(num_domains, k),
            position=normal(n_max, k),
            tape_W=Tensor(np.eye(k) + rng.normal(0.0, INIT_STD, size=(k, k)), requires_grad=True),
            tape_b=Tensor(np.zeros(k), requires_grad=True),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            "item": self.item,
            "domain": self.domain,
            "position": self.position,
            "tape_W": self.tape_W,
            "tape_b": self.tape_b,
        }

    @property
    def n_max(self) -> int:
        return self.position.shape[0]


def lookup_items(table: Tensor, items) -> Tensor:
    """Rows of the item table; repeated indices give repeated rows."""
    return take(table, np.asarray(items, dtype=np.int64))


def transition_term(tables: EmbeddingTables, domains, next_domains) -> Tensor:
    """r_i = M[d_{i+1}] * (M[d_i] @ W + b) where the domain changes, else 0.

    Entries with a negative (padding) domain on either side give 0.
    """
    cur = np.asarray(domains, dtype=np.int64)
    nxt = np.asarray(next_domains, dtype=np.int64)
    switch = ((cur != nxt) & (cur >= 0) & (nxt >= 0)).astype(np.float64)[..., None]
    d_cur = take(tables.domain, np.maximum(cur, 0))
    d_nxt = take(tables.domain, np.maximum(nxt, 0))
    return d_nxt * (d_cur @ tables.tape_W + tables.tape_b) * switch


def tape(
    e: Tensor,
    domains,
    next_domains,
    tables: EmbeddingTables,
    *,
    valid=None,
    positions=None,
    enabled: bool = True,
) -> Tensor:
    """ê_i = e_i + P[pos_i] + r_i for real positions; padded slots become 0.

    ``domains``/``next_domains`` are index arrays shaped like ``e`` minus the
    feature axis.  For a single sequence use
    :func:`cdsr.batch.next_domains_of` to derive ``next_domains`` from the
    query domain.
    """
    cur = np.asarray(domains, dtype=np.int64)
    n = cur.shape[-1]
    if n > tables.n_max:
        raise ValueError(f"sequence length {n} exceeds n_max={tables.n_max}")
    if e.shape[:-1] != cur.shape:
        raise ValueError(f"embeddings {e.shape} do not match domains {cur.shape}")
    if positions is None:
        positions = np.broadcast_to(np.arange(n), cur.shape)
    if valid is None:
        valid = cur >= 0
    keep = np.asarray(valid, dtype=np.float64)[..., None]
    out = e + take(tables.position, np.asarray(positions, dtype=np.int64))
    if enabled:
        out = out + transition_term(tables, cur, next_domains)
    return out * keep
