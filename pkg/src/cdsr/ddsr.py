"""Dynamic domain state representation: per-domain latest hidden states used as
queries of an auxiliary causal attention whose output is added to each layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import ScoreCounter
from .numerics import Tensor, layer_norm, softmax_rows, take


@dataclass
class DdsrParams:
    W_c: Tensor  # (k, 2k)
    b_c: Tensor  # (2k,)
    W_q: Tensor  # (k, k)
    b_q: Tensor  # (k,)

    @classmethod
    def init(cls, k: int, rng) -> DdsrParams:
        std = 1.0 / np.sqrt(k)
        return cls(
            Tensor(rng.normal(0.0, std, size=(k, 2 * k)), requires_grad=True),
            Tensor(np.zeros(2 * k), requires_grad=True),
            Tensor(rng.normal(0.0, std, size=(k, k)), requires_grad=True),
            Tensor(np.zeros(k), requires_grad=True),
        )

    @property
    def k(self) -> int:
        return self.W_q.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"W_c": self.W_c, "b_c": self.b_c, "W_q": self.W_q, "b_q": self.b_q}


@dataclass
class DomainStateMatrix:
    states: Tensor  # (..., D, n, k)
    present: np.ndarray  # (..., D, n) bool
    source: np.ndarray  # (..., D, n) int, phi_d(i) or -1


def phi(domains, d: int, i: int) -> int | None:
    """Largest ``j <= i`` with ``domains[j] == d`` (0-based), or ``None``."""
    for j in range(i, -1, -1):
        if domains[j] == d:
            return j
    return None


def last_seen_index(domains, num_domains: int) -> np.ndarray:
    """Left-to-right sweep giving ``phi_d(i)`` for every ``(d, i)``; -1 when absent.

    ``domains`` is ``(..., n)``; negative entries are padding and never seen.
    """
    d = np.asarray(domains, dtype=np.int64)
    lead, n = d.shape[:-1], d.shape[-1]
    flat = d.reshape(-1, n)
    out = np.full((flat.shape[0], num_domains, n), -1, dtype=np.int64)
    last = np.full((flat.shape[0], num_domains), -1, dtype=np.int64)
    rows = np.arange(flat.shape[0])
    for i in range(n):
        cur = flat[:, i]
        hit = cur >= 0
        last[rows[hit], cur[hit]] = i
        out[:, :, i] = last
    return out.reshape(*lead, num_domains, n)


def build_domain_states(H_prev: Tensor, domains, num_domains: int) -> DomainStateMatrix:
    """states[d, i] = H_prev[phi_d(i)] when domain ``d`` occurred by ``i``, else zeros."""
    src = last_seen_index(domains, num_domains)
    present = src >= 0
    n, k = H_prev.shape[-2], H_prev.shape[-1]
    lead = H_prev.shape[:-2]
    flat_H = H_prev.reshape(-1, k)
    offsets = (np.arange(int(np.prod(lead, dtype=np.int64))) * n).reshape(*lead, 1, 1)
    gathered = take(flat_H, np.where(present, src, 0) + offsets)
    states = gathered * present[..., None].astype(np.float64)
    return DomainStateMatrix(states, present, src)


def ddsr_attend(
    H_prev: Tensor,
    states: DomainStateMatrix,
    params: DdsrParams,
    valid=None,
    *,
    exclude_absent: bool = False,
    counter: ScoreCounter | None = None,
) -> Tensor:
    """C = layer_norm(sum_d softmax(Q_d Kᵀ / sqrt(k)) V), single head, causal.

    K, V come from ``H_prev @ W_c + b_c``; Q_d from the domain states.  With
    ``exclude_absent`` the domains not yet seen at a position drop out of the
    sum; otherwise their zero state still contributes through ``b_q``.
    Padded positions are excluded as keys and get zero output rows.
    """
    k = params.k
    n = H_prev.shape[-2]
    KV = H_prev @ params.W_c + params.b_c
    K, V = KV[..., :k], KV[..., k:]
    Q = states.states @ params.W_q + params.b_q  # (..., D, n, k)
    real = np.ones(H_prev.shape[:-1], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    causal = np.tril(np.ones((n, n), dtype=bool))
    mask = causal & real[..., :, None] & real[..., None, :]  # (..., n, n)
    mask = mask[..., None, :, :]
    if exclude_absent:
        mask = mask & states.present[..., :, :, None]
    scores = (Q @ K[..., None, :, :].swapaxes(-1, -2)) * (1.0 / np.sqrt(k))
    mask = np.broadcast_to(mask, scores.shape)
    if counter is not None:
        counter.ddsr += int(mask.sum())
    A = softmax_rows(scores, mask)
    mixed = (A @ V[..., None, :, :]).sum(axis=-3)
    return layer_norm(mixed) * real[..., None].astype(np.float64)


def combine(H_layer: Tensor, C: Tensor) -> Tensor:
    return H_layer + C
