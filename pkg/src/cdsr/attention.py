"""Intra-domain masked self-attention with ALiBi bias and HSTU-style gating."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, concat, layer_norm, silu, softmax_rows, take


@dataclass
class ScoreCounter:
    """Query-key score evaluations that reach a softmax, per forward call."""

    attention: int = 0
    ddsr: int = 0


@dataclass
class LayerParams:
    W_a: Tensor  # (k, 4k)
    b_a: Tensor  # (4k,)
    W_1: Tensor  # (k, k_ff)
    b_1: Tensor
    W_2: Tensor  # (k_ff, k)
    b_2: Tensor
    heads: int

    @classmethod
    def init(cls, k: int, heads: int, rng, ffn_mult: int = 4) -> LayerParams:
        if k % heads:
            raise ValueError(f"k={k} is not divisible by heads={heads}")
        k_ff = ffn_mult * k

        def dense(n_in, n_out):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        return cls(dense(k, 4 * k), zeros(4 * k), dense(k, k_ff), zeros(k_ff), dense(k_ff, k), zeros(k), heads)

    @property
    def k(self) -> int:
        return self.W_a.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "W_a": self.W_a,
            "b_a": self.b_a,
            "W_1": self.W_1,
            "b_1": self.b_1,
            "W_2": self.W_2,
            "b_2": self.b_2,
        }


def _heads(x: Tensor, h: int) -> Tensor:
    *lead, n, k = x.shape
    return x.reshape(*lead, n, h, k // h).swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, n, h * dh)


def project_split(H: Tensor, params: LayerParams):
    """Q, K, V, U = split(H @ W_a + b_a), each reshaped to ``(..., h, n, k/h)``.

    The 4k projection is cut in the fixed order Q, K, V, U.
    """
    k = params.k
    if H.shape[-1] != k:
        raise ValueError(f"hidden width {H.shape[-1]} != layer width {k}")
    P = H @ params.W_a + params.b_a
    return tuple(_heads(P[..., i * k : (i + 1) * k], params.heads) for i in range(4))


def build_mask(domains, pad_len: int = 0, intra: bool = True) -> np.ndarray:
    """Boolean ``allow[i, j]``: causal, same domain (if ``intra``), both real.

    ``domains`` may carry leading batch axes; negative entries and the first
    ``pad_len`` positions count as padding.
    """
    d = np.asarray(domains, dtype=np.int64)
    n = d.shape[-1]
    if pad_len:
        if pad_len >= n:
            raise ValueError(f"pad_len={pad_len} must be < n={n}")
        d = d.copy()
        d[..., :pad_len] = -1
    real = d >= 0
    allow = np.tril(np.ones((n, n), dtype=bool)) & real[..., :, None] & real[..., None, :]
    if intra:
        allow &= d[..., :, None] == d[..., None, :]
    return allow


def alibi_slopes(h: int) -> np.ndarray:
    """2^(-8 j / h) for heads j = 1..h."""
    return 2.0 ** (-8.0 * np.arange(1, h + 1) / h)


def alibi_bias(n: int, h: int) -> np.ndarray:
    """``(h, n, n)`` bias, ``-m_head * (i - j)`` on and below the diagonal, 0 above."""
    dist = np.arange(n)[:, None] - np.arange(n)[None, :]
    dist = np.where(dist >= 0, dist, 0)
    return -alibi_slopes(h)[:, None, None] * dist


def attention_weights(Q: Tensor, K: Tensor, mask, bias, k: int) -> Tensor:
    """softmax(((Q Kᵀ) + bias) / sqrt(k)) with disallowed pairs excluded."""
    scores = (Q @ K.swapaxes(-1, -2) + bias) * (1.0 / np.sqrt(k))
    return softmax_rows(scores, mask)


def gate_ffn(O: Tensor, U: Tensor, params: LayerParams, residual=None, valid=None) -> Tensor:
    """FFN(layer_norm(O) * U) [+ residual], zeroed on padded rows."""
    Y = layer_norm(_merge_heads(O)) * _merge_heads(U)
    H = silu(Y @ params.W_1 + params.b_1) @ params.W_2 + params.b_2
    if residual is not None:
        H = H + residual
    if valid is not None:
        H = H * np.asarray(valid, dtype=np.float64)[..., None]
    return H


def attend(
    Q,
    K,
    V,
    U,
    mask,
    bias,
    params: LayerParams,
    *,
    residual=None,
    valid=None,
    counter: ScoreCounter | None = None,
    return_weights: bool = False,
):
    """Masked multi-head attention followed by the gated feed-forward block.

    ``mask`` is ``(..., n, n)`` and shared by all heads; ``bias`` is
    ``(h, n, n)``.  Disallowed pairs get exactly zero weight.
    """
    mask = np.asarray(mask, dtype=bool)[..., None, :, :]
    A = attention_weights(Q, K, mask, bias, params.k)
    if counter is not None:
        counter.attention += int(np.broadcast_to(mask, A.shape).sum())
    H = gate_ffn(A @ V, U, params, residual, valid)
    return (H, A) if return_weights else H


def attend_blocked(
    Q,
    K,
    V,
    U,
    domains,
    bias,
    params: LayerParams,
    *,
    intra: bool = True,
    residual=None,
    counter: ScoreCounter | None = None,
):
    """Same result as :func:`attend` for one unpadded sequence, computing only
    the per-domain diagonal blocks of the score matrix.

    Tensors carry no batch axis here: ``Q`` is ``(h, n, k/h)``.
    """
    d = np.asarray(domains, dtype=np.int64)
    n = d.shape[0]
    groups = [np.flatnonzero(d == g) for g in dict.fromkeys(d.tolist())] if intra else [np.arange(n)]
    outs = []
    for idx in groups:
        s = len(idx)
        Qd, Kd, Vd = take(Q, idx, axis=1), take(K, idx, axis=1), take(V, idx, axis=1)
        block_bias = bias[:, idx][:, :, idx]
        causal = np.tril(np.ones((s, s), dtype=bool))
        A = attention_weights(Qd, Kd, causal, block_bias, params.k)
        if counter is not None:
            counter.attention += params.heads * s * (s + 1) // 2
        outs.append(A @ Vd)
    order = np.concatenate(groups)
    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = np.arange(n)
    O = take(concat(outs, axis=1), inverse, axis=1)
    return gate_ffn(O, U, params, residual)
