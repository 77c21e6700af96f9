"""Exact attention-cost accounting and a small wall-clock benchmark.

The cost unit is one query-key score that reaches a softmax.  Projections,
value aggregation and the FFN are identical across masked and dense variants
and are not counted.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attention import LayerParams, ScoreCounter, alibi_bias, attend, attend_blocked, build_mask, project_split
from .model import SequenceModel
from .numerics import Tensor, no_grad


class AccountingError(AssertionError):
    pass


def causal_pairs(s: int) -> int:
    return s * (s + 1) // 2


@dataclass
class AttentionCostReport:
    sizes: dict[int, int]
    S: int
    dense_causal_pairs: int
    intra_causal_pairs: int
    delta: float
    ratio: float
    quadratic_ratio: float
    num_domains: int
    ddsr_pairs: int

    def check(self) -> list[str]:
        bad = []
        if self.intra_causal_pairs > self.dense_causal_pairs:
            bad.append("intra pairs exceed dense pairs")
        if self.ratio > self.delta + 1.0 / self.S + 1e-12:
            bad.append(f"ratio {self.ratio} > delta + 1/S")
        if len(self.sizes) == 1 and self.intra_causal_pairs != self.dense_causal_pairs:
            bad.append("single domain but intra != dense")
        if self.intra_causal_pairs > self.delta * causal_pairs(self.S) + self.S + 1e-9:
            bad.append("delta bound violated")
        return bad


def count_attention_pairs(domains, num_domains: int | None = None) -> AttentionCostReport:
    """Causal score counts for intra-domain versus dense attention on one sequence.

    ``num_domains`` sizes the DDSR query set; it defaults to the number of
    distinct domains in the sequence.
    """
    d = np.asarray(domains, dtype=np.int64)
    if d.size == 0:
        raise ValueError("empty domain sequence")
    vals, counts = np.unique(d, return_counts=True)
    sizes = {int(v): int(c) for v, c in zip(vals, counts)}
    S = int(d.size)
    intra = sum(causal_pairs(s) for s in sizes.values())
    dense = causal_pairs(S)
    D = len(sizes) if num_domains is None else num_domains
    return AttentionCostReport(
        sizes=sizes,
        S=S,
        dense_causal_pairs=dense,
        intra_causal_pairs=intra,
        delta=max(sizes.values()) / S,
        ratio=intra / dense,
        quadratic_ratio=sum(s * s for s in sizes.values()) / (S * S),
        num_domains=D,
        ddsr_pairs=D * dense,
    )


def corpus_delta(domain_seqs) -> float:
    """Largest per-sequence delta over a corpus."""
    return max(count_attention_pairs(d).delta for d in domain_seqs)


def instrumented_forward(items, domains, query_domain: int, model: SequenceModel):
    """Run one forward pass and verify the measured score count against the
    closed form.  Returns ``(H, counter)``; raises :class:`AccountingError` on
    any mismatch.
    """
    counter = ScoreCounter()
    with no_grad():
        H = model.forward(items, domains, query_domain, counter=counter)
    rep = count_attention_pairs(domains, model.catalog.num_domains)
    cfg = model.cfg
    pairs = rep.intra_causal_pairs if cfg.intra_domain_mask else rep.dense_causal_pairs
    expected = pairs * cfg.h * cfg.L
    if counter.attention != expected:
        raise AccountingError(f"attention score ops: measured {counter.attention}, expected {expected}")
    if cfg.use_ddsr and not cfg.ddsr_exclude_absent_domains:
        want = rep.ddsr_pairs * cfg.L
        if counter.ddsr != want:
            raise AccountingError(f"DDSR score ops: measured {counter.ddsr}, expected {want}")
    return H, counter


def compositions(S: int, D: int):
    """All ordered ways of writing ``S`` as ``D`` positive parts."""
    if D == 1:
        yield (S,)
        return
    for first in range(1, S - D + 2):
        for rest in compositions(S - first, D - 1):
            yield (first, *rest)


def balanced_partition(S: int, D: int) -> tuple[int, ...]:
    q, r = divmod(S, D)
    return tuple([q + 1] * r + [q] * (D - r))


# -- wall clock ----------------------------------------------------------------------------


def sample_domains(S: int, D: int, distribution: str, rng) -> np.ndarray:
    """Domain sequence of length ``S`` over ``D`` domains.

    ``distribution`` is ``"uniform"`` (equal expected shares), ``"balanced"``
    (exactly balanced counts, shuffled) or ``"zipf"`` (share of domain j
    proportional to 1/(j+1)).
    """
    if distribution == "balanced":
        d = np.repeat(np.arange(D), balanced_partition(S, D))
        return rng.permutation(d)
    if distribution == "uniform":
        p = np.full(D, 1.0 / D)
    elif distribution == "zipf":
        p = 1.0 / np.arange(1, D + 1)
        p /= p.sum()
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    return rng.choice(D, size=S, p=p)


@dataclass
class BenchRow:
    S: int
    D: int
    distribution: str
    dense_pairs: int
    intra_pairs: int
    ratio: float
    delta: float
    median_ms_dense: float
    median_ms_intra: float

    COLUMNS = (
        "S", "D", "distribution", "dense_pairs", "intra_pairs", "ratio", "delta",
        "median_ms_dense", "median_ms_intra",
    )


def bench(D: int, sizes, repeats: int = 5, distribution: str = "uniform", k: int = 64, h: int = 4, seed: int = 0):
    """Median wall time of one attention layer, dense-causal versus per-domain blocked.

    Informational only: the blocked path skips off-domain blocks but runs them
    as separate small products.  The domain sequences are the first draws of
    ``default_rng(seed)``, one per size in order.
    """
    rng = np.random.default_rng(seed)
    domain_seqs = [sample_domains(S, D, distribution, rng) for S in sizes]
    params = LayerParams.init(k, h, rng)
    rows = []
    for S, doms in zip(sizes, domain_seqs):
        H = Tensor(rng.normal(size=(S, k)))
        bias = alibi_bias(S, h)
        dense_mask = build_mask(doms, intra=False)
        times_dense, times_intra = [], []
        counter = ScoreCounter()
        with no_grad():
            Q, K, V, U = project_split(H, params)
            for _ in range(repeats):
                t0 = time.perf_counter()
                attend(Q, K, V, U, dense_mask, bias, params)
                times_dense.append(time.perf_counter() - t0)
                counter.attention = 0
                t0 = time.perf_counter()
                attend_blocked(Q, K, V, U, doms, bias, params, counter=counter)
                times_intra.append(time.perf_counter() - t0)
        rep = count_attention_pairs(doms)
        if counter.attention != rep.intra_causal_pairs * h:
            raise AccountingError(f"bench S={S}: measured {counter.attention} != {rep.intra_causal_pairs * h}")
        rows.append(
            BenchRow(
                S, D, distribution, rep.dense_causal_pairs, rep.intra_causal_pairs,
                rep.ratio, rep.delta,
                1e3 * float(np.median(times_dense)), 1e3 * float(np.median(times_intra)),
            )
        )
    return rows


def format_bench(rows) -> str:
    """Tab-separated table with a header line."""
    lines = ["\t".join(BenchRow.COLUMNS)]
    for r in rows:
        lines.append(
            f"{r.S}\t{r.D}\t{r.distribution}\t{r.dense_pairs}\t{r.intra_pairs}\t"
            f"{r.ratio:.6f}\t{r.delta:.6f}\t{r.median_ms_dense:.4f}\t{r.median_ms_intra:.4f}"
        )
    return "\n".join(lines) + "\n"


def parse_bench(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    cols = lines[0].split("\t")
    return [dict(zip(cols, ln.split("\t"))) for ln in lines[1:]]
