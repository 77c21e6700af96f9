"""Full sequence model: embeddings, stacked masked attention + DDSR layers, and the
domain-restricted retrieval head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attention import (
    LayerParams,
    ScoreCounter,
    alibi_bias,
    attend,
    attend_blocked,
    build_mask,
    project_split,
)
from .batch import SequenceBatch, make_batch, single
from .dataio import Catalog
from .ddsr import DdsrParams, build_domain_states, combine, ddsr_attend
from .embeddings import EmbeddingTables, lookup_items, tape
from .numerics import Tensor, log_softmax, matmul, no_grad, take
from .seeding import component_rng


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    k: int = 64
    h: int = 4
    L: int = 2
    n_max: int = 200
    num_negatives: int = 128
    use_tape: bool = True
    use_ddsr: bool = True
    intra_domain_mask: bool = True
    ddsr_exclude_absent_domains: bool = False
    use_residual: bool = True
    attention_backend: str = "masked"
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1 or self.h < 1 or self.k % self.h:
            raise ValueError(f"k={self.k} must be a positive multiple of h={self.h}")
        if self.L < 0:
            raise ValueError("L must be >= 0")
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")
        if self.n_max < 2:
            raise ValueError("n_max must be >= 2")
        if self.attention_backend not in ("masked", "blocked"):
            raise ValueError(f"unknown attention_backend {self.attention_backend!r}")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Trace:
    """Optional per-forward record of attention weights and DDSR outputs."""

    attention: list = field(default_factory=list)
    ddsr_out: list = field(default_factory=list)


class SequenceModel:
    """Transition-aware, intra-domain-masked transformer with DDSR layers.

    All parameters are created whatever the ablation flags, so two configs
    differing only in flags start from identical weights.
    """

    def __init__(self, cfg: ModelConfig, catalog: Catalog):
        cfg.validate()
        self.cfg = cfg
        self.catalog = catalog
        rng = component_rng(cfg.seed, "init")
        self.tables = EmbeddingTables.init(catalog.num_items, catalog.num_domains, cfg.n_max, cfg.k, rng)
        self.layers = [LayerParams.init(cfg.k, cfg.h, rng) for _ in range(cfg.L)]
        self.ddsr = [DdsrParams.init(cfg.k, rng) for _ in range(cfg.L)]
        self._bias_cache: dict[int, np.ndarray] = {}
        # replaceable for negative-control checks
        self.mask_fn = build_mask

    # -- parameters ---------------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        out = {f"emb.{k}": v for k, v in self.tables.parameters().items()}
        for i, (lp, dp) in enumerate(zip(self.layers, self.ddsr)):
            out.update({f"layer{i}.{k}": v for k, v in lp.parameters().items()})
            out.update({f"ddsr{i}.{k}": v for k, v in dp.parameters().items()})
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def _bias(self, n: int) -> np.ndarray:
        if n not in self._bias_cache:
            self._bias_cache[n] = alibi_bias(n, self.cfg.h)
        return self._bias_cache[n]

    # -- forward ------------------------------------------------------------------
    def embed(self, batch: SequenceBatch) -> Tensor:
        e = lookup_items(self.tables.item, batch.items)
        return tape(
            e,
            batch.domains,
            batch.next_domains,
            self.tables,
            valid=batch.valid,
            positions=batch.positions,
            enabled=self.cfg.use_tape,
        )

    def forward_batch(
        self, batch: SequenceBatch, counter: ScoreCounter | None = None, trace: Trace | None = None
    ) -> Tensor:
        """Final hidden states ``(B, n, k)``; padded rows are zero."""
        cfg = self.cfg
        if batch.length > cfg.n_max:
            raise ValueError(f"batch length {batch.length} exceeds n_max={cfg.n_max}")
        H = self.embed(batch)
        if cfg.L == 0:
            return H
        bias = self._bias(batch.length)
        blocked = cfg.attention_backend == "blocked"
        if blocked and batch.size != 1:
            raise ValueError("blocked attention backend runs one unpadded sequence at a time")
        if blocked and not batch.valid.all():
            raise ValueError("blocked attention backend does not take padding")
        mask = None if blocked else self.mask_fn(batch.domains, intra=cfg.intra_domain_mask)
        for lp, dp in zip(self.layers, self.ddsr):
            Q, K, V, U = project_split(H, lp)
            residual = H if cfg.use_residual else None
            if blocked:
                H_layer = attend_blocked(
                    Q[0], K[0], V[0], U[0], batch.domains[0], bias, lp,
                    intra=cfg.intra_domain_mask,
                    residual=None if residual is None else residual[0],
                    counter=counter,
                ).reshape(1, batch.length, cfg.k)
            else:
                H_layer, A = attend(
                    Q, K, V, U, mask, bias, lp,
                    residual=residual, valid=batch.valid, counter=counter, return_weights=True,
                )
                if trace is not None:
                    trace.attention.append(A.data)
            if cfg.use_ddsr:
                states = build_domain_states(H, batch.domains, self.catalog.num_domains)
                C = ddsr_attend(
                    H, states, dp, batch.valid,
                    exclude_absent=cfg.ddsr_exclude_absent_domains, counter=counter,
                )
                if trace is not None:
                    trace.ddsr_out.append(C.data)
                H_layer = combine(H_layer, C)
            H = H_layer
        return H

    def forward(self, items, domains, query_domain: int, counter=None) -> Tensor:
        """Hidden states ``(n, k)`` for one sequence."""
        H = self.forward_batch(single(items, domains, query_domain), counter=counter)
        return H.reshape(H.shape[1], H.shape[2])

    # -- scoring ------------------------------------------------------------------
    def domain_scores(self, h: np.ndarray, domain: int) -> np.ndarray:
        """Scores of every item in ``domain`` (no gradient)."""
        cand = self.catalog.items_in_domain[domain]
        return self.tables.item.data[cand] @ h

    def rank(self, h, target_item: int, target_domain: int) -> int:
        return rank_target(h, self.tables.item, self.catalog, target_item, target_domain)

    # -- checkpoint ----------------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        arrays = {f"param/{k}": v.data for k, v in self.parameters().items()}
        arrays["catalog/domain_of_item"] = self.catalog.domain_of_item
        meta = {"model_config": asdict(self.cfg), "num_domains": self.catalog.num_domains}
        for key, value in (extra or {}).items():
            if isinstance(value, np.ndarray):
                arrays[f"extra/{key}"] = value
            else:
                meta.setdefault("extra", {})[key] = value
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, catalog: Catalog | None = None):
        """Returns ``(model, extra)``.  ``catalog`` must match the checkpoint if given."""
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            stored_doi = z["catalog/domain_of_item"]
            params = {k[len("param/") :]: z[k] for k in z.files if k.startswith("param/")}
            extra = dict(meta.get("extra", {}))
            extra.update({k[len("extra/") :]: z[k] for k in z.files if k.startswith("extra/")})
        if catalog is None:
            n_dom = meta["num_domains"]
            catalog = Catalog(
                [str(i) for i in range(len(stored_doi))], [str(d) for d in range(n_dom)], stored_doi
            )
        elif catalog.num_items != len(stored_doi) or catalog.num_domains != meta["num_domains"]:
            raise CheckpointError(
                f"checkpoint has {len(stored_doi)} items / {meta['num_domains']} domains, "
                f"catalog has {catalog.num_items} / {catalog.num_domains}"
            )
        elif not np.array_equal(catalog.domain_of_item, stored_doi):
            raise CheckpointError("checkpoint item-to-domain assignment differs from the catalog")
        model = cls(ModelConfig.from_dict(meta["model_config"]), catalog)
        own = model.parameters()
        if set(own) != set(params):
            raise CheckpointError(f"parameter names differ: {sorted(set(own) ^ set(params))}")
        for name, t in own.items():
            if t.shape != params[name].shape:
                raise CheckpointError(f"{name}: checkpoint shape {params[name].shape} != model {t.shape}")
            t.data = params[name].astype(np.float64, copy=True)
        return model, extra


# -- loss and ranking ---------------------------------------------------------------------------


@dataclass
class LossInfo:
    steps: int
    degenerate: int


def sample_candidates(catalog: Catalog, targets, target_domains, num_negatives: int, rng):
    """Target-first candidate lists, negatives uniform without replacement within the
    target's domain.  Returns ``(cand, mask)`` of shape ``(S, 1 + num_negatives)``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    doms = np.asarray(target_domains, dtype=np.int64)
    S = len(targets)
    cand = np.zeros((S, 1 + num_negatives), dtype=np.int64)
    mask = np.zeros_like(cand, dtype=bool)
    cand[:, 0] = targets
    mask[:, 0] = True
    for d in np.unique(doms):
        rows = np.flatnonzero(doms == d)
        pool = catalog.items_in_domain[d]
        m = len(pool)
        take_n = min(num_negatives, m - 1)
        if take_n <= 0:
            continue
        keys = rng.random((len(rows), m))
        # position of each target inside the pool; the pool is sorted
        tpos = np.searchsorted(pool, targets[rows])
        keys[np.arange(len(rows)), tpos] = np.inf
        if take_n < m - 1:
            pick = np.argpartition(keys, take_n - 1, axis=1)[:, :take_n]
            pick = np.sort(pick, axis=1)
        else:
            pick = np.argsort(keys, axis=1, kind="stable")[:, :take_n]
            pick = np.sort(pick, axis=1)
        cand[rows, 1 : 1 + take_n] = pool[pick]
        mask[rows, 1 : 1 + take_n] = True
    return cand, mask


def sampled_softmax_loss(
    h: Tensor,
    item_table: Tensor,
    catalog: Catalog,
    targets,
    target_domains,
    num_negatives: int,
    rng,
) -> tuple[Tensor, LossInfo]:
    """Mean negative log-likelihood of each target among itself plus sampled
    same-domain negatives.

    ``h`` is ``(S, k)``, one row per prediction step.  Steps whose domain has a
    single item are degenerate: they are dropped from the mean and counted.
    """
    targets = np.asarray(targets, dtype=np.int64)
    target_domains = np.asarray(target_domains, dtype=np.int64)
    if not np.array_equal(catalog.domain_of_item[targets], target_domains):
        raise ValueError("a target item lies outside its stated domain")
    sizes = np.array([len(catalog.items_in_domain[d]) for d in target_domains])
    live = np.flatnonzero(sizes > 1)
    info = LossInfo(steps=len(live), degenerate=int(len(targets) - len(live)))
    if len(live) == 0:
        return Tensor(0.0), info
    if len(live) != len(targets):
        h = take(h, live)
        targets, target_domains = targets[live], target_domains[live]
    cand, mask = sample_candidates(catalog, targets, target_domains, num_negatives, rng)
    E = take(item_table, cand)  # (S, C, k)
    logits = matmul(E, h.reshape(h.shape[0], h.shape[1], 1)).reshape(cand.shape)
    logp = log_softmax(logits, mask)
    return -(logp[:, 0].mean()), info


def rank_from_scores(scores, target_pos: int) -> int:
    """1 + (# strictly higher) + (# other items tied with the target)."""
    scores = np.asarray(scores)
    t = scores[target_pos]
    return int(1 + (scores > t).sum() + (scores == t).sum() - 1)


def rank_target(h, item_table, catalog: Catalog, target_item: int, target_domain: int) -> int:
    """Pessimistic rank of the target among all items of its domain."""
    pool = catalog.items_in_domain[target_domain]
    pos = np.searchsorted(pool, target_item)
    if pos >= len(pool) or pool[pos] != target_item:
        raise ValueError(f"item {target_item} is not in domain {target_domain}")
    table = item_table.data if isinstance(item_table, Tensor) else np.asarray(item_table)
    hv = h.data if isinstance(h, Tensor) else np.asarray(h)
    return rank_from_scores(table[pool] @ hv, int(pos))


def training_batch(seqs) -> SequenceBatch:
    """Inputs x_1..x_{m-1} with targets x_2..x_m; the last input's next domain is d_m."""
    usable = [s for s in seqs if len(s) >= 2]
    return make_batch(
        [s.items[:-1] for s in usable],
        [s.domains[:-1] for s in usable],
        [s.domains[-1] for s in usable],
        [s.items[1:] for s in usable],
    )


def batch_loss(model: SequenceModel, batch: SequenceBatch, rng, counter=None):
    """Mean sampled-softmax NLL over every real next-item step of ``batch``."""
    H = model.forward_batch(batch, counter=counter)
    rows, cols = np.nonzero(batch.valid)
    flat = H.reshape(-1, model.cfg.k)
    h = take(flat, rows * batch.length + cols)
    return sampled_softmax_loss(
        h,
        model.tables.item,
        model.catalog,
        batch.targets[rows, cols],
        batch.next_domains[rows, cols],
        model.cfg.num_negatives,
        rng,
    )


def step_logits(model: SequenceModel, items, domains, query_domain: int, position: int) -> np.ndarray:
    """Domain-restricted scores at ``position`` (no gradient)."""
    with no_grad():
        H = model.forward(items, domains, query_domain)
    nxt = domains[position + 1] if position + 1 < len(domains) else query_domain
    return model.domain_scores(H.data[position], nxt)
