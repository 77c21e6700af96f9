"""Training loop, leave-one-out ranking metrics and the ablation matrix."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .batch import make_batch
from .dataio import EvalTarget, UserSequence
from .model import ModelConfig, SequenceModel, batch_loss, training_batch
from .numerics import NumericError, no_grad
from .seeding import component_rng

log = logging.getLogger(__name__)

HR_KS = (1, 10, 50, 100, 200)
NDCG_KS = (10, 50, 100, 200)


class TrainingAborted(NumericError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 500
    clip_norm: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class TrainState:
    """Everything needed to resume training bit-identically."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng_state: dict

    @classmethod
    def fresh(cls, model: SequenceModel, seed: int) -> TrainState:
        params = model.parameters()
        rng = component_rng(seed, "train")
        return cls(
            step=0,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            rng_state=rng.bit_generator.state,
        )

    def to_extra(self) -> dict:
        out = {"train_step": self.step, "train_rng": self.rng_state}
        for k in self.m:
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
        return out

    @classmethod
    def from_extra(cls, extra: dict) -> TrainState:
        m = {k[len("adam_m/") :]: v for k, v in extra.items() if k.startswith("adam_m/")}
        v = {k[len("adam_v/") :]: v for k, v in extra.items() if k.startswith("adam_v/")}
        return cls(int(extra["train_step"]), m, v, extra["train_rng"])


def adam_update(model: SequenceModel, state: TrainState, cfg: TrainConfig) -> float:
    """Clip the global gradient norm, then apply one Adam step.  Returns the pre-clip norm."""
    params = model.parameters()
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    scale = cfg.clip_norm / norm if cfg.clip_norm > 0 and norm > cfg.clip_norm else 1.0
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for k, p in params.items():
        g = grads[k] * scale
        m = state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        if cfg.lr:
            p.data = p.data - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return norm


@dataclass
class TrainResult:
    losses: list[float]
    state: TrainState
    degenerate_steps: int = 0


def train(
    model: SequenceModel,
    seqs: list[UserSequence],
    cfg: TrainConfig,
    *,
    state: TrainState | None = None,
    steps: int | None = None,
    on_step=None,
) -> TrainResult:
    """Minimise the sampled-softmax NLL with Adam.

    ``seqs`` are training sequences (the held-out final item already removed).
    Each step samples ``batch_size`` sequences uniformly with replacement from
    the training-batch RNG, so a resumed run continues exactly where the saved
    state left off.
    """
    cfg.validate()
    usable = [s for s in seqs if len(s) >= 2]
    if not usable:
        raise ValueError("no training sequence has two or more events")
    state = state or TrainState.fresh(model, cfg.seed)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    todo = cfg.max_steps - state.step if steps is None else steps
    losses, degenerate = [], 0
    for _ in range(max(todo, 0)):
        idx = rng.integers(0, len(usable), size=min(cfg.batch_size, len(usable)))
        batch = training_batch([usable[i] for i in idx])
        model.zero_grad()
        try:
            loss, info = batch_loss(model, batch, rng)
        except NumericError as exc:
            raise TrainingAborted(state.step + 1, str(exc)) from exc
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingAborted(state.step + 1, f"loss={value}")
        if loss.requires_grad:
            loss.backward()
        adam_update(model, state, cfg)
        state.rng_state = rng.bit_generator.state
        losses.append(value)
        degenerate += info.degenerate
        if on_step is not None:
            on_step(state.step, value)
    if degenerate:
        log.warning("%d prediction steps fell in single-item domains and were skipped", degenerate)
    return TrainResult(losses, state, degenerate)


# -- metrics -------------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Ranking metrics in percentage points."""

    hr: dict[int, float]
    mrr: float
    ndcg: dict[int, float]
    num_users: int

    def flat(self) -> dict[str, float]:
        out = {f"HR@{k}": v for k, v in self.hr.items()}
        out["MRR"] = self.mrr
        out.update({f"NDCG@{k}": v for k, v in self.ndcg.items()})
        return out

    @classmethod
    def from_flat(cls, d: dict, num_users: int = 0) -> MetricsReport:
        return cls(
            {int(k[3:]): float(v) for k, v in d.items() if k.startswith("HR@")},
            float(d["MRR"]),
            {int(k[5:]): float(v) for k, v in d.items() if k.startswith("NDCG@")},
            num_users,
        )

    def violations(self, tol: float = 1e-9) -> list[str]:
        """Broken report invariants; empty when the report is consistent."""
        bad = []
        values = self.flat()
        for name, v in values.items():
            if not (-tol <= v <= 100.0 + tol):
                bad.append(f"{name}={v} outside [0, 100]")
        hks, nks = sorted(self.hr), sorted(self.ndcg)
        for a, b in zip(hks, hks[1:]):
            if self.hr[b] < self.hr[a] - tol:
                bad.append(f"HR@{b} < HR@{a}")
        for a, b in zip(nks, nks[1:]):
            if self.ndcg[b] < self.ndcg[a] - tol:
                bad.append(f"NDCG@{b} < NDCG@{a}")
        for k in nks:
            if k in self.hr and self.hr[k] < self.ndcg[k] - tol:
                bad.append(f"HR@{k} < NDCG@{k}")
        for k in hks:
            if self.mrr < self.hr[k] / k - tol:
                bad.append(f"MRR < HR@{k}/{k}")
        return bad


def metrics_from_ranks(ranks) -> MetricsReport:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks to summarise")
    if (r < 1).any():
        raise ValueError("ranks start at 1")
    hr = {k: 100.0 * float(np.mean(r <= k)) for k in HR_KS}
    gain = 1.0 / np.log2(r + 1.0)
    ndcg = {k: 100.0 * float(np.mean(np.where(r <= k, gain, 0.0))) for k in NDCG_KS}
    return MetricsReport(hr, 100.0 * float(np.mean(1.0 / r)), ndcg, int(r.size))


def _length_buckets(lengths, batch_size):
    order = np.argsort(lengths, kind="stable")
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def eval_ranks(model: SequenceModel, targets: list[EvalTarget], batch_size: int = 64) -> np.ndarray:
    """Rank of every held-out item given its full prefix and true domain."""
    ranks = np.zeros(len(targets), dtype=np.int64)
    with no_grad():
        for chunk in _length_buckets([len(t.prefix_items) for t in targets], batch_size):
            batch = make_batch(
                [targets[i].prefix_items for i in chunk],
                [targets[i].prefix_domains for i in chunk],
                [targets[i].target_domain for i in chunk],
            )
            H = model.forward_batch(batch).data[:, -1, :]
            for row, i in enumerate(chunk):
                t = targets[i]
                ranks[i] = model.rank(H[row], t.target_item, t.target_domain)
    return ranks


def evaluate(model: SequenceModel, targets: list[EvalTarget], batch_size: int = 64) -> MetricsReport:
    return metrics_from_ranks(eval_ranks(model, targets, batch_size))


def next_item_ranks(model: SequenceModel, seqs: list[UserSequence], batch_size: int = 64) -> np.ndarray:
    """Ranks of every next-item step inside ``seqs`` (training-set fit)."""
    usable = [s for s in seqs if len(s) >= 2]
    out = []
    with no_grad():
        for chunk in _length_buckets([len(s) for s in usable], batch_size):
            batch = training_batch([usable[i] for i in chunk])
            H = model.forward_batch(batch).data
            for b, c in zip(*np.nonzero(batch.valid)):
                out.append(model.rank(H[b, c], int(batch.targets[b, c]), int(batch.next_domains[b, c])))
    return np.asarray(out, dtype=np.int64)


# -- ablation matrix --------------------------------------------------------------------------

VARIANTS = {
    "full": dict(use_tape=True, use_ddsr=True, intra_domain_mask=True),
    "w/o DDSR": dict(use_tape=True, use_ddsr=False, intra_domain_mask=True),
    "w/o TAPE": dict(use_tape=False, use_ddsr=True, intra_domain_mask=True),
    "intra-only": dict(use_tape=False, use_ddsr=False, intra_domain_mask=True),
    "dense-alibi": dict(use_tape=False, use_ddsr=False, intra_domain_mask=False),
}


@dataclass
class VariantRow:
    variant: str
    seeds: list[int]
    mean: dict[str, float]
    stddev: dict[str, float]
    runs: list[dict[str, float]] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        return json.dumps(
            {"variant": self.variant, "seeds": self.seeds, "mean": self.mean, "stddev": self.stddev},
            sort_keys=True,
        )


def aggregate(variant: str, seeds, reports: list[MetricsReport]) -> VariantRow:
    """Mean and population standard deviation of each metric across runs."""
    flats = [r.flat() for r in reports]
    keys = list(flats[0])
    arr = np.array([[f[k] for k in keys] for f in flats])
    return VariantRow(
        variant,
        list(seeds),
        dict(zip(keys, arr.mean(axis=0).tolist())),
        dict(zip(keys, arr.std(axis=0, ddof=0).tolist())),
        flats,
    )


def run_matrix(
    catalog,
    seqs,
    base_cfg: ModelConfig,
    train_cfg: TrainConfig,
    variants=None,
    seeds=(0,),
    on_run=None,
) -> list[VariantRow]:
    """Train and evaluate every ``(variant, seed)``; one aggregated row per variant.

    ``variants`` is a list of names from :data:`VARIANTS` or ``(name, flags)``
    pairs.  Seeds drive both parameter init and batch sampling.
    """
    if not seeds:
        raise ValueError("run_matrix needs at least one seed")
    from .dataio import split_leave_one_out

    train_seqs, targets = split_leave_one_out(seqs)
    rows = []
    for v in variants or list(VARIANTS):
        name, flags = (v, VARIANTS[v]) if isinstance(v, str) else v
        reports = []
        for seed in seeds:
            model = SequenceModel(replace(base_cfg, seed=seed, **flags), catalog)
            train(model, train_seqs, replace(train_cfg, seed=seed))
            rep = evaluate(model, targets)
            bad = rep.violations()
            if bad:
                raise AssertionError(f"{name} seed {seed}: inconsistent report: {bad}")
            reports.append(rep)
            if on_run is not None:
                on_run(name, seed, rep)
        rows.append(aggregate(name, seeds, reports))
    return rows


def write_matrix(path, rows: list[VariantRow]) -> None:
    """One JSON object per line: ``variant``, ``seeds``, ``mean``, ``stddev``."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(r.to_json() + "\n")


def read_matrix(path) -> list[VariantRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                rows.append(VariantRow(d["variant"], d["seeds"], d["mean"], d["stddev"]))
    return rows


def write_report(path, report: MetricsReport, variant: str = "model", seeds=()) -> None:
    row = VariantRow(variant, list(seeds), report.flat(), {k: 0.0 for k in report.flat()})
    payload = json.loads(row.to_json())
    payload["num_users"] = report.num_users
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True) + "\n")


def read_report(path) -> MetricsReport:
    with open(path, encoding="utf-8") as fh:
        d = json.loads(fh.readline())
    return MetricsReport.from_flat(d["mean"], d.get("num_users", 0))


def format_table(rows: list[VariantRow]) -> str:
    keys = list(rows[0].mean) if rows else []
    head = "variant".ljust(14) + "".join(k.rjust(16) for k in keys)
    lines = [head]
    for r in rows:
        cells = "".join(f"{r.mean[k]:8.2f} ({r.stddev[k]:4.2f})".rjust(16) for k in keys)
        lines.append(r.variant.ljust(14) + cells)
    return "\n".join(lines)


def config_dict(cfg) -> dict:
    return asdict(cfg)
