"""Self-checks: gradients, mask leakage, domain-state sweep, causality, op counts.

Each check returns a :class:`CheckResult`.  ``fault`` injects a known defect so
the suite can be shown to catch it: ``"mask"`` lets attention cross domain
boundaries, ``"grad"`` scales every tape gradient by 1.01.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import LayerParams, alibi_bias, attend, build_mask, project_split
from .dataio import Catalog, UserSequence
from .ddsr import DdsrParams, build_domain_states, ddsr_attend, phi
from .batch import next_domains_of, single
from .embeddings import EmbeddingTables, lookup_items, tape
from .model import ModelConfig, SequenceModel, Trace, batch_loss, step_logits, training_batch
from .numerics import Tensor, grad_errors, layer_norm, log_softmax, no_grad, silu, softmax_rows
from .perf import AccountingError, instrumented_forward
from .seeding import component_rng

GRAD_TOL = 1e-4
PARAM_SCALE = 0.5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def toy_catalog(num_domains: int = 3, per_domain: int = 4) -> Catalog:
    return Catalog(
        [f"i{i}" for i in range(num_domains * per_domain)],
        [f"d{d}" for d in range(num_domains)],
        np.repeat(np.arange(num_domains), per_domain),
    )


def random_sequence(rng, n: int, num_domains: int, per_domain: int) -> UserSequence:
    doms = rng.integers(0, num_domains, size=n)
    items = doms * per_domain + rng.integers(0, per_domain, size=n)
    return UserSequence(0, items.tolist(), doms.tolist())


def randomize(params, rng, scale: float = PARAM_SCALE) -> None:
    """Overwrite every parameter with U[-scale, scale] draws."""
    for p in params.values():
        p.data = rng.uniform(-scale, scale, size=p.shape)


def _tamper(fault):
    if fault == "grad":
        return lambda name, g: g * 1.01
    return None


def _grad_result(name, f, params, fault) -> CheckResult:
    errs = grad_errors(f, params, tape_transform=_tamper(fault))
    worst = max(errs, key=errs.get)
    return CheckResult(name, errs[worst] <= GRAD_TOL, f"max rel err {errs[worst]:.2e} ({worst})")


def check_op_gradients(rng, fault=None) -> list[CheckResult]:
    out = []
    x = Tensor(rng.uniform(-1, 1, size=(3, 5)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, size=(5, 4)), requires_grad=True)
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    weights = rng.uniform(-1, 1, size=(3, 5))
    cases = {
        "grad: matmul": lambda: ((x @ w) * (x @ w)).sum(),
        "grad: softmax_rows": lambda: (softmax_rows(x, mask) * weights).sum(),
        "grad: log_softmax": lambda: (log_softmax(x, mask) * weights).sum(),
        "grad: layer_norm": lambda: (layer_norm(x) * weights).sum(),
        "grad: silu": lambda: (silu(x) * weights).sum(),
    }
    for name, f in cases.items():
        out.append(_grad_result(name, f, {"x": x, "w": w}, fault))
    return out


def check_module_gradients(rng, fault=None) -> list[CheckResult]:
    k, h, n, D = 8, 2, 6, 3
    lp = LayerParams.init(k, h, rng)
    dp = DdsrParams.init(k, rng)
    tables = EmbeddingTables.init(12, D, n, k, rng)
    randomize(lp.parameters(), rng)
    randomize(dp.parameters(), rng)
    randomize(tables.parameters(), rng)
    H = Tensor(rng.uniform(-1, 1, size=(n, k)), requires_grad=True)
    doms = rng.integers(0, D, size=n)
    wts = rng.uniform(-1, 1, size=(n, k))
    mask = build_mask(doms)
    bias = alibi_bias(n, h)

    def layer():
        Q, K, V, U = project_split(H, lp)
        return (attend(Q, K, V, U, mask, bias, lp, residual=H) * wts).mean()

    split_w = [rng.uniform(-1, 1, size=(h, n, k // h)) for _ in range(4)]

    def proj():
        return sum((t * w).sum() for t, w in zip(project_split(H, lp), split_w))

    def ddsr():
        states = build_domain_states(H, doms, D)
        return (ddsr_attend(H, states, dp) * wts).mean()

    items = doms * 4 + rng.integers(0, 4, size=n)
    nxt = next_domains_of(doms, int(rng.integers(0, D)))

    def emb():
        return (tape(lookup_items(tables.item, items), doms, nxt, tables) * wts).sum()

    return [
        _grad_result("grad: project_split", proj, {"H": H, **lp.parameters()}, fault),
        _grad_result("grad: attention layer", layer, {"H": H, **lp.parameters()}, fault),
        _grad_result("grad: ddsr_attend", ddsr, {"H": H, **dp.parameters()}, fault),
        _grad_result("grad: tape embeddings", emb, tables.parameters(), fault),
    ]


def full_model_grad_check(seed: int = 0, fault=None, cfg: ModelConfig | None = None) -> CheckResult:
    """Full-model NLL on a 2-user toy batch (k=8, h=2, L=2, n=6, 3 domains)."""
    cfg = cfg or ModelConfig(k=8, h=2, L=2, n_max=6, num_negatives=2, seed=seed)
    cat = toy_catalog(3, 4)
    rng = np.random.default_rng(1000 + seed)
    seqs = [random_sequence(rng, 7, 3, 4) for _ in range(2)]
    model = SequenceModel(cfg, cat)
    randomize(model.parameters(), rng)
    batch = training_batch(seqs)
    return _grad_result(
        "grad: full model",
        lambda: batch_loss(model, batch, np.random.default_rng(seed))[0],
        model.parameters(),
        fault,
    )


def check_leakage(rng, trials: int = 50, fault=None) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        D = int(rng.integers(1, 6))
        n = int(rng.integers(1, 65))
        cat = toy_catalog(D, 4)
        model = SequenceModel(ModelConfig(k=8, h=2, L=2, n_max=64, seed=int(rng.integers(1 << 30))), cat)
        if fault == "mask":
            model.mask_fn = lambda d, intra=True: build_mask(d, intra=False)
        seq = random_sequence(rng, n, D, 4)
        trace = Trace()
        with no_grad():
            model.forward_batch(single(seq.items, seq.domains, seq.domains[-1]), trace=trace)
        d = np.asarray(seq.domains)
        cross = d[:, None] != d[None, :]
        for A in trace.attention:
            worst = max(worst, float(np.abs(A[0][:, cross]).sum()))
    return CheckResult("zero cross-domain leakage", worst == 0.0, f"max cross-domain weight mass {worst:.3g}")


def check_phi(rng, trials: int = 200) -> CheckResult:
    for _ in range(trials):
        D = int(rng.integers(1, 6))
        n = int(rng.integers(1, 201))
        doms = rng.integers(0, D, size=n)
        H = Tensor(rng.normal(size=(n, 3)))
        st = build_domain_states(H, doms, D)
        for d in range(D):
            for i in range(n):
                j = phi(doms, d, i)
                want = np.zeros(3) if j is None else H.data[j]
                if not np.array_equal(st.states.data[d, i], want) or st.present[d, i] != (j is not None):
                    return CheckResult("phi sweep vs brute force", False, f"mismatch at d={d} i={i}")
    return CheckResult("phi sweep vs brute force", True, f"{trials} sequences exact")


def perturb_after(seq: UserSequence, i: int, rng, num_domains: int, per_domain: int):
    """Copy of ``seq`` with every item after ``i`` redrawn and every domain after
    ``i + 1`` redrawn.  The domain at ``i + 1`` is what step ``i`` predicts, so it
    is part of the query and stays fixed."""
    n = len(seq)
    doms = list(seq.domains[: i + 2]) + rng.integers(0, num_domains, size=max(0, n - i - 2)).tolist()
    items = list(seq.items[: i + 1]) + [
        int(doms[j] * per_domain + rng.integers(0, per_domain)) for j in range(i + 1, n)
    ]
    return items, doms, int(rng.integers(0, num_domains))


def check_causality(rng, trials: int = 50) -> CheckResult:
    D, per = 3, 4
    cat = toy_catalog(D, per)
    for t in range(trials):
        cfg = ModelConfig(k=8, h=2, L=2, n_max=32, seed=int(rng.integers(1 << 30)))
        model = SequenceModel(cfg, cat)
        randomize(model.parameters(), rng)
        n = int(rng.integers(2, 25))
        seq = random_sequence(rng, n, D, per)
        i = int(rng.integers(0, n - 1))
        base = step_logits(model, seq.items, seq.domains, seq.domains[-1], i)
        items, doms, q = perturb_after(seq, i, rng, D, per)
        after = step_logits(model, items, doms, q, i)
        if not np.array_equal(base, after):
            return CheckResult("causality", False, f"trial {t}: logits at step {i} changed")
    return CheckResult("causality", True, f"{trials} perturbations bit-identical")


def check_accounting(rng, trials: int = 50) -> CheckResult:
    D = 4
    cat = toy_catalog(D, 4)
    for t in range(trials):
        cfg = ModelConfig(k=8, h=int(rng.choice([1, 2, 4])), L=int(rng.integers(1, 3)), n_max=64,
                          intra_domain_mask=bool(rng.integers(0, 2)))
        model = SequenceModel(cfg, cat)
        seq = random_sequence(rng, int(rng.integers(1, 64)), D, 4)
        try:
            instrumented_forward(seq.items, seq.domains, seq.domains[-1], model)
        except AccountingError as exc:
            return CheckResult("op-count accounting", False, str(exc))
    return CheckResult("op-count accounting", True, f"{trials} forwards exact")


def run_checks(seed: int = 0, fault: str | None = None, quick: bool = False) -> list[CheckResult]:
    if fault not in (None, "mask", "grad"):
        raise ValueError(f"unknown fault {fault!r}")
    rng = component_rng(seed, "check")
    results = []
    results += check_op_gradients(rng, fault)
    results += check_module_gradients(rng, fault)
    if not quick:
        results.append(full_model_grad_check(seed, fault))
    results.append(check_leakage(rng, 20 if quick else 50, fault))
    results.append(check_phi(rng, 50 if quick else 200))
    results.append(check_causality(rng, 10 if quick else 50))
    results.append(check_accounting(rng, 20 if quick else 50))
    return results
