"""Command-line entry point: ``cdsr <subcommand> [--config FILE] [--key=value ...]``.

Configuration comes from a plain ``key = value`` file, then command-line
overrides.  Every key is checked against one flat schema built from the model,
training and synthetic-data configs plus the path and run options below.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from .dataio import (
    DataError,
    SynthConfig,
    generate_synthetic,
    ingest,
    preprocess,
    read_corpus,
    sequences_to_events,
    split_leave_one_out,
    write_corpus,
    write_events,
)
from .model import CheckpointError, ModelConfig, SequenceModel
from .numerics import NumericError
from .traineval import (
    VARIANTS,
    TrainConfig,
    TrainState,
    evaluate,
    format_table,
    run_matrix,
    train,
    write_matrix,
    write_report,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4, 5

log = logging.getLogger("cdsr")


class ConfigError(ValueError):
    pass


@dataclass
class RunOptions:
    """Keys that are not part of the model, training or synthetic-data configs."""

    events: str = "events.tsv"
    corpus: str = "corpus.tsv"
    checkpoint: str = "model.npz"
    loss_log: str = ""
    resume: str = ""
    out: str = ""
    min_count: int = 5
    min_len: int = 10
    seeds: str = "0"
    variants: str = ",".join(VARIANTS)
    bench_domains: int = 4
    bench_sizes: str = "64,128,256,512"
    bench_repeats: int = 5
    bench_distribution: str = "uniform"
    fault: str = ""
    quick: bool = False


SECTIONS = (ModelConfig, TrainConfig, SynthConfig, RunOptions)


def _schema() -> dict[str, type]:
    out: dict[str, type] = {}
    for cls in SECTIONS:
        for f in fields(cls):
            kind = type(getattr(cls(), f.name))
            if f.name in out and out[f.name] is not kind:
                raise TypeError(f"config key {f.name} has conflicting types")
            out[f.name] = kind
    return out


SCHEMA = _schema()


def _coerce(key: str, raw: str, source: str):
    if key not in SCHEMA:
        raise ConfigError(f"{source}: unknown config key {key!r}")
    kind = SCHEMA[key]
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{source}: {key} expects a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{source}: {key} expects {kind.__name__}, got {raw!r}") from None


def read_config_file(path) -> dict:
    values = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, val = line.split("=", 1)
            key = key.strip().replace("-", "_")
            values[key] = _coerce(key, val, f"{path}:{lineno}")
    return values


def parse_overrides(tokens) -> dict:
    """``--key=value`` or ``--key value`` pairs; a bare ``--flag`` sets a boolean."""
    values = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:].replace("-", "_")
        if "=" in body:
            key, val = body.split("=", 1)
        elif SCHEMA.get(body) is bool:
            key, val = body, "true"
        elif i + 1 < len(tokens):
            key, val = body, tokens[i + 1]
            i += 1
        else:
            raise ConfigError(f"--{body} needs a value")
        values[key] = _coerce(key, val, "command line")
        i += 1
    return values


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    synth: SynthConfig
    run: RunOptions

    @classmethod
    def from_values(cls, values: dict) -> RunConfig:
        parts = []
        for section in SECTIONS:
            names = {f.name for f in fields(section)}
            parts.append(section(**{k: v for k, v in values.items() if k in names}))
        cfg = cls(*parts)
        try:
            cfg.model.validate()
            cfg.train.validate()
            cfg.synth.validate()
        except (ValueError, DataError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def seeds(self) -> list[int]:
        try:
            return [int(s) for s in self.run.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"seeds must be comma-separated integers, got {self.run.seeds!r}") from None


# -- subcommands ------------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    out = cfg.run.out or cfg.run.events
    catalog, seqs = generate_synthetic(cfg.synth)
    header = (
        f"synthetic events: users={cfg.synth.num_users} domains={cfg.synth.num_domains} "
        f"items_per_domain={cfg.synth.items_per_domain} cross_affinity={cfg.synth.cross_affinity} "
        f"seed={cfg.synth.seed}"
    )
    write_events(out, sequences_to_events(catalog, seqs), header=header)
    print(f"wrote {sum(len(s) for s in seqs)} events for {len(seqs)} users to {out}")
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig) -> int:
    out = cfg.run.out or cfg.run.corpus
    events = ingest(cfg.run.events)
    catalog, seqs = preprocess(events, cfg.run.min_count, cfg.run.min_len, cfg.model.n_max)
    write_corpus(out, catalog, seqs)
    print(f"kept {len(seqs)} users, {catalog.num_items} items, {catalog.num_domains} domains -> {out}")
    return EXIT_OK


def _load_corpus(cfg: RunConfig):
    if not os.path.exists(cfg.run.corpus):
        raise DataError(f"corpus not found: {cfg.run.corpus} (run 'preprocess' first)")
    return read_corpus(cfg.run.corpus)


def cmd_train(cfg: RunConfig) -> int:
    catalog, seqs = _load_corpus(cfg)
    train_seqs, _ = split_leave_one_out(seqs)
    out = cfg.run.out or cfg.run.checkpoint
    if cfg.run.resume:
        model, extra = SequenceModel.load(cfg.run.resume, catalog)
        state = TrainState.from_extra(extra)
        mode = "a"
    else:
        model = SequenceModel(cfg.model, catalog)
        state = None
        mode = "w"
    loss_log = cfg.run.loss_log or out + ".loss.tsv"
    with open(loss_log, mode, encoding="utf-8") as fh:

        def on_step(step, loss):
            fh.write(f"{step}\t{loss!r}\n")
            fh.flush()

        result = train(model, train_seqs, cfg.train, state=state, on_step=on_step)
    model.save(out, result.state.to_extra())
    last = f", last loss {result.losses[-1]:.4f}" if result.losses else ""
    print(f"trained to step {result.state.step}{last}; checkpoint {out}; loss log {loss_log}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    catalog, seqs = _load_corpus(cfg)
    if not os.path.exists(cfg.run.checkpoint):
        raise DataError(f"checkpoint not found: {cfg.run.checkpoint}")
    model, _ = SequenceModel.load(cfg.run.checkpoint, catalog)
    _, targets = split_leave_one_out(seqs)
    report = evaluate(model, targets)
    out = cfg.run.out or cfg.run.checkpoint + ".report.json"
    write_report(out, report, variant="model", seeds=[model.cfg.seed])
    for key, val in report.flat().items():
        print(f"{key}\t{val:.4f}")
    print(f"report {out}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    catalog, seqs = _load_corpus(cfg)
    names = [v.strip() for v in cfg.run.variants.split(",") if v.strip()]
    unknown = [v for v in names if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")

    def on_run(name, seed, rep):
        log.info("%s seed %d: HR@10 %.2f", name, seed, rep.hr[10])

    rows = run_matrix(catalog, seqs, cfg.model, cfg.train, names, cfg.seeds(), on_run=on_run)
    out = cfg.run.out or "ablation.jsonl"
    write_matrix(out, rows)
    print(format_table(rows))
    by_name = {r.variant: r for r in rows}
    if "full" in by_name and "intra-only" in by_name:
        full, base = by_name["full"].mean["HR@10"], by_name["intra-only"].mean["HR@10"]
        verdict = "holds" if full >= base else "does not hold"
        print(f"direction full >= intra-only on HR@10: {verdict} ({full:.2f} vs {base:.2f})")
    print(f"matrix {out}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    from .perf import bench, format_bench

    try:
        sizes = [int(s) for s in cfg.run.bench_sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bench_sizes must be comma-separated integers, got {cfg.run.bench_sizes!r}") from None
    try:
        rows = bench(
            cfg.run.bench_domains, sizes, cfg.run.bench_repeats, cfg.run.bench_distribution,
            k=cfg.model.k, h=cfg.model.h, seed=cfg.model.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    text = format_bench(rows)
    if cfg.run.out:
        with open(cfg.run.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_check(cfg: RunConfig) -> int:
    from .checks import run_checks

    if cfg.run.fault not in ("", "mask", "grad"):
        raise ConfigError(f"fault must be 'mask' or 'grad', got {cfg.run.fault!r}")
    results = run_checks(cfg.model.seed, fault=cfg.run.fault or None, quick=cfg.run.quick)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cdsr",
        allow_abbrev=False,
        description="Intra-domain masked cross-domain sequential recommender.",
        epilog="Any config key may be overridden as --key=value; overrides beat the config file.",
    )
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="seed for every component of the run")
    p.add_argument("--out", help="output path of the subcommand")
    p.add_argument("--no-tape", action="store_true", help="disable transition-aware positional embeddings")
    p.add_argument("--no-ddsr", action="store_true", help="disable the domain state attention")
    p.add_argument("--full-attention", action="store_true", help="dense causal attention instead of intra-domain")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args, extra_tokens) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    values.update(parse_overrides(extra_tokens))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out is not None:
        values["out"] = args.out
    if args.no_tape:
        values["use_tape"] = False
    if args.no_ddsr:
        values["use_ddsr"] = False
    if args.full_attention:
        values["intra_domain_mask"] = False
    return RunConfig.from_values(values)


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args, extra)
        # every op checks finiteness itself, so numpy's warnings are just noise
        with np.errstate(all="ignore"):
            return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        name = exc.filename or ""
        print(f"data error: {name}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
