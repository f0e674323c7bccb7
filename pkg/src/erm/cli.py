"""``erm`` command line entry point."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import oracles
from .index import IngestionError, KeyStrategy, build_index
from .io import (FileFormatError, SnapshotError, export_snapshot, import_snapshot, read_corpus,
                 read_queries, write_corpus, write_queries)
from .protocol import (DEFAULT_FRACTIONS, ConfigError, ExperimentConfig, HoldoutLeakError, WorkloadConfig,
                       check_cost_report, load_inputs, make_estimator, run_cost_experiment, run_protocol,
                       split_queries, stability_audit, sweep_splits)
from .similarity import MockEmbedder, SimilarityKind
from .synthetic import make_planted_corpus

logger = logging.getLogger("erm")

# flag dest -> (section, field) in ExperimentConfig; section None means top level
_OVERRIDES = {
    "corpus": (None, "corpus_path"),
    "queries": (None, "queries_path"),
    "key_strategy": (None, "key_strategy"),
    "backend": (None, "backend"),
    "similarity": (None, "similarity"),
    "split": (None, "split_fraction"),
    "seed": (None, "seed"),
    "repeats": (None, "repeats"),
    "embed_dim": (None, "embed_dim"),
    "noise": (None, "noise"),
    "units_per_query": (None, "units_per_query"),
    "generation_provider": (None, "generation_provider"),
    "x": ("evolution", "x"),
    "batch": ("evolution", "batch_capacity"),
    "memory_capacity": ("evolution", "memory_capacity"),
    "patience": ("evolution", "patience"),
    "rho": ("evolution", "rho"),
    "norm_bound": ("evolution", "norm_bound"),
    "mode": ("evolution", "mode"),
    "attribution_depth": ("evolution", "attribution_depth"),
}


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON experiment config; flags override it")
    p.add_argument("--corpus", help="corpus JSONL (omit for the built-in planted-gap corpus)")
    p.add_argument("--queries", help="query JSONL")
    p.add_argument("--key-strategy", choices=[k.value for k in KeyStrategy])
    p.add_argument("--backend", choices=["dense", "sparse"])
    p.add_argument("--similarity", choices=["ip", "cosine"])
    p.add_argument("--split", type=float, help="fraction of queries used for adaptation")
    p.add_argument("--free-form", action="store_true", help="allow any split in [0, 1)")
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int, help="random splits averaged per run")
    p.add_argument("--x", type=int, help="units merged per key per evolution step")
    p.add_argument("--batch", type=int, help="adaptation batch capacity")
    p.add_argument("--memory-capacity", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--norm-bound", type=float)
    p.add_argument("--mode", choices=["offline", "online"])
    p.add_argument("--attribution-depth", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--noise", type=float, help="synthetic expander noise level")
    p.add_argument("--units-per-query", type=int)
    p.add_argument("--generation-provider", help="overrides ERM_GEN_PROVIDER")
    p.add_argument("--no-cache", action="store_true", help="disable per-intent expansion caching")
    p.add_argument("--synthetic", action="append", default=[], metavar="KEY=VALUE",
                   help="planted-gap corpus parameter, e.g. n_intents=50")


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    top, evo = {}, {}
    for dest, (section, name) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "similarity":
            value = SimilarityKind.parse(value).value
        (evo if section == "evolution" else top)[name] = value
    if getattr(args, "free_form", False):
        top["protocol_mode"] = False
    if getattr(args, "no_cache", False):
        top["use_cache"] = False
    if getattr(args, "synthetic", None):
        synthetic = dict(base.synthetic)
        for item in args.synthetic:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"--synthetic expects KEY=VALUE, got {item!r}")
            synthetic[key] = json.loads(raw)
        top["synthetic"] = synthetic
    try:
        evolution = dataclasses.replace(base.evolution, **evo) if evo else base.evolution
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return dataclasses.replace(base, evolution=evolution, **top)


def _emit(args, text: str, payload: str | None = None) -> None:
    print(text)
    if payload is not None and getattr(args, "out", None):
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
        logger.info("wrote %s", args.out)


def cmd_ingest(args) -> int:
    docs, queries = read_corpus(args.corpus), read_queries(args.queries) if args.queries else []
    known = {d.doc_id for d in docs}
    dangling = sorted({g for q in queries for g in q.gold_doc_ids} - known)
    if dangling:
        raise IngestionError(f"gold_doc_ids not in corpus: {', '.join(dangling[:5])}")
    strategy = KeyStrategy.parse(args.key_strategy or "full_text")
    missing = [d.doc_id for d in docs if d.field_text(strategy) is None]
    summary = {"documents": len(docs), "queries": len(queries), "key_strategy": strategy.value,
               "missing_field": missing}
    print(json.dumps(summary, indent=2))
    return 1 if missing else 0


def cmd_synth(args) -> int:
    docs, queries = make_planted_corpus(n_docs=args.n_docs, n_queries=args.n_queries,
                                        n_intents=args.n_intents, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(docs, out / "corpus.jsonl")
    write_queries(queries, out / "queries.jsonl")
    print(f"wrote {len(docs)} documents and {len(queries)} queries to {out}")
    return 0


def cmd_index(args) -> int:
    cfg = build_config(args)
    docs, _ = load_inputs(cfg)
    store = build_index(docs, KeyStrategy.parse(cfg.key_strategy), MockEmbedder(cfg.embed_dim, cfg.seed))
    export_snapshot(store, {}, args.out)
    print(f"indexed {len(store)} documents (dim {store.dim}) into {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = build_config(args)
    report = run_protocol(cfg)
    _emit(args, report.to_table(), report.to_json())
    return 0


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    fractions = [float(f) for f in args.fractions.split(",")] if args.fractions else DEFAULT_FRACTIONS
    report = sweep_splits(cfg, fractions)
    _emit(args, report.to_table(), report.to_json())
    return 0


def cmd_cost(args) -> int:
    cfg = build_config(args)
    w = cfg.workload or WorkloadConfig()
    changes = {k: getattr(args, k) for k in ("m", "alpha", "T") if getattr(args, k) is not None}
    if args.workload_seed is not None:
        changes["seed"] = args.workload_seed
    cfg = cfg.replace(workload=dataclasses.replace(w, **changes))
    report = run_cost_experiment(cfg, out_csv=args.csv, pipeline=not args.cache_only)
    checks = check_cost_report(report)
    text = report.to_table() + "\n" + "\n".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items())
    _emit(args, text, report.to_json())
    return 0


def cmd_export(args) -> int:
    cfg = build_config(args)
    docs, queries = load_inputs(cfg)
    est = make_estimator(cfg).set_corpus(docs)
    adapt, _ = split_queries(est._prepare(queries), cfg.split_fraction, cfg.seed)
    est.fit(adapt)
    export_snapshot(est.store_, est.memories_, args.out)
    stats = est.engine_.stats()
    print(f"adapted on {len(adapt)} queries, {stats['keys_updated']} keys updated; snapshot written to {args.out}")
    return 0


def cmd_import(args) -> int:
    queries_path, args.queries = args.queries, None
    cfg = build_config(args)
    store, memories = import_snapshot(args.snapshot, expected_dim=args.expect_dim)
    versions = sorted(set(store.versions))
    print(f"snapshot ok: {len(store)} keys, dim {store.dim}, epoch {store.epoch}, versions {versions}, "
          f"{len(memories)} memories")
    if not queries_path:
        return 0
    est = make_estimator(cfg.replace(embed_dim=store.dim)).set_corpus(store)
    queries = read_queries(queries_path)
    rows = []
    for q, ranking in zip(queries, est.predict(queries, n=args.n)):
        rows.append(json.dumps({"query_id": q.query_id, "doc_ids": ranking.doc_ids, "scores": ranking.scores}))
    if args.out:
        Path(args.out).write_text("\n".join(rows) + "\n", encoding="utf-8")
    else:
        print("\n".join(rows))
    return 0


def cmd_oracle(args) -> int:
    quick = args.quick
    seeds = range(1 if quick else 5)
    T = 5_000 if quick else 20_000
    samples = 20_000 if quick else 100_000
    reports = [oracles.check_equivalence(trials=1_000 if quick else 10_000, seed=args.seed)]
    reports += [oracles.check_consistency(oracles.consistency_scenario(s), T, samples=samples) for s in seeds]
    reports += [oracles.check_expected_optimality(oracles.optimality_scenario(s), 2, T, samples) for s in seeds]
    cfg = ExperimentConfig(seed=args.seed, embed_dim=256, synthetic={"n_intents": 50})
    reports.append(stability_audit(cfg))
    ok = True
    for r in reports:
        status = "SKIP" if r.passed is None else ("PASS" if r.passed else "FAIL")
        ok &= r.passed is not False
        print(f"{status:<5} {r.name} {' '.join(r.flags)}")
    if args.out:
        Path(args.out).write_text(json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2,
                                             default=float) + "\n", encoding="utf-8")
    return 0 if ok else 1


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erm", description="Evolving retrieval memory experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate corpus and query JSONL files")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries")
    p.add_argument("--key-strategy", choices=[k.value for k in KeyStrategy])
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a planted-gap corpus as JSONL")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-docs", type=int, default=500)
    p.add_argument("--n-queries", type=int, default=200)
    p.add_argument("--n-intents", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    for name, func, help_ in (("index", cmd_index, "build the version-0 index and save it as a snapshot"),
                              ("run", cmd_run, "holdout adaptation experiment"),
                              ("sweep", cmd_sweep, "run the protocol across split fractions"),
                              ("cost", cmd_cost, "Zipf workload cost experiment"),
                              ("export", cmd_export, "adapt on the split and save keys and memories")):
        p = sub.add_parser(name, help=help_)
        _add_experiment_flags(p)
        p.add_argument("--out", required=name in ("index", "export"), help="output path")
        p.set_defaults(func=func)
        if name == "sweep":
            p.add_argument("--fractions", help="comma separated, default 0.3,...,0.8")
        if name == "cost":
            p.add_argument("--alpha", type=float)
            p.add_argument("--m", type=int)
            p.add_argument("--T", type=int)
            p.add_argument("--workload-seed", type=int)
            p.add_argument("--csv", help="cost ledger CSV path")
            p.add_argument("--cache-only", action="store_true", help="skip verification and attribution")

    p = sub.add_parser("import", help="verify a snapshot and optionally retrieve against it")
    _add_experiment_flags(p)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--expect-dim", type=int)
    p.add_argument("-n", type=int, default=10, help="ranking depth")
    p.add_argument("--out", help="write rankings as JSONL")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("oracle", help="run the brute-force guarantee checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="smaller horizons for a fast smoke run")
    p.add_argument("--out", help="write the reports as JSON")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileFormatError, IngestionError, SnapshotError, HoldoutLeakError, FileNotFoundError) as exc:
        print(f"erm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
