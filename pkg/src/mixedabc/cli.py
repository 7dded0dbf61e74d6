"""Command-line entry point.

One binary, one subcommand per stage, so each stage can be exercised and
debugged in isolation. Exit codes: 0 success, 1 stage or runtime failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetError,
    GeneratorConfig,
    InvalidConfig,
    generate_synthetic,
    load_dataset,
    load_schema,
    preprocess,
    write_dataset,
    write_embeddings_tsv,
    write_ground_truth,
)
from .distfit import DistFitError, select_model
from .geometry import GeometryError, cosine_matrix, read_embedding_tsv, spectral_cluster
from .pipeline import PipelineConfig, StageFailure, run_pipeline
from .surrogate import BoostParams, SurrogateError, cross_validate, fit
from .util import dump_json, json_ready, stage_seed

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _add_pipeline_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="JSON config file; flags override its keys")
    sp.add_argument("--data", dest="data_csv", help="measurement CSV")
    sp.add_argument("--schema", help="schema JSON")
    sp.add_argument("--out", dest="out_dir", help="output directory")
    sp.add_argument("--embeddings", dest="embeddings_tsv", help="geometry embedding TSV")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--top-q", dest="top_q", type=int, default=None)
    sp.add_argument("--n-sims", dest="n_sims", type=int, default=None)
    sp.add_argument("--sims-per-draw", dest="sims_per_draw", type=int, default=None)
    sp.add_argument("--kernel-scale", dest="kernel_scale", default=None,
                    help="'residual', 'matched', or a positive number")
    sp.add_argument("--cluster-k", dest="cluster_k", type=int, default=None)
    sp.add_argument("--nominal", type=float, default=None)
    sp.add_argument("--tolerance", type=float, default=None)
    sp.add_argument("--no-plots", action="store_true")


def _pipeline_config(args, force: dict | None = None) -> PipelineConfig:
    overrides = {
        k: getattr(args, k)
        for k in (
            "data_csv", "schema", "out_dir", "embeddings_tsv", "seed", "top_q",
            "n_sims", "sims_per_draw", "kernel_scale", "cluster_k", "nominal",
            "tolerance",
        )
        if getattr(args, k) is not None
    }
    if args.no_plots:
        overrides["make_plots"] = False
    ks = overrides.get("kernel_scale")
    if isinstance(ks, str) and ks not in ("residual", "matched"):
        try:
            overrides["kernel_scale"] = float(ks)
        except ValueError:
            raise InvalidConfig(
                "kernel_scale must be 'residual', 'matched', or a number"
            ) from None
    overrides.update(force or {})
    if args.config is not None:
        return PipelineConfig.from_json(args.config, overrides)
    for required in ("data_csv", "schema", "out_dir"):
        if required not in overrides:
            raise InvalidConfig(f"--{required.replace('_', '-')} is required without --config")
    return PipelineConfig(**overrides)


def _cmd_generate(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg = GeneratorConfig(
        n_rows=args.rows,
        include_geometry=not args.no_geometry,
        measurements_per_run=args.measurements_per_run,
    )
    ds, truth = generate_synthetic(cfg, seed=args.seed)
    schema_path = args.schema or out.with_name("schema.json")
    write_dataset(ds, out, schema_path)
    if cfg.include_geometry:
        emb_path = args.embeddings or out.with_name("embeddings.tsv")
        write_embeddings_tsv(truth.embeddings, emb_path)
    if args.truth is not None:
        write_ground_truth(truth, args.truth)
    print(f"wrote {ds.n_rows} rows to {out}")
    return EXIT_OK


def _cmd_fit(args) -> int:
    schema = load_schema(args.schema)
    raw = load_dataset(args.data, schema)
    emb = read_embedding_tsv(args.embeddings) if args.embeddings else None
    enc = preprocess(raw, embeddings=emb)
    params = BoostParams(
        n_trees=args.n_trees, learning_rate=args.learning_rate, max_depth=args.max_depth
    )
    cv = cross_validate(enc, params, k=args.folds, seed=stage_seed(args.seed, "cv"))
    model = fit(enc, params)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    dump_json(json_ready(model.to_dict()), outdir / "surrogate.json")
    dump_json(json_ready(cv.to_dict()), outdir / "cv.json")
    print(cv.render())
    return EXIT_OK


def _cmd_priors(args) -> int:
    schema = load_schema(args.schema)
    raw = load_dataset(args.data, schema)
    sample = raw.column_values(args.column)
    candidates = args.candidates.split(",") if args.candidates else None
    ranked = (
        select_model(np.asarray(sample, dtype=float), candidates)
        if candidates
        else select_model(np.asarray(sample, dtype=float))
    )
    result = [fp.to_dict() for fp in ranked]
    if args.out:
        dump_json(result, args.out)
    for fp in ranked:
        print(f"{fp.family.tag}: aic={fp.aic:.2f} prob={fp.model_prob:.4f}")
    return EXIT_OK


def _cmd_abc(args) -> int:
    # global-only inference: the full pipeline with clustering off
    cfg = _pipeline_config(args, force={"cluster_enabled": False})
    run_pipeline(cfg)
    print(f"report written to {Path(cfg.out_dir) / 'report.json'}")
    return EXIT_OK


def _cmd_cluster(args) -> int:
    emb = read_embedding_tsv(args.embeddings)
    sim = cosine_matrix(emb)
    cm = spectral_cluster(sim, k=args.k, seed=args.seed)
    result = {"clusters": cm.to_dict(), "similarity": sim.to_dict()}
    if args.out:
        dump_json(json_ready(result), args.out)
    for c in range(cm.k):
        print(f"cluster {c}: {', '.join(cm.members(c))}")
    return EXIT_OK


def _cmd_pipeline(args) -> int:
    cfg = _pipeline_config(args)
    run_pipeline(cfg)
    print(f"report written to {Path(cfg.out_dir) / 'report.json'}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .plots import emit_plots

    with open(args.report, encoding="utf-8") as fh:
        report = json.load(fh)
    written = emit_plots(report, args.out)
    print(f"wrote {len(written)} figures to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixedabc")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset with known structure")
    g.add_argument("--rows", type=int, default=4000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="CSV path")
    g.add_argument("--schema", help="schema JSON path (default: schema.json next to CSV)")
    g.add_argument("--embeddings", help="embedding TSV path (default: embeddings.tsv)")
    g.add_argument("--truth", help="ground-truth JSON path")
    g.add_argument("--no-geometry", action="store_true")
    g.add_argument("--measurements-per-run", type=int, default=15)
    g.set_defaults(func=_cmd_generate)

    f = sub.add_parser("fit", help="fit the boosted surrogate and cross-validate")
    f.add_argument("--data", required=True)
    f.add_argument("--schema", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--embeddings")
    f.add_argument("--folds", type=int, default=10)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--n-trees", type=int, default=300)
    f.add_argument("--learning-rate", type=float, default=0.1)
    f.add_argument("--max-depth", type=int, default=4)
    f.set_defaults(func=_cmd_fit)

    pr = sub.add_parser("priors", help="rank candidate families for one column")
    pr.add_argument("--data", required=True)
    pr.add_argument("--schema", required=True)
    pr.add_argument("--column", required=True)
    pr.add_argument("--candidates", help="comma-separated family tags")
    pr.add_argument("--out", help="write the ranking JSON here")
    pr.set_defaults(func=_cmd_priors)

    a = sub.add_parser("abc", help="global weighted inference (no clustering)")
    _add_pipeline_flags(a)
    a.set_defaults(func=_cmd_abc)

    c = sub.add_parser("cluster", help="spectral clustering of geometry embeddings")
    c.add_argument("--embeddings", required=True)
    c.add_argument("--k", type=int, default=4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="write assignment JSON here")
    c.set_defaults(func=_cmd_cluster)

    pl = sub.add_parser("pipeline", help="run every stage end to end")
    _add_pipeline_flags(pl)
    pl.set_defaults(func=_cmd_pipeline)

    pt = sub.add_parser("plot", help="re-render figures from a saved report")
    pt.add_argument("--report", required=True)
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=_cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (DatasetError, DistFitError, GeometryError, SurrogateError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:  # keep the tool from tracebacking at users
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
