import numpy as np
import pytest

from mixedabc.dataset import (
    GeneratorConfig,
    generate_synthetic,
    write_dataset,
    write_embeddings_tsv,
    write_ground_truth,
)
from mixedabc.pipeline import PipelineConfig, run_pipeline
from mixedabc.surrogate import BoostParams


@pytest.fixture(scope="session")
def small_workspace(tmp_path_factory):
    """A 350-row synthetic dataset on disk, shared across test modules."""
    root = tmp_path_factory.mktemp("ws")
    ds, truth = generate_synthetic(GeneratorConfig(n_rows=350), seed=5)
    write_dataset(ds, root / "data.csv", root / "schema.json")
    write_embeddings_tsv(truth.embeddings, root / "embeddings.tsv")
    write_ground_truth(truth, root / "truth.json")
    return {"root": root, "truth": truth, "n_rows": 350}


def fast_config(ws, out_dir, **overrides) -> PipelineConfig:
    """Pipeline config tuned for test speed; overridable per test."""
    base = dict(
        data_csv=str(ws["root"] / "data.csv"),
        schema=str(ws["root"] / "schema.json"),
        out_dir=str(out_dir),
        embeddings_tsv=str(ws["root"] / "embeddings.tsv"),
        seed=3,
        surrogate=BoostParams(n_trees=50, max_depth=3),
        cv_folds=4,
        mcmc_iters=400,
        mcmc_burn_in=100,
        n_sims=120,
        sims_per_draw=12,
        nominal=6.2,
        make_plots=False,
    )
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture(scope="session")
def fast_report(small_workspace, tmp_path_factory):
    """One completed pipeline run (with plots) reused by read-only tests."""
    out = tmp_path_factory.mktemp("fast_run")
    cfg = fast_config(small_workspace, out, make_plots=True)
    report = run_pipeline(cfg)
    return {"cfg": cfg, "report": report, "out": out}
