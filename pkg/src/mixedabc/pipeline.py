"""Five-stage orchestration: surrogate fit, importance screening, prior
fitting, weighted simulation inference, and forward validation, with an
optional geometry-stratified rerun per cluster.

Every stage derives its randomness from the root seed fanned out by stage
name, so identical configs reproduce byte-identical reports.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .abc import (
    KernelDescriptor,
    _kernel_weights,
    forward_validate,
    posterior_summary,
    simulate_forward,
    sufficiency_check,
    summarize,
    weigh,
)
from .dataset import (
    Dataset,
    InvalidConfig,
    inverse_transform,
    load_dataset,
    load_schema,
    preprocess,
    rank_runs,
)
from .distfit import (
    FAMILIES,
    DistFitError,
    FittedPrior,
    McmcConfig,
    fit_family,
    mcmc_posterior,
    select_model,
)
from .geometry import (
    cosine_matrix,
    read_embedding_tsv,
    spectral_cluster,
    strata_sizes,
    stratify,
)
from .surrogate import (
    BoostParams,
    cross_validate,
    feature_importance,
    fit,
    predict,
    residuals,
)
from .util import child_rng, dump_json, json_ready, sha256_file, stage_seed, worker_count


class PipelineError(Exception):
    pass


class StageFailure(PipelineError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


# candidate families by source-column kind; support mismatches are skipped
# inside select_model, so integer columns still fall back to the continuous
# families when counts are shifted or rescaled
_KIND_CANDIDATES = {
    "continuous": ("normal", "logistic", "cauchy"),
    "integer": ("negative_binomial", "discrete_uniform", "normal", "logistic", "cauchy"),
    "binary": ("binomial",),
}

_RESIDUAL_CANDIDATES = ("normal", "logistic", "cauchy")

_MIN_STRATUM_ROWS = 8


@dataclass
class PipelineConfig:
    data_csv: str
    schema: str
    out_dir: str
    embeddings_tsv: Optional[str] = None
    seed: int = 0
    surrogate: BoostParams = field(default_factory=BoostParams)
    cv_folds: int = 10
    holdout_fraction: float = 0.2
    top_q: int = 3
    candidates: Optional[tuple[str, ...]] = None
    mcmc_iters: int = 3000
    mcmc_burn_in: int = 750
    n_sims: int = 1000
    sims_per_draw: Optional[int] = None  # None -> one per observed row
    kernel_family: str = "logistic_pdf"
    kernel_scale: object = "residual"  # "residual" | "matched" | positive number
    ess_target: float = 0.9
    standardize_summaries: bool = False
    cluster_enabled: bool = True
    cluster_k: int = 4
    geometry_column: str = "shape"
    nominal: Optional[float] = None
    tolerance: float = 0.75
    make_plots: bool = True

    def validate(self) -> None:
        for label, p in (("data_csv", self.data_csv), ("schema", self.schema)):
            if not Path(p).exists():
                raise InvalidConfig(f"{label} path does not exist: {p}")
        if self.embeddings_tsv is not None and not Path(self.embeddings_tsv).exists():
            raise InvalidConfig(f"embeddings_tsv path does not exist: {self.embeddings_tsv}")
        if self.top_q < 1:
            raise InvalidConfig("top_q must be >= 1")
        if self.n_sims < 1:
            raise InvalidConfig("n_sims must be >= 1")
        if self.cv_folds < 2:
            raise InvalidConfig("cv_folds must be >= 2")
        if not 0.0 < self.holdout_fraction < 0.9:
            raise InvalidConfig("holdout_fraction must lie in (0, 0.9)")
        if self.kernel_family not in ("logistic_pdf", "threshold"):
            raise InvalidConfig(f"unknown kernel family {self.kernel_family!r}")
        if isinstance(self.kernel_scale, str):
            if self.kernel_scale not in ("residual", "matched"):
                raise InvalidConfig(
                    "kernel_scale must be 'residual', 'matched', or a positive number"
                )
        elif not float(self.kernel_scale) > 0:
            raise InvalidConfig("numeric kernel_scale must be positive")
        if not 0.0 < self.ess_target < 1.0:
            raise InvalidConfig("ess_target must lie in (0, 1)")
        if self.cluster_enabled and self.cluster_k < 2:
            raise InvalidConfig("cluster_k must be >= 2 when clustering is enabled")
        if self.tolerance <= 0:
            raise InvalidConfig("tolerance must be positive")
        if self.mcmc_burn_in >= self.mcmc_iters:
            raise InvalidConfig("mcmc_burn_in must be < mcmc_iters")
        if self.sims_per_draw is not None and self.sims_per_draw < 2:
            raise InvalidConfig("sims_per_draw must be >= 2")
        for tag in self.candidates or ():
            if tag not in FAMILIES:
                raise InvalidConfig(f"unknown candidate family {tag!r}")

    @classmethod
    def from_json(cls, path, overrides: Optional[dict] = None) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise InvalidConfig("config JSON must be an object")
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        if isinstance(raw.get("surrogate"), dict):
            raw["surrogate"] = BoostParams.from_dict(raw["surrogate"])
        if raw.get("candidates") is not None:
            raw["candidates"] = tuple(raw["candidates"])
        return cls(**raw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["surrogate"] = self.surrogate.to_dict()
        d["candidates"] = None if self.candidates is None else list(self.candidates)
        return d


@dataclass
class PipelineReport:
    config: dict
    surrogate: dict
    importance: dict
    priors: dict
    abc: dict

    def sections(self) -> dict:
        return {
            "surrogate": self.surrogate,
            "importance": self.importance,
            "priors": self.priors,
            "abc": self.abc,
        }

    def to_dict(self) -> dict:
        return json_ready({"config": self.config, "sections": self.sections()})


# ---------------------------------------------------------------------------
# kernel resolution


def _matched_scale(distances: np.ndarray, family: str, target_frac: float) -> float:
    """Bisect the kernel scale (mu = 0) until ESS/N reaches the target.

    The ESS fraction is monotone non-decreasing in the scale for both
    kernel families, so log-bisection converges; if even a near-flat
    kernel cannot reach the target the upper bracket is returned.
    """
    n = len(distances)

    def ess_frac(s: float) -> float:
        w = _kernel_weights(distances, KernelDescriptor(family, 0.0, s))
        total = w.sum()
        if total == 0.0:
            return 0.0
        wn = w / total
        return float(1.0 / np.sum(wn**2)) / n

    ref = float(np.median(distances))
    if ref == 0.0:
        ref = max(float(distances.max()), 1.0)
    lo, hi = 1e-9 * ref, 1e7 * ref
    if ess_frac(hi) < target_frac:
        return hi
    for _ in range(200):
        mid = float(np.sqrt(lo * hi))
        if ess_frac(mid) >= target_frac:
            hi = mid
        else:
            lo = mid
        if hi / lo < 1.0 + 1e-12:
            break
    return hi


def _resolve_kernel(
    cfg: PipelineConfig, distances: np.ndarray, resid_fit: Optional[FittedPrior]
) -> KernelDescriptor:
    if isinstance(cfg.kernel_scale, str) and cfg.kernel_scale == "residual":
        if resid_fit is not None:
            mu, s = resid_fit.theta
            return KernelDescriptor(cfg.kernel_family, float(mu), float(s))
        # degenerate residuals leave no scale to reuse; fall through to matching
    if isinstance(cfg.kernel_scale, str):
        s = _matched_scale(distances, cfg.kernel_family, cfg.ess_target)
        return KernelDescriptor(cfg.kernel_family, 0.0, s)
    return KernelDescriptor(cfg.kernel_family, 0.0, float(cfg.kernel_scale))


# ---------------------------------------------------------------------------
# stage helpers


def _raw_unit_columns(enc: Dataset) -> dict[str, np.ndarray]:
    """Raw-unit values of every encoded feature column.

    Standardized columns are inverted through the stored scaling; derived
    columns (bits, embedding coordinates) are already in raw units.
    Integer columns are re-rounded so count families stay applicable.
    """
    out = {c.name: enc.rows[:, j] for j, c in enumerate(enc.numeric_columns)}
    out.update(inverse_transform(enc))
    for c in enc.numeric_columns:
        if c.kind == "integer" and c.name in (enc.scaling or {}):
            out[c.name] = np.rint(out[c.name])
    return out


def _source_kinds(raw: Dataset) -> dict[str, str]:
    return {c.name: c.kind for c in raw.columns if c.kind != "categorical"}


def _candidates_for(cfg: PipelineConfig, kind: str) -> tuple[str, ...]:
    return cfg.candidates or _KIND_CANDIDATES.get(kind, _KIND_CANDIDATES["continuous"])


def _fit_priors_for(
    names: list[str],
    columns: dict[str, np.ndarray],
    kinds: dict[str, str],
    cfg: PipelineConfig,
    seed_tag: str,
) -> tuple[dict[str, FittedPrior], dict[str, list[FittedPrior]]]:
    """AIC-selected family per feature, with its Metropolis chain attached."""
    priors: dict[str, FittedPrior] = {}
    ranked_all: dict[str, list[FittedPrior]] = {}
    for name in names:
        sample = columns[name]
        ranked = select_model(sample, _candidates_for(cfg, kinds.get(name, "continuous")))
        best = ranked[0]
        chain = mcmc_posterior(
            best.family,
            sample,
            McmcConfig(
                n_iter=cfg.mcmc_iters,
                burn_in=cfg.mcmc_burn_in,
                seed=stage_seed(cfg.seed, f"{seed_tag}:mcmc:{name}"),
            ),
            theta_hat=best.theta_hat,
        )
        priors[name] = dataclasses.replace(best, chain=chain)
        ranked_all[name] = ranked
    return priors, ranked_all


def _abc_block(
    model,
    priors: dict[str, FittedPrior],
    pinned: dict[str, float],
    err: Optional[FittedPrior],
    obs,
    cfg: PipelineConfig,
    seed_tag: str,
) -> dict:
    """Simulate, weigh, and summarize one observed sample (global or stratum)."""
    obs_arr = np.asarray(obs, dtype=float).ravel()
    spd = len(obs_arr) if cfg.sims_per_draw is None else int(cfg.sims_per_draw)
    spd = max(2, spd)
    sims = simulate_forward(
        model,
        priors,
        err,
        cfg.n_sims,
        spd,
        seed=stage_seed(cfg.seed, f"{seed_tag}:sims"),
        pinned=pinned,
    )
    target = summarize(obs_arr).as_array()
    summaries = sims.summaries
    if cfg.standardize_summaries:
        scale = summaries.std(axis=0, ddof=1)
        scale[scale == 0.0] = 1.0
        summaries = summaries / scale
        target = target / scale
    distances = np.sqrt(np.sum((summaries - target) ** 2, axis=1))
    kernel = _resolve_kernel(cfg, distances, err)
    wp = weigh(sims, obs_arr, kernel, standardize=cfg.standardize_summaries)
    posteriors = {name: posterior_summary(wp, name).to_dict() for name in priors}
    validation = forward_validate(
        wp, model, err, obs_arr, seed=stage_seed(cfg.seed, f"{seed_tag}:validate")
    )
    suff = sufficiency_check(obs_arr, summarize(obs_arr))
    return {
        "n_sims": sims.n_sims,
        "sims_per_draw": spd,
        "kernel": kernel.to_dict(),
        "ess": wp.ess,
        "ess_percent": wp.ess_percent,
        "posteriors": posteriors,
        "validation": validation.to_dict(),
        "sufficiency": suff.to_dict(),
        "feature_names": list(wp.feature_names),
        "inferred": sorted(priors),
        "draws": wp.draws,
        "norm_weights": wp.norm_weights,
        "observed": obs_arr,
        "predicted": validation.predicted,
    }


def _pin_values(enc: Dataset, columns: dict[str, np.ndarray], selected) -> dict[str, float]:
    return {
        c.name: float(columns[c.name].mean())
        for c in enc.numeric_columns
        if c.name not in selected
    }


# ---------------------------------------------------------------------------
# the pipeline


def run_pipeline(cfg: PipelineConfig) -> PipelineReport:
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    completed: list[str] = []
    state: dict = {"failed_stage": None, "error": None}

    def _guard(stage: str, fn):
        try:
            result = fn()
        except Exception as exc:
            state["failed_stage"] = stage
            state["error"] = f"{type(exc).__name__}: {exc}"
            _write_manifest(out, completed, state)
            raise StageFailure(stage, exc) from exc
        completed.append(stage)
        return result

    # ---- data ingestion and encoding
    def _load():
        schema = load_schema(cfg.schema)
        raw = load_dataset(cfg.data_csv, schema)
        emb = None
        if cfg.embeddings_tsv is not None:
            emb = read_embedding_tsv(cfg.embeddings_tsv)
        enc = preprocess(raw, embeddings=emb)
        return raw, enc, emb

    raw, enc, emb = _guard("data", _load)

    # ---- stage 1: surrogate fit, CV, holdout residuals
    def _surrogate():
        cv = cross_validate(enc, cfg.surrogate, cfg.cv_folds, seed=stage_seed(cfg.seed, "cv"))
        model = fit(enc, cfg.surrogate)
        n = enc.n_rows
        n_hold = max(8, int(round(cfg.holdout_fraction * n)))
        if n_hold >= n:
            raise InvalidConfig("holdout would consume every row")
        perm = child_rng(cfg.seed, "holdout").permutation(n)
        hold, train = perm[:n_hold], perm[n_hold:]
        resid = residuals(fit(enc.take(train), cfg.surrogate), enc.take(hold))
        section = {
            "cv": cv.to_dict(),
            "rendered": cv.render(),
            "hyperparameters": cfg.surrogate.to_dict(),
            "n_rows": n,
            "holdout_rows": int(n_hold),
            "parity": {
                "actual": enc.targets,
                "predicted": predict(model, enc.rows),
            },
        }
        if cfg.nominal is not None and raw.run_ids is not None:
            ranking = rank_runs(raw, cfg.nominal, cfg.tolerance)
            section["run_ranking"] = [r.to_dict() for r in ranking[:20]]
        return model, resid, section

    model, resid, surrogate_section = _guard("surrogate", _surrogate)

    # ---- stage 2: importance screening
    def _importance():
        ranking = feature_importance(model)
        kinds = _source_kinds(raw)
        # encoded-categorical columns (bits, embedding coordinates) feed the
        # surrogate but are not settable process parameters: they get pinned
        # during simulation instead of inferred
        selected = [name for name, _ in ranking if name in kinds][: cfg.top_q]
        if not selected:
            raise InvalidConfig("no inferable feature appears in the importance ranking")
        return selected, {
            "ranking": [[n, g] for n, g in ranking],
            "top_q": cfg.top_q,
            "selected": selected,
            "derived_columns": [n for n, _ in ranking if n not in kinds],
        }

    selected, importance_section = _guard("importance", _importance)

    # ---- stage 3: per-feature priors and the residual law
    def _priors():
        columns = _raw_unit_columns(enc)
        kinds = _source_kinds(raw)
        priors, ranked_all = _fit_priors_for(selected, columns, kinds, cfg, "priors")
        resid_candidates = select_model(resid, _RESIDUAL_CANDIDATES)
        try:
            # the forward model adds logistic noise whatever family wins the
            # AIC race, so the logistic fit is always carried alongside
            theta, loglik = fit_family("logistic", resid)
            resid_fit = FittedPrior(
                family=FAMILIES["logistic"],
                theta_hat=theta,
                loglik=loglik,
                aic=-2.0 * loglik + 2.0 * FAMILIES["logistic"].k,
            )
        except DistFitError:
            resid_fit = None
        section = {
            "features": {
                name: {
                    "selected": priors[name].to_dict(),
                    "candidates": [
                        {"family": fp.family.tag, "aic": fp.aic, "model_prob": fp.model_prob}
                        for fp in ranked_all[name]
                    ],
                }
                for name in selected
            },
            "residual": {
                "n": int(len(resid)),
                "winner": resid_candidates[0].family.tag,
                "candidates": [
                    {"family": fp.family.tag, "aic": fp.aic, "model_prob": fp.model_prob}
                    for fp in resid_candidates
                ],
                "logistic": None if resid_fit is None else resid_fit.to_dict(),
            },
        }
        return priors, resid_fit, section

    priors, resid_fit, priors_section = _guard("priors", _priors)

    # ---- stages 4 + 5: weighted inference and forward validation
    def _abc():
        columns = _raw_unit_columns(enc)
        kinds = _source_kinds(raw)
        pinned = _pin_values(enc, columns, selected)
        block = _abc_block(model, priors, pinned, resid_fit, enc.targets, cfg, "abc")
        section = {"global": block, "clusters": None}
        if not cfg.cluster_enabled:
            return section

        if emb is None:
            raise InvalidConfig("clustering requires an embeddings table")
        sim = cosine_matrix(emb)
        cm = spectral_cluster(sim, cfg.cluster_k, seed=stage_seed(cfg.seed, "cluster"))
        strata = stratify(enc, cm, cfg.geometry_column)
        display = {c: "+".join(cm.members(c)) for c in range(cm.k)}

        def _one_cluster(c: int):
            stratum = strata[c]
            if stratum.n_rows < _MIN_STRATUM_ROWS:
                return c, {
                    "skipped": f"only {stratum.n_rows} rows",
                    "n_rows": stratum.n_rows,
                    "members": cm.members(c),
                }
            cols_c = _raw_unit_columns(stratum)
            priors_c, _ = _fit_priors_for(selected, cols_c, kinds, cfg, f"cluster{c}")
            pinned_c = _pin_values(stratum, cols_c, selected)
            block_c = _abc_block(
                model, priors_c, pinned_c, resid_fit, stratum.targets, cfg, f"cluster{c}"
            )
            block_c["n_rows"] = stratum.n_rows
            block_c["members"] = cm.members(c)
            return c, block_c

        workers = worker_count()
        results: dict[int, dict] = {}
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for c, blk in pool.map(_one_cluster, range(cm.k)):
                    results[c] = blk
        else:
            for c in range(cm.k):
                _, blk = _one_cluster(c)
                results[c] = blk
        section["clusters"] = {
            "model": cm.to_dict(),
            "similarity": sim.to_dict(),
            "sizes": strata_sizes(strata, display),
            "per_cluster": {str(c): results[c] for c in sorted(results)},
        }
        return section

    abc_section = _guard("abc", _abc)

    report = PipelineReport(
        config=cfg.to_dict(),
        surrogate=surrogate_section,
        importance=importance_section,
        priors=priors_section,
        abc=abc_section,
    )

    # ---- artifact emission
    def _emit():
        dump_json(report.to_dict(), out / "report.json")
        dump_json(json_ready(model.to_dict()), out / "surrogate.json")
        if cfg.make_plots:
            from .plots import emit_plots

            emit_plots(report.to_dict(), out / "plots")

    _guard("emit", _emit)
    _write_manifest(out, completed, state)
    return report


def _write_manifest(out: Path, completed: list[str], state: dict) -> None:
    """Hash every artifact under the output directory; always written,
    also when a stage fails, so partial runs are auditable."""
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "MANIFEST.json":
            files[str(p.relative_to(out))] = sha256_file(p)
    dump_json(
        {
            "completed_stages": completed,
            "failed_stage": state["failed_stage"],
            "error": state["error"],
            "files": files,
        },
        out / "MANIFEST.json",
    )
