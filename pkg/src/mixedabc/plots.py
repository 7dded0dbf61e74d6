"""Figure emission for pipeline reports.

Every function takes the plain-dict report sections, so figures can be
re-rendered later from a saved report.json without rerunning anything.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "mixedabc"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


class PlotError(Exception):
    pass


class IoError(PlotError):
    pass


def _save(fig, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        # a pinned Date keeps repeated runs byte-comparable
        fig.savefig(path, dpi=150, metadata={"Date": None})
    except OSError as exc:
        raise IoError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def kde_curve(
    values: Sequence[float],
    weights: Optional[Sequence[float]] = None,
    n_grid: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted Gaussian kernel density on a padded regular grid.

    Bandwidth follows the 0.9 * min(sd, IQR/1.34) * n_eff^(-1/5) rule with
    the effective sample size standing in for n when weights are uneven.
    """
    x = np.asarray(values, dtype=float).ravel()
    if len(x) < 2:
        raise PlotError("need at least 2 values for a density curve")
    if weights is None:
        w = np.full(len(x), 1.0 / len(x))
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != x.shape:
            raise PlotError("weights must align with values")
        if np.any(w < 0) or w.sum() == 0.0:
            raise PlotError("weights must be nonnegative and not all zero")
        w = w / w.sum()
    n_eff = 1.0 / float(np.sum(w**2))
    mean = float(w @ x)
    sd = float(np.sqrt(max(w @ (x - mean) ** 2, 0.0)))
    order = np.argsort(x, kind="stable")
    cw = np.cumsum(w[order])
    q1 = float(x[order][np.searchsorted(cw, 0.25, side="left")])
    q3 = float(x[order][min(np.searchsorted(cw, 0.75, side="left"), len(x) - 1)])
    spread = min(sd, (q3 - q1) / 1.34) if q3 > q1 else sd
    if spread <= 0.0:
        spread = max(sd, 1e-12)
    bw = 0.9 * spread * n_eff ** (-0.2)
    lo, hi = float(x.min()) - 3.0 * bw, float(x.max()) + 3.0 * bw
    grid = np.linspace(lo, hi, n_grid)
    z = (grid[:, None] - x[None, :]) / bw
    dens = (np.exp(-0.5 * z**2) @ w) / (bw * np.sqrt(2.0 * np.pi))
    return grid, dens


def parity_scatter(parity: Mapping, path) -> Path:
    """Predicted vs actual with the y = x reference."""
    actual = np.asarray(parity["actual"], dtype=float)
    predicted = np.asarray(parity["predicted"], dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    ax.scatter(actual, predicted, s=6, alpha=0.35, edgecolors="none", color="#1f6fb4")
    lo = min(actual.min(), predicted.min())
    hi = max(actual.max(), predicted.max())
    pad = 0.03 * (hi - lo) if hi > lo else 1.0
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color="0.3", lw=1.0, ls="--")
    ax.set_xlim(lo - pad, hi + pad)
    ax.set_ylim(lo - pad, hi + pad)
    ax.set_xlabel("measured response")
    ax.set_ylabel("model prediction")
    ax.set_title("Surrogate parity")
    ax.grid(True, linestyle=":", linewidth=0.6, alpha=0.7)
    fig.tight_layout()
    return _save(fig, path)


def importance_bars(importance: Mapping, path, max_bars: int = 12) -> Path:
    ranking = importance["ranking"][:max_bars]
    names = [str(n) for n, _ in ranking]
    gains = np.asarray([float(g) for _, g in ranking])
    selected = set(importance.get("selected", ()))
    fig, ax = plt.subplots(figsize=(6.0, 0.45 * len(names) + 1.2))
    ypos = np.arange(len(names))[::-1]
    colors = ["#d1495b" if n in selected else "#8da9c4" for n in names]
    ax.barh(ypos, gains, color=colors, height=0.7)
    ax.set_yticks(ypos)
    ax.set_yticklabels(names)
    ax.set_xlabel("total split gain")
    ax.set_title("Feature importance")
    ax.grid(True, axis="x", linestyle=":", linewidth=0.6, alpha=0.7)
    fig.tight_layout()
    return _save(fig, path)


def posterior_kde(block: Mapping, feature: str, path) -> Path:
    """Weighted posterior density of one inferred feature, with its
    credible-interval bounds marked."""
    names = list(block["feature_names"])
    if feature not in names:
        raise PlotError(f"no feature {feature!r} in this block")
    j = names.index(feature)
    draws = np.asarray(block["draws"], dtype=float)[:, j]
    weights = np.asarray(block["norm_weights"], dtype=float)
    grid, dens = kde_curve(draws, weights)
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(grid, dens, color="#1f6fb4", lw=1.6)
    ax.fill_between(grid, dens, color="#1f6fb4", alpha=0.18)
    summary = block["posteriors"].get(feature)
    if summary:
        ax.axvline(summary["mean"], color="#d1495b", lw=1.2, label="posterior mean")
        for lo, hi in summary["intervals"].values():
            ax.axvline(lo, color="0.4", lw=0.9, ls=":")
            ax.axvline(hi, color="0.4", lw=0.9, ls=":")
        ax.legend(loc="best", fontsize=9)
    ax.set_xlabel(feature)
    ax.set_ylabel("density")
    ax.set_title(f"Posterior of {feature}")
    fig.tight_layout()
    return _save(fig, path)


def validation_overlay(block: Mapping, path, n_bins: int = 40) -> Path:
    """Observed measurements vs posterior-resampled predictions."""
    observed = np.asarray(block["observed"], dtype=float)
    predicted = np.asarray(block["predicted"], dtype=float)
    lo = min(observed.min(), predicted.min())
    hi = max(observed.max(), predicted.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    bins = np.linspace(lo, hi, n_bins + 1)
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.hist(observed, bins=bins, density=True, alpha=0.55, color="#8da9c4", label="observed")
    ax.hist(
        predicted,
        bins=bins,
        density=True,
        alpha=0.55,
        color="#d1495b",
        label="posterior predictive",
        histtype="step",
        lw=1.6,
    )
    ax.set_xlabel("measurement")
    ax.set_ylabel("density")
    ax.set_title("Forward validation")
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def similarity_heatmap(similarity: Mapping, path) -> Path:
    labels = [str(n) for n in similarity["labels"]]
    values = np.asarray(similarity["values"], dtype=float)
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    im = ax.imshow(values, cmap="RdBu_r", vmin=-1.0, vmax=1.0)
    ax.set_xticks(range(len(labels)))
    ax.set_yticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_yticklabels(labels, fontsize=8)
    fig.colorbar(im, ax=ax, label="cosine similarity")
    ax.set_title("Geometry similarity")
    fig.tight_layout()
    return _save(fig, path)


def emit_plots(report: Mapping, out_dir) -> list[Path]:
    """Render the standard figure set for one report; returns written paths."""
    out = Path(out_dir)
    sections = report["sections"]
    written: list[Path] = []
    written.append(parity_scatter(sections["surrogate"]["parity"], out / "parity.svg"))
    written.append(importance_bars(sections["importance"], out / "importance.svg"))
    abc = sections["abc"]
    block = abc["global"]
    for feature in block["inferred"]:
        written.append(posterior_kde(block, feature, out / f"posterior_{feature}.svg"))
    written.append(validation_overlay(block, out / "validation.svg"))
    clusters = abc.get("clusters")
    if clusters:
        written.append(similarity_heatmap(clusters["similarity"], out / "similarity.svg"))
        for cid, blk in clusters["per_cluster"].items():
            if "skipped" in blk:
                continue
            written.append(
                validation_overlay(blk, out / f"validation_cluster{cid}.svg")
            )
    return written
