"""Embedding-space analysis: cosine similarity, spectral clustering, strata.

Dense per-category shape vectors come either from an external table (TSV)
or from the hash-based fallback embedder.  Clustering runs on the cosine
similarity matrix: negative entries are clipped to zero for the affinity,
the symmetric normalized Laplacian is diagonalized with a Jacobi solver,
and the bottom-k eigenvector rows are grouped by seeded k-means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import Dataset, InvalidConfig
from .util import child_rng


class GeometryError(Exception):
    pass


class ZeroVector(GeometryError):
    pass


class DisconnectedDegenerate(GeometryError):
    pass


class UnknownGeometry(GeometryError):
    pass


class EmptyDescription(GeometryError):
    pass


# ---------------------------------------------------------------------------
# domain types


@dataclass
class EmbeddingTable:
    """Per-label dense vectors, one row per label, fixed dimension."""

    names: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        self.names = tuple(str(n) for n in self.names)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise InvalidConfig("embedding vectors must form a 2-d matrix")
        if len(self.names) != self.vectors.shape[0]:
            raise InvalidConfig("one vector per label required")
        if len(set(self.names)) != len(self.names):
            raise InvalidConfig("duplicate embedding labels")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidConfig("embedding vectors must be finite")
        for name, row in zip(self.names, self.vectors):
            if np.all(row == 0.0):
                raise ZeroVector(name)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class SimilarityMatrix:
    labels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        self.labels = tuple(str(l) for l in self.labels)
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.labels)
        if self.values.shape != (n, n):
            raise InvalidConfig("similarity matrix must be square over the labels")
        if not np.allclose(self.values, self.values.T, atol=1e-12, rtol=0.0):
            raise InvalidConfig("similarity matrix must be symmetric within 1e-12")
        if not np.allclose(np.diag(self.values), 1.0, atol=1e-12, rtol=0.0):
            raise InvalidConfig("similarity diagonal must be 1 within 1e-12")
        if self.values.min() < -1.0 - 1e-12 or self.values.max() > 1.0 + 1e-12:
            raise InvalidConfig("similarity values must lie in [-1, 1]")

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "values": self.values.tolist()}


@dataclass
class ClusterModel:
    """Label -> cluster assignment plus per-cluster cohesion diagnostics.

    ``inner_similarity`` holds each cluster's minimum pairwise cosine
    (1.0 for singletons).  ``eigenvalues`` records the Laplacian spectrum
    of the connected subproblem so the eigengap can be inspected.
    """

    assignment: dict[str, int]
    k: int
    inner_similarity: dict[int, float]
    disconnected: tuple[str, ...] = ()
    eigenvalues: tuple[float, ...] = ()

    def __post_init__(self):
        if self.k < 1:
            raise InvalidConfig("k must be >= 1")
        for name, c in self.assignment.items():
            if not 0 <= int(c) < self.k:
                raise InvalidConfig(f"cluster index {c} for {name!r} outside [0, {self.k})")

    def members(self, cluster: int) -> list[str]:
        return [n for n, c in self.assignment.items() if c == cluster]

    def to_dict(self) -> dict:
        return {
            "assignment": {n: int(c) for n, c in self.assignment.items()},
            "k": self.k,
            "inner_similarity": {str(c): float(v) for c, v in self.inner_similarity.items()},
            "disconnected": list(self.disconnected),
            "eigenvalues": [float(v) for v in self.eigenvalues],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterModel":
        return cls(
            assignment={str(n): int(c) for n, c in d["assignment"].items()},
            k=int(d["k"]),
            inner_similarity={int(c): float(v) for c, v in d["inner_similarity"].items()},
            disconnected=tuple(d.get("disconnected", ())),
            eigenvalues=tuple(d.get("eigenvalues", ())),
        )


# ---------------------------------------------------------------------------
# similarity


def cosine_matrix(emb: EmbeddingTable) -> SimilarityMatrix:
    """Pairwise cosine similarities, computed once per unordered pair."""
    n = len(emb.names)
    if n < 2:
        raise InvalidConfig("need at least 2 labels for a similarity matrix")
    norms = np.linalg.norm(emb.vectors, axis=1)
    for name, nv in zip(emb.names, norms):
        if nv == 0.0:
            raise ZeroVector(name)
    unit = emb.vectors / norms[:, None]
    values = np.empty((n, n))
    for i in range(n):
        values[i, i] = 1.0
        row = unit[i + 1 :] @ unit[i]
        np.clip(row, -1.0, 1.0, out=row)
        values[i, i + 1 :] = row
        values[i + 1 :, i] = row
    return SimilarityMatrix(labels=emb.names, values=values)


# ---------------------------------------------------------------------------
# eigensolver


def _jacobi_eigh(a: np.ndarray, tol: float = 1e-13, max_sweeps: int = 100):
    """Cyclic Jacobi diagonalization of a symmetric matrix.

    Returns (eigenvalues ascending, eigenvectors as columns).  Adequate for
    the label-count scale here; no attempt at large-matrix performance.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise InvalidConfig("matrix must be square")
    v = np.eye(n)
    if n == 1:
        return np.diag(a).copy(), v
    fro = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * max(fro, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:  # theta**2 would overflow; use the limit
                    t = 1.0 / (2.0 * theta)
                elif theta >= 0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    order = np.argsort(np.diag(a), kind="stable")
    return np.diag(a)[order].copy(), v[:, order]


# ---------------------------------------------------------------------------
# k-means


def _kmeans_single(points: np.ndarray, k: int, rng: np.random.Generator):
    """One k-means++ run; returns (labels, objective, per-iteration objectives)."""
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[c] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    prev = None
    history = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(200):
        dist2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = dist2.argmin(axis=1)
        history.append(float(dist2[np.arange(n), labels].sum()))
        if prev is not None and np.array_equal(labels, prev):
            break
        prev = labels.copy()
        for c in range(k):
            mask = labels == c
            if mask.any():
                centers[c] = points[mask].mean(axis=0)
            else:
                # revive an empty cluster at the worst-served point
                centers[c] = points[int(dist2.min(axis=1).argmax())]
    return labels, history[-1], history


def _kmeans(points: np.ndarray, k: int, seed: int, restarts: int = 20) -> np.ndarray:
    """Best of ``restarts`` seeded runs; ties keep the earliest restart."""
    best_obj = np.inf
    best = None
    for r in range(restarts):
        labels, obj, _ = _kmeans_single(points, k, child_rng(seed, "kmeans", r))
        if obj < best_obj:
            best_obj, best = obj, labels
    return best


def _canonical_labels(raw: np.ndarray) -> np.ndarray:
    """Relabel clusters by first appearance so output ids are stable."""
    mapping: dict[int, int] = {}
    out = np.empty_like(raw)
    for i, l in enumerate(raw):
        if int(l) not in mapping:
            mapping[int(l)] = len(mapping)
        out[i] = mapping[int(l)]
    return out


# ---------------------------------------------------------------------------
# spectral clustering


def spectral_cluster(sim: SimilarityMatrix, k: int = 4, seed: int = 0) -> ClusterModel:
    n = len(sim.labels)
    if k < 2:
        raise InvalidConfig("k must be >= 2")
    if k > n:
        raise InvalidConfig(f"k={k} exceeds the {n} available labels")
    affinity = np.maximum(sim.values, 0.0)
    off_degree = affinity.sum(axis=1) - np.diag(affinity)
    disc_idx = np.flatnonzero(off_degree == 0.0)
    conn_idx = np.flatnonzero(off_degree > 0.0)
    k_rest = k - len(disc_idx)
    if len(disc_idx) > 0 and (k_rest < 0 or (k_rest == 0) != (len(conn_idx) == 0) or len(conn_idx) < k_rest):
        names = ", ".join(sim.labels[i] for i in disc_idx)
        raise DisconnectedDegenerate(
            f"{len(disc_idx)} label(s) with no positive affinity ({names}) "
            f"cannot each take a cluster at k={k}"
        )

    eigenvalues: tuple[float, ...] = ()
    labels_conn = np.zeros(len(conn_idx), dtype=np.int64)
    if len(conn_idx) > 0 and k_rest >= 2:
        a_sub = affinity[np.ix_(conn_idx, conn_idx)]
        d_inv_sqrt = 1.0 / np.sqrt(a_sub.sum(axis=1))
        lap = np.eye(len(conn_idx)) - d_inv_sqrt[:, None] * a_sub * d_inv_sqrt[None, :]
        lap = (lap + lap.T) / 2.0
        evals, evecs = _jacobi_eigh(lap)
        eigenvalues = tuple(float(v) for v in evals)
        u = evecs[:, :k_rest].copy()
        row_norm = np.linalg.norm(u, axis=1)
        row_norm[row_norm == 0.0] = 1.0
        u /= row_norm[:, None]
        labels_conn = _canonical_labels(_kmeans(u, k_rest, seed))

    assignment: dict[str, int] = {}
    for pos, i in enumerate(conn_idx):
        assignment[sim.labels[i]] = int(labels_conn[pos])
    for j, i in enumerate(disc_idx):
        assignment[sim.labels[i]] = k_rest + j
    assignment = {name: assignment[name] for name in sim.labels}

    inner: dict[int, float] = {}
    for c in range(k):
        members = [i for i, name in enumerate(sim.labels) if assignment[name] == c]
        if len(members) < 2:
            inner[c] = 1.0
        else:
            block = sim.values[np.ix_(members, members)]
            inner[c] = float(block[np.triu_indices(len(members), 1)].min())
    return ClusterModel(
        assignment=assignment,
        k=k,
        inner_similarity=inner,
        disconnected=tuple(sim.labels[i] for i in disc_idx),
        eigenvalues=eigenvalues,
    )


# ---------------------------------------------------------------------------
# stratification


def stratify(ds: Dataset, cm: ClusterModel, geometry_column: str) -> dict[int, Dataset]:
    """Partition rows by the cluster of each row's geometry label.

    Every cluster index in [0, k) gets an entry; strata preserve row order.
    """
    if geometry_column not in ds.labels:
        raise UnknownGeometry(f"dataset has no raw label column {geometry_column!r}")
    values = ds.labels[geometry_column]
    clusters = np.empty(len(values), dtype=np.int64)
    for row, val in enumerate(values):
        if val not in cm.assignment:
            raise UnknownGeometry(f"label {val!r} at row {row} is not in the cluster model")
        clusters[row] = cm.assignment[val]
    return {c: ds.take(np.flatnonzero(clusters == c)) for c in range(cm.k)}


def strata_sizes(strata: Mapping[int, Dataset], names: Mapping[int, str] | None = None) -> str:
    """Render per-stratum sizes, e.g. "Triangular 973, Rhomboid 2085, ..."."""
    parts = []
    for c in sorted(strata):
        label = names[c] if names is not None else f"cluster {c}"
        parts.append(f"{label} {strata[c].n_rows}")
    return ", ".join(parts)


# ---------------------------------------------------------------------------
# fallback embedding


def fallback_embed(descriptions, dim: int = 3, seed: int = 0) -> EmbeddingTable:
    """Token-hash random-projection embedding.

    Accepts a mapping label -> token sequence, or a plain sequence of token
    sequences (labels become item_0, item_1, ...).  Each token hashes to a
    seeded Gaussian direction; a description embeds as the normalized mean
    of its token vectors, so shared tokens raise cosine similarity.
    """
    if dim < 2:
        raise InvalidConfig("embedding dimension must be >= 2")
    if isinstance(descriptions, Mapping):
        items = [(str(name), list(tokens)) for name, tokens in descriptions.items()]
    else:
        items = [(f"item_{i}", list(tokens)) for i, tokens in enumerate(descriptions)]
    if not items:
        raise InvalidConfig("need at least one description")
    vectors = np.empty((len(items), dim))
    for row, (name, tokens) in enumerate(items):
        if len(tokens) == 0:
            raise EmptyDescription(name)
        acc = np.zeros(dim)
        for tok in tokens:
            acc += child_rng(seed, "token", str(tok)).standard_normal(dim)
        acc /= len(tokens)
        norm = np.linalg.norm(acc)
        if norm == 0.0:
            raise ZeroVector(name)
        vectors[row] = acc / norm
    return EmbeddingTable(names=tuple(n for n, _ in items), vectors=vectors)


# ---------------------------------------------------------------------------
# TSV interchange


def write_embedding_tsv(emb: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, row in zip(emb.names, emb.vectors):
            fh.write(name + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def read_embedding_tsv(path) -> EmbeddingTable:
    names = []
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise InvalidConfig(f"line {line_no}: need a label and >= 2 coordinates")
            names.append(parts[0])
            try:
                rows.append([float(p) for p in parts[1:]])
            except ValueError as exc:
                raise InvalidConfig(f"line {line_no}: non-numeric coordinate") from exc
    if not names:
        raise InvalidConfig("empty embedding table")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise InvalidConfig("inconsistent embedding dimensions across rows")
    return EmbeddingTable(names=tuple(names), vectors=np.array(rows))
