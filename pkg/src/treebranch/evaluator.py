"""Retrieval evaluation: descriptor extraction, distances, CMC / mAP under
the standard cross-camera protocol, and k-reciprocal re-ranking.

Protocol notes. For each query, gallery entries sharing the query's identity
AND camera are junk and removed from its ranking, as are distractor entries
(identity -1). CMC counts a hit at rank r if any true match appears within
the top r of the filtered ranking; AP is the mean of precision-at-each-true-
match over the filtered ranking. Queries with no valid positive are excluded
from the averages and counted.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import BatchStream, DatasetManifest, Preprocess
from .errors import ValidationError
from .model import TreeBranchNet

FEATURE_MODES = ("local_only", "global_only", "joint")
DISTRACTOR_PID = -1


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # (N, D)
    identity_ids: np.ndarray  # (N,)
    camera_ids: np.ndarray  # (N,)
    feature_mode: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.identity_ids = np.asarray(self.identity_ids, dtype=np.int64)
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64)
        n = self.vectors.shape[0]
        if self.identity_ids.shape[0] != n or self.camera_ids.shape[0] != n:
            raise ValidationError(
                f"label arrays must match {n} vectors, got "
                f"{self.identity_ids.shape[0]} ids / {self.camera_ids.shape[0]} cams"
            )
        if not np.isfinite(self.vectors).all():
            raise ValidationError("embedding matrix contains non-finite entries")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _l2_normalize(x: np.ndarray, axis: int = 1) -> np.ndarray:
    norms = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def extract_embeddings(
    model: TreeBranchNet,
    manifest: DatasetManifest,
    feature_mode: str = "joint",
    preprocess: Preprocess | None = None,
    batch_size: int = 64,
    normalize: bool = True,
) -> EmbeddingSet:
    """Eval-mode descriptors for every manifest entry, in manifest order.

    Each branch embedding (every leaf, and the global vector) is L2-normalized
    before concatenation so the blocks contribute comparably, then the full
    descriptor is L2-normalized again. ``normalize=False`` keeps raw branch
    outputs for comparison runs.
    """
    if feature_mode not in FEATURE_MODES:
        raise ValidationError(f"feature_mode must be one of {FEATURE_MODES}, got '{feature_mode}'")
    stream = BatchStream(manifest, preprocess or Preprocess(), augment=False)
    was_training = model.training
    model.eval()
    rows = []
    with torch.no_grad():
        for batch, _ in stream.eval_batches(batch_size):
            out = model(batch.pixels)
            blocks = []
            if feature_mode in ("local_only", "joint"):
                blocks.extend(emb.numpy().astype(np.float64) for emb in out.local_embeddings)
            if feature_mode in ("global_only", "joint"):
                blocks.append(out.global_embedding.numpy().astype(np.float64))
            if normalize:
                blocks = [_l2_normalize(b) for b in blocks]
            row = np.concatenate(blocks, axis=1)
            if normalize:
                row = _l2_normalize(row)
            rows.append(row)
    if was_training:
        model.train()
    return EmbeddingSet(
        vectors=np.concatenate(rows, axis=0),
        identity_ids=manifest.pids,
        camera_ids=manifest.camids,
        feature_mode=feature_mode,
    )


def _vectors_of(x) -> np.ndarray:
    v = x.vectors if isinstance(x, EmbeddingSet) else np.asarray(x)
    if v.ndim != 2:
        raise ValidationError(f"expected a 2-D embedding matrix, got shape {v.shape}")
    return v.astype(np.float64, copy=False)


def distance_matrix(query, gallery) -> np.ndarray:
    """Squared Euclidean distances (Q, G); on L2-normalized vectors this
    orders identically to cosine distance."""
    q = _vectors_of(query)
    g = _vectors_of(gallery)
    if q.shape[1] != g.shape[1]:
        raise ValidationError(f"dimension mismatch: query D={q.shape[1]}, gallery D={g.shape[1]}")
    sq_q = (q * q).sum(axis=1, keepdims=True)
    sq_g = (g * g).sum(axis=1, keepdims=True)
    dist = sq_q + sq_g.T - 2.0 * (q @ g.T)
    return np.maximum(dist, 0.0)


@dataclass
class RankingResult:
    """Per-query filtered rankings plus aggregate CMC / mAP.

    ``cmc[r]`` is the fraction of valid queries with a true match in the top
    r+1 of their junk-filtered ranking (so ``cmc[0]`` is Rank-1); the curve is
    padded with 1s past the end of shorter filtered rankings.
    """

    ranked_indices: list[np.ndarray]
    cmc: np.ndarray
    map: float
    num_valid_queries: int
    num_excluded_queries: int
    valid_query_mask: np.ndarray

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def rank_k(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def report(self, feature_mode: str = "", protocol: str = "single_query") -> dict:
        return {
            "feature_mode": feature_mode,
            "protocol": protocol,
            "rank1": self.rank1,
            "rank5": self.rank_k(5),
            "rank10": self.rank_k(10),
            "mAP": self.map,
            "num_valid_queries": self.num_valid_queries,
            "num_excluded_queries": self.num_excluded_queries,
        }


def evaluate(
    dist: np.ndarray,
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
) -> RankingResult:
    """CMC and mAP over a query-by-gallery distance matrix."""
    dist = np.asarray(dist, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    num_q, num_g = dist.shape
    if query_ids.shape[0] != num_q or gallery_ids.shape[0] != num_g:
        raise ValidationError(
            f"distance matrix {dist.shape} does not match {query_ids.shape[0]} queries "
            f"/ {gallery_ids.shape[0]} gallery labels"
        )

    order = np.argsort(dist, axis=1, kind="stable")
    ranked: list[np.ndarray] = []
    cmc_rows = []
    aps = []
    valid = np.zeros(num_q, dtype=bool)
    for qi in range(num_q):
        row = order[qi]
        junk = (gallery_ids[row] == query_ids[qi]) & (gallery_cams[row] == query_cams[qi])
        junk |= gallery_ids[row] == DISTRACTOR_PID
        kept = row[~junk]
        ranked.append(kept)
        matches = gallery_ids[kept] == query_ids[qi]
        num_rel = int(matches.sum())
        if num_rel == 0:
            continue
        valid[qi] = True
        hits = np.zeros(num_g, dtype=np.float64)
        first = int(np.argmax(matches))
        hits[first:] = 1.0  # filtered ranking is never longer than num_g
        cmc_rows.append(hits)
        positions = np.flatnonzero(matches) + 1
        precisions = np.arange(1, num_rel + 1) / positions
        # fsum: exactly rounded, so aggregates are reproducible bit-for-bit
        aps.append(math.fsum(precisions.tolist()) / num_rel)

    num_valid = int(valid.sum())
    if num_valid == 0:
        cmc = np.zeros(num_g, dtype=np.float64)
        mean_ap = 0.0
    else:
        cmc = np.stack(cmc_rows).mean(axis=0)
        mean_ap = math.fsum(aps) / num_valid
    return RankingResult(
        ranked_indices=ranked,
        cmc=cmc,
        map=mean_ap,
        num_valid_queries=num_valid,
        num_excluded_queries=num_q - num_valid,
        valid_query_mask=valid,
    )


def pool_multi_query(queries: EmbeddingSet) -> EmbeddingSet:
    """Merge all query vectors of each (identity, camera) pair by element-wise
    average, producing one pooled query per pair (the multi-query protocol)."""
    keys = list(zip(queries.identity_ids.tolist(), queries.camera_ids.tolist()))
    seen: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(keys):
        seen.setdefault(key, []).append(i)
    groups = sorted(seen)
    vectors = np.stack([queries.vectors[seen[key]].mean(axis=0) for key in groups])
    ids = np.array([key[0] for key in groups], dtype=np.int64)
    cams = np.array([key[1] for key in groups], dtype=np.int64)
    return EmbeddingSet(vectors=vectors, identity_ids=ids, camera_ids=cams, feature_mode=queries.feature_mode)


def evaluate_sets(
    query: EmbeddingSet,
    gallery: EmbeddingSet,
    protocol: str = "single_query",
    dist: np.ndarray | None = None,
) -> tuple[RankingResult, EmbeddingSet]:
    """Full protocol over two embedding sets; returns the result and the
    (possibly pooled) query set actually ranked. A precomputed `dist` (e.g.
    re-ranked) overrides the default squared-Euclidean matrix."""
    if protocol not in ("single_query", "multi_query"):
        raise ValidationError(f"protocol must be single_query or multi_query, got '{protocol}'")
    if query.dim != gallery.dim:
        raise ValidationError(f"query dim {query.dim} != gallery dim {gallery.dim}")
    if protocol == "multi_query":
        query = pool_multi_query(query)
        if dist is not None and dist.shape[0] != len(query):
            raise ValidationError("precomputed distances do not match the pooled query count")
    if dist is None:
        dist = distance_matrix(query, gallery)
    result = evaluate(dist, query.identity_ids, query.camera_ids, gallery.identity_ids, gallery.camera_ids)
    return result, query


# ---------------------------------------------------------------------------
# k-reciprocal re-ranking


def _k_reciprocal_neighbors(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    return forward[np.any(backward == i, axis=1)]


def k_reciprocal_rerank(
    query_emb,
    gallery_emb,
    k1: int = 20,
    k2: int = 6,
    lambda_value: float = 0.3,
) -> np.ndarray:
    """Refine query-gallery distances with k-reciprocal neighbor encoding.

    Over the query+gallery union: reciprocal neighbor sets are expanded with
    each candidate's k1/2-reciprocal set when two thirds of it overlaps,
    encoded as Gaussian-weighted sparse vectors, smoothed by local query
    expansion over the k2 nearest neighbors, and compared with Jaccard
    distance. The result blends (1 - lambda) * jaccard + lambda * original,
    so lambda=1 returns the original squared-Euclidean matrix exactly.
    """
    q = _vectors_of(query_emb)
    g = _vectors_of(gallery_emb)
    if q.shape[1] != g.shape[1]:
        raise ValidationError(f"dimension mismatch: query D={q.shape[1]}, gallery D={g.shape[1]}")
    num_q, num_g = q.shape[0], g.shape[0]
    if k2 < 1 or k1 <= k2:
        raise ValidationError(f"need k1 > k2 >= 1, got k1={k1}, k2={k2}")
    if k1 >= num_g:
        raise ValidationError(f"k1={k1} must be smaller than the gallery size {num_g}")
    if not (0.0 <= lambda_value <= 1.0):
        raise ValidationError(f"lambda_value must be in [0, 1], got {lambda_value}")

    total = num_q + num_g
    original_qg = distance_matrix(q, g)
    original = np.block(
        [
            [distance_matrix(q, q), original_qg],
            [original_qg.T, distance_matrix(g, g)],
        ]
    )

    # Scale each point's distances by the max over incoming columns; ranks are
    # unchanged, the Gaussian weights become scale-free.
    col_max = original.max(axis=0)
    scaled = (original / np.where(col_max > 0, col_max, 1.0)).T
    initial_rank = np.argsort(scaled, axis=1, kind="stable")

    v = np.zeros((total, total), dtype=np.float64)
    half_k = int(np.around(k1 / 2))
    for i in range(total):
        reciprocal = _k_reciprocal_neighbors(initial_rank, i, k1)
        expanded = reciprocal
        for candidate in reciprocal:
            candidate_reciprocal = _k_reciprocal_neighbors(initial_rank, int(candidate), half_k)
            if len(np.intersect1d(candidate_reciprocal, reciprocal)) > 2.0 / 3.0 * len(candidate_reciprocal):
                expanded = np.append(expanded, candidate_reciprocal)
        expanded = np.unique(expanded)
        weights = np.exp(-scaled[i, expanded])
        v[i, expanded] = weights / weights.sum()

    if k2 != 1:
        v = np.stack([v[initial_rank[i, :k2]].mean(axis=0) for i in range(total)])

    inverted = [np.flatnonzero(v[:, j]) for j in range(total)]
    jaccard = np.zeros((num_q, total), dtype=np.float64)
    for i in range(num_q):
        min_sum = np.zeros(total, dtype=np.float64)
        nonzero = np.flatnonzero(v[i])
        for j in nonzero:
            rows = inverted[j]
            min_sum[rows] += np.minimum(v[i, j], v[rows, j])
        jaccard[i] = 1.0 - min_sum / (2.0 - min_sum)

    return (1.0 - lambda_value) * jaccard[:, num_q:] + lambda_value * original_qg


# ---------------------------------------------------------------------------
# artifacts


def save_embeddings(emb: EmbeddingSet, prefix) -> tuple[Path, Path]:
    """Binary matrix next to a JSON sidecar {N, D, feature_mode, ids, cams}."""
    prefix = Path(prefix)
    matrix_path = prefix.with_suffix(".npy")
    sidecar_path = prefix.with_suffix(".json")
    np.save(matrix_path, emb.vectors)
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "N": len(emb),
                "D": emb.dim,
                "feature_mode": emb.feature_mode,
                "ids": emb.identity_ids.tolist(),
                "cams": emb.camera_ids.tolist(),
            },
            fh,
            sort_keys=True,
        )
    return matrix_path, sidecar_path


def load_embeddings(prefix) -> EmbeddingSet:
    prefix = Path(prefix)
    matrix_path = prefix.with_suffix(".npy")
    sidecar_path = prefix.with_suffix(".json")
    if not matrix_path.is_file() or not sidecar_path.is_file():
        raise ValidationError(f"embedding files not found for prefix '{prefix}'")
    vectors = np.load(matrix_path)
    with open(sidecar_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if vectors.shape != (meta["N"], meta["D"]):
        raise ValidationError(
            f"embedding matrix shape {vectors.shape} does not match sidecar "
            f"({meta['N']}, {meta['D']})"
        )
    return EmbeddingSet(
        vectors=vectors,
        identity_ids=np.array(meta["ids"], dtype=np.int64),
        camera_ids=np.array(meta["cams"], dtype=np.int64),
        feature_mode=meta["feature_mode"],
    )


def dump_ranking(
    result: RankingResult,
    query_manifest: DatasetManifest,
    gallery_manifest: DatasetManifest,
    top_n: int,
    out_path,
) -> None:
    """CSV of each query's top-n junk-filtered gallery paths plus match flags
    (1 = same identity)."""
    gallery_paths = gallery_manifest.paths
    gallery_pids = gallery_manifest.pids
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query", "match_flags"] + [f"top{r}" for r in range(1, top_n + 1)])
        for qi, kept in enumerate(result.ranked_indices):
            entry = query_manifest.entries[qi]
            top = kept[:top_n]
            flags = ";".join(str(int(gallery_pids[g] == entry.pid)) for g in top)
            row = [entry.path, flags] + [gallery_paths[g] for g in top]
            row += [""] * (2 + top_n - len(row))
            writer.writerow(row)
