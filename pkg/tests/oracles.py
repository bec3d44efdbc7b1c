"""Independent reference implementations used to check the package.

Everything here is deliberately written as plain loops over Python floats
(math module arithmetic, sets, and sorting) so it shares no code path with
the vectorized implementations under test.
"""

from __future__ import annotations

import math


def softmax(logits: list[float]) -> list[float]:
    m = max(logits)
    exps = [math.exp(x - m) for x in logits]
    total = math.fsum(exps)
    return [e / total for e in exps]


def cross_entropy(logit_rows: list[list[float]], labels: list[int]) -> float:
    """Batch-mean CE: -(1/N) sum_i log softmax(row_i)[label_i]."""
    terms = []
    for row, label in zip(logit_rows, labels):
        probs = softmax(row)
        terms.append(-math.log(probs[label]))
    return math.fsum(terms) / len(terms)


def local_ce(blocks: list[list[list[float]]], labels: list[int]) -> float:
    """(1/N) sum_i sum_k CE of block k's softmax at the true label."""
    n = len(labels)
    terms = []
    for i in range(n):
        for block in blocks:
            probs = softmax(block[i])
            terms.append(-math.log(probs[labels[i]]))
    return math.fsum(terms) / n


def kl_divergence(logits_p: list[list[float]], logits_q: list[list[float]]) -> float:
    """(1/N) sum_i KL(softmax(p_i) || softmax(q_i)), direct summation."""
    per_sample = []
    for row_p, row_q in zip(logits_p, logits_q):
        p = softmax(row_p)
        q = softmax(row_q)
        per_sample.append(math.fsum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0))
    return math.fsum(per_sample) / len(per_sample)


def pairwise_sq_distances(a: list[list[float]], b: list[list[float]]) -> list[list[float]]:
    out = []
    for row_a in a:
        row = []
        for row_b in b:
            row.append(math.fsum((x - y) ** 2 for x, y in zip(row_a, row_b)))
        out.append(row)
    return out


def reference_cmc_map(dist, q_ids, q_cams, g_ids, g_cams) -> tuple[list[float], float, int]:
    """Quadratic-time CMC / mAP with same-camera junk filtering, distractor
    removal (id -1), and zero-positive query exclusion.

    Returns (cmc curve padded to gallery length, mAP, number of valid queries).
    """
    num_q = len(q_ids)
    num_g = len(g_ids)
    cmc_sum = [0.0] * num_g
    aps: list[float] = []
    num_valid = 0
    for qi in range(num_q):
        order = sorted(range(num_g), key=lambda j: (dist[qi][j], j))
        filtered = [
            j
            for j in order
            if not ((g_ids[j] == q_ids[qi] and g_cams[j] == q_cams[qi]) or g_ids[j] == -1)
        ]
        matches = [g_ids[j] == q_ids[qi] for j in filtered]
        if not any(matches):
            continue
        num_valid += 1
        first = matches.index(True)
        for r in range(first, num_g):
            cmc_sum[r] += 1.0
        hits = 0
        precisions = []
        for rank, matched in enumerate(matches, start=1):
            if matched:
                hits += 1
                precisions.append(hits / rank)
        aps.append(math.fsum(precisions) / len(precisions))
    if num_valid == 0:
        return [0.0] * num_g, 0.0, 0
    cmc = [s / num_valid for s in cmc_sum]
    return cmc, math.fsum(aps) / num_valid, num_valid


def average_precision(match_flags: list[bool]) -> float:
    """AP of one already-filtered ranking."""
    hits = 0
    precisions = []
    for rank, matched in enumerate(match_flags, start=1):
        if matched:
            hits += 1
            precisions.append(hits / rank)
    return math.fsum(precisions) / len(precisions)


# ---------------------------------------------------------------------------
# k-reciprocal re-ranking reference


def _rank_rows(dist: list[list[float]]) -> list[list[int]]:
    n = len(dist)
    return [sorted(range(n), key=lambda j: (dist[i][j], j)) for i in range(n)]


def _reciprocal_set(ranks: list[list[int]], i: int, k: int) -> set[int]:
    forward = set(ranks[i][: k + 1])
    return {j for j in forward if i in ranks[j][: k + 1]}


def reference_jaccard(dist: list[list[float]], num_q: int, k1: int, k2: int) -> list[list[float]]:
    """Jaccard distances of the k-reciprocal encoding pipeline, recomputed from
    the definition with sets and dicts: reciprocal sets, the k1/2 expansion
    under the two-thirds overlap rule, exp(-d) weights, local query expansion
    over the k2 nearest neighbours, then 1 - sum(min)/sum(max).

    `dist` is the scaled union distance matrix (query rows first).
    """
    total = len(dist)
    ranks = _rank_rows(dist)
    half_k = round(k1 / 2)

    encoded: list[dict[int, float]] = []
    for i in range(total):
        reciprocal = _reciprocal_set(ranks, i, k1)
        expanded = set(reciprocal)
        for candidate in reciprocal:
            candidate_set = _reciprocal_set(ranks, candidate, half_k)
            if len(candidate_set & reciprocal) > (2.0 / 3.0) * len(candidate_set):
                expanded |= candidate_set
        weights = {j: math.exp(-dist[i][j]) for j in sorted(expanded)}
        norm = math.fsum(weights.values())
        encoded.append({j: w / norm for j, w in weights.items()})

    if k2 != 1:
        smoothed = []
        for i in range(total):
            neighbours = ranks[i][:k2]
            merged: dict[int, float] = {}
            for j in neighbours:
                for col, w in encoded[j].items():
                    merged[col] = merged.get(col, 0.0) + w / k2
            smoothed.append(merged)
        encoded = smoothed

    jaccard = []
    for i in range(num_q):
        row = []
        for j in range(total):
            cols = set(encoded[i]) | set(encoded[j])
            min_sum = math.fsum(min(encoded[i].get(c, 0.0), encoded[j].get(c, 0.0)) for c in cols)
            max_sum = math.fsum(max(encoded[i].get(c, 0.0), encoded[j].get(c, 0.0)) for c in cols)
            row.append(1.0 - min_sum / max_sum if max_sum > 0 else 1.0)
        jaccard.append(row)
    return jaccard
