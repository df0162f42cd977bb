"""Attention diagnostics: query-region purity via seeded 2-means, attention
entropy, and query/key centroid distances.

Purity stacks a record's N query rows over its N key rows, runs Lloyd's
algorithm seeded with the query and key centroids, and reports the query
fraction of the cluster descending from the query seed. A purity of 1.0
means full separation; values just under 1.0 mean a few keys blended into
the query region; ~0.5 means queries and keys are mixed.

Entropy is reported in nats, alongside a base-free normalized variant
(entropy / ln N).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

KMEANS_MAX_ITER = 100
ROW_SUM_TOL = 1e-6


def kmeans2(points: np.ndarray, init_a: np.ndarray, init_b: np.ndarray,
            max_iter: int = KMEANS_MAX_ITER):
    """Two-cluster Lloyd iteration with fixed initial centers.

    Deterministic: points equidistant from both centers go to cluster a
    (the query-seeded side), and an emptied cluster keeps its previous
    center. Stops at an assignment fixpoint or after ``max_iter`` rounds.
    Returns (assignment in {0, 1}, centers (2, d)).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise ContractError(f"kmeans2 needs at least 2 points, got {points.shape}")
    if not (np.all(np.isfinite(init_a)) and np.all(np.isfinite(init_b))):
        raise ContractError("kmeans2 initial centers must be finite")
    centers = np.stack([np.asarray(init_a, dtype=np.float64),
                        np.asarray(init_b, dtype=np.float64)])
    if np.array_equal(centers[0], centers[1]):
        # degenerate seeding: a single effective cluster, owned by side a
        centers[0] = points.mean(axis=0)
        return np.zeros(points.shape[0], dtype=np.int8), centers
    assignment = None
    for _ in range(max_iter):
        d_a = ((points - centers[0]) ** 2).sum(axis=1)
        d_b = ((points - centers[1]) ** 2).sum(axis=1)
        new_assignment = (d_b < d_a).astype(np.int8)  # ties -> 0 (cluster a)
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for c in (0, 1):
            members = points[assignment == c]
            if members.shape[0] > 0:
                centers[c] = members.mean(axis=0)
    return assignment, centers


def centroid_distance(q: np.ndarray, k: np.ndarray) -> float:
    """L2 distance between the query and key mean vectors.

    This is the shared code path for region_distance and the per-record
    alignment-loss term, so the two agree bit for bit.
    """
    gap = q.mean(axis=0) - k.mean(axis=0)
    return float(np.sqrt((gap * gap).sum()))


@dataclass
class PurityStat:
    value: float  # nan when the query-seeded cluster came out empty
    defined: bool
    swapped: bool  # final query-seeded center ended nearer the key seed
    blended_keys: int  # keys assigned to the query-seeded cluster


def purity_detail(record) -> PurityStat:
    q, k = record.q, record.k
    n = q.shape[0]
    points = np.vstack([q, k])
    q_bar = q.mean(axis=0)
    k_bar = k.mean(axis=0)
    assignment, centers = kmeans2(points, q_bar, k_bar)
    in_a = assignment == 0
    size = int(in_a.sum())
    swapped = bool(
        ((centers[0] - q_bar) ** 2).sum() > ((centers[0] - k_bar) ** 2).sum()
    )
    if size == 0:
        return PurityStat(float("nan"), False, swapped, 0)
    queries_in_a = int(in_a[:n].sum())
    keys_in_a = int(in_a[n:].sum())
    return PurityStat(queries_in_a / size, True, swapped, keys_in_a)


def purity(record) -> float:
    """Fraction of the query-seeded cluster that is actual queries; nan when
    that cluster is empty (counted separately in reports)."""
    return purity_detail(record).value


def attention_entropy(a: np.ndarray) -> float:
    """Mean Shannon row entropy in nats; 0 log 0 reads as 0.

    Rows must sum to 1 within 1e-6 (they are attention distributions).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"attention map must be 2-D, got shape {a.shape}")
    sums = a.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
        worst = float(np.abs(sums - 1.0).max())
        raise ContractError(f"attention rows must sum to 1 (worst deviation {worst})")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0.0, a * np.log(a), 0.0)
    return float(-terms.sum(axis=1).mean())


def record_entropy(record) -> float:
    return attention_entropy(record.a)


def normalized_entropy(a: np.ndarray) -> float:
    """Entropy scaled into [0, 1] by ln N; a 1x1 map counts as uniform."""
    n = np.asarray(a).shape[-1]
    if n == 1:
        return 1.0
    return attention_entropy(a) / math.log(n)


def head_average_entropy(records) -> float:
    """Mean over heads of per-head row entropies (one layer's records)."""
    records = list(records)
    if not records:
        raise ContractError("head_average_entropy needs at least one record")
    return float(np.mean([attention_entropy(r.a) for r in records]))


def region_distance(record) -> float:
    """L2 distance between the record's query and key centroids."""
    return centroid_distance(record.q, record.k)


@dataclass
class RecordDiagnostics:
    branch: str
    layer: int
    head: int
    purity: float
    purity_defined: bool
    swapped: bool
    blended_keys: int
    entropy: float
    entropy_normalized: float
    region_distance: float


def diagnose_record(record) -> RecordDiagnostics:
    stat = purity_detail(record)
    return RecordDiagnostics(
        branch=record.branch,
        layer=record.layer,
        head=record.head,
        purity=stat.value,
        purity_defined=stat.defined,
        swapped=stat.swapped,
        blended_keys=stat.blended_keys,
        entropy=attention_entropy(record.a),
        entropy_normalized=normalized_entropy(record.a),
        region_distance=region_distance(record),
    )


@dataclass
class PurityReport:
    values: np.ndarray  # defined purities only
    mean: float
    min: float
    undefined_count: int
    swap_count: int
    histogram: np.ndarray  # counts over 10 equal bins of [0, 1]
    bin_edges: np.ndarray


def purity_report(records) -> PurityReport:
    stats = [purity_detail(r) for r in records]
    values = np.asarray([s.value for s in stats if s.defined])
    if values.size == 0:
        raise ContractError("purity_report got no defined purity values")
    hist, edges = np.histogram(values, bins=10, range=(0.0, 1.0))
    return PurityReport(
        values=values,
        mean=float(values.mean()),
        min=float(values.min()),
        undefined_count=sum(1 for s in stats if not s.defined),
        swap_count=sum(1 for s in stats if s.swapped),
        histogram=hist,
        bin_edges=edges,
    )


@dataclass
class EntropyReport:
    per_layer: dict  # (branch, layer) -> mean entropy over heads and rows
    per_layer_normalized: dict


def entropy_report(records) -> EntropyReport:
    grouped = {}
    for r in records:
        grouped.setdefault((r.branch, r.layer), []).append(r)
    per_layer = {}
    per_layer_norm = {}
    for key, group in sorted(grouped.items()):
        per_layer[key] = float(np.mean([attention_entropy(g.a) for g in group]))
        per_layer_norm[key] = float(np.mean([normalized_entropy(g.a) for g in group]))
    return EntropyReport(per_layer, per_layer_norm)
