"""Integration-quality metrics and aggregate scoring.

Biological conservation: k-means NMI and ARI against cell-type labels,
cell-type silhouette (ASW), isolated-label F1, and cell-type LISI.
Batch-effect removal: batch silhouette within labels, integration LISI,
kBET-style neighborhood composition tests per label, per-label graph
connectivity, and principal-component regression against batch indicators.

All scores are reported in [0, 1] with higher meaning better. The overall
aggregate weighs biological conservation at 0.6 and batch correction at 0.4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import CellMetadata, EmbeddingMatrix, ValidationError

BIO_METRICS = ("kmeans_nmi", "kmeans_ari", "label_asw", "isolated_f1", "clisi_score")
BATCH_METRICS = ("batch_asw", "ilisi_score", "kbet_per_label",
                 "graph_connectivity", "pcr_score")

# Scenario-safe subset: metrics that stay well defined when the embedding is
# recomputed or extended between stages (no fixed-coordinate assumptions).
METRIC_SUBSETS = {
    "full": (BIO_METRICS, BATCH_METRICS),
    "scenario": (("kmeans_nmi", "kmeans_ari", "label_asw"),
                 ("batch_asw", "ilisi_score")),
}

BIO_WEIGHT = 0.6
BATCH_WEIGHT = 0.4

_KMEANS_STREAM = 303


def aggregate_scores(bio: float, batch: float) -> float:
    """Weighted overall score: 0.6 * bio + 0.4 * batch."""
    return BIO_WEIGHT * bio + BATCH_WEIGHT * batch


@dataclass(frozen=True)
class MetricsReport:
    """Per-metric scores plus the bio / batch / overall aggregates."""

    subset: str
    scores: dict[str, float]
    bio: float
    batch: float
    overall: float
    all_labels_isolated: bool = False

    @classmethod
    def from_scores(cls, subset: str, scores: dict[str, float],
                    all_labels_isolated: bool = False) -> "MetricsReport":
        if subset not in METRIC_SUBSETS:
            raise ValidationError(f"unknown metric subset {subset!r}")
        bio_names, batch_names = METRIC_SUBSETS[subset]
        missing = [m for m in bio_names + batch_names if m not in scores]
        if missing:
            raise ValidationError(f"missing scores for {missing}")
        ordered = {m: float(scores[m]) for m in bio_names + batch_names}
        bio = float(np.mean([ordered[m] for m in bio_names]))
        batch = float(np.mean([ordered[m] for m in batch_names]))
        return cls(subset=subset, scores=ordered, bio=bio, batch=batch,
                   overall=aggregate_scores(bio, batch),
                   all_labels_isolated=all_labels_isolated)


@dataclass(frozen=True)
class NeighborGraph:
    """Fixed-k nearest neighbors by Euclidean distance, self excluded."""

    k: int
    neighbors: np.ndarray  # (N, k) int row indices

    def __post_init__(self):
        nbrs = np.asarray(self.neighbors, dtype=np.intp)
        if nbrs.ndim != 2:
            raise ValidationError("neighbor lists must form a 2-D array")
        object.__setattr__(self, "neighbors", nbrs)

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    def undirected_adjacency(self) -> list[set[int]]:
        """Symmetrized edge set as per-node neighbor sets."""
        adj: list[set[int]] = [set() for _ in range(self.n)]
        for i in range(self.n):
            for j in self.neighbors[i]:
                adj[i].add(int(j))
                adj[int(j)].add(i)
        return adj


def _row_block_size(n: int) -> int:
    # cap each block's distance slice at ~64 MB so big inputs stay in memory
    return max(32, min(n, (1 << 23) // max(n, 1)))


def _sq_dist_block(block: np.ndarray, values: np.ndarray, sq: np.ndarray,
                   sq_block: np.ndarray) -> np.ndarray:
    d2 = sq_block[:, None] + sq[None, :] - 2.0 * block @ values.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def _pairwise_sq_dists(values: np.ndarray) -> np.ndarray:
    sq = np.sum(values * values, axis=1)
    d2 = _sq_dist_block(values, values, sq, sq)
    np.fill_diagonal(d2, 0.0)
    return d2


def build_neighbor_graph(values, k: int) -> NeighborGraph:
    """Brute-force kNN graph; ties broken by the lower row index.

    Distances are computed block by block, so memory stays bounded for
    large inputs.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k >= n:
        raise ValidationError(f"k = {k} must be smaller than the cell count {n}")
    sq = np.sum(values * values, axis=1)
    neighbors = np.empty((n, k), dtype=np.intp)
    step = _row_block_size(n)
    for start in range(0, n, step):
        stop = min(start + step, n)
        d2 = _sq_dist_block(values[start:stop], values, sq, sq[start:stop])
        for i in range(start, stop):
            d2[i - start, i] = np.inf
        # top-k via partition, then resolve boundary ties by lower index so the
        # result matches a full stable sort exactly
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        rows = np.arange(stop - start)
        kth = d2[rows[:, None], part].max(axis=1)
        within = d2 <= kth[:, None]
        for r in range(stop - start):
            cand = np.flatnonzero(within[r])
            order = cand[np.argsort(d2[r, cand], kind="stable")]
            neighbors[start + r] = order[:k]
    return NeighborGraph(k=k, neighbors=neighbors)


# ---------------------------------------------------------------------------
# clustering

def kmeans(values, k: int, seed: int, restarts: int = 10,
           max_iter: int = 300, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding.

    Runs ``restarts`` seeded initializations and keeps the lowest-inertia
    solution. Deterministic given ``seed``. Returns ``(labels, inertia)``.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > n:
        raise ValidationError(f"k = {k} exceeds the cell count {n}")
    best_labels = None
    best_inertia = np.inf
    for r in range(restarts):
        rng = np.random.default_rng([int(seed), _KMEANS_STREAM, r])
        centers = _kmeans_pp(values, k, rng)
        labels, inertia = _lloyd(values, centers, max_iter, tol)
        if inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels
    return best_labels, float(best_inertia)


def _kmeans_pp(values, k, rng):
    n = values.shape[0]
    centers = np.empty((k, values.shape[1]))
    first = int(rng.integers(n))
    centers[0] = values[first]
    d2 = np.sum((values - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining mass at distance zero (duplicate points)
            idx = int(rng.integers(n))
        centers[j] = values[idx]
        d2 = np.minimum(d2, np.sum((values - centers[j]) ** 2, axis=1))
    return centers


def _assign(values, centers):
    """Nearest-center labels and squared distances, in bounded-memory blocks."""
    n = len(values)
    per_row = max(centers.shape[0] * centers.shape[1], 1)
    step = max(32, min(n, (1 << 22) // per_row))
    labels = np.empty(n, dtype=np.intp)
    min_d2 = np.empty(n)
    for start in range(0, n, step):
        stop = min(start + step, n)
        d2 = np.sum((values[start:stop, None, :] - centers[None, :, :]) ** 2, axis=2)
        block_labels = np.argmin(d2, axis=1)
        labels[start:stop] = block_labels
        min_d2[start:stop] = d2[np.arange(stop - start), block_labels]
    return labels, min_d2


def _lloyd(values, centers, max_iter, tol):
    centers = centers.copy()
    k = centers.shape[0]
    for _ in range(max_iter):
        labels, min_d2 = _assign(values, centers)
        new_centers = centers.copy()
        for c in range(k):
            mask = labels == c
            if mask.any():
                new_centers[c] = values[mask].mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-fit point
                new_centers[c] = values[int(np.argmax(min_d2))]
        shift = float(np.max(np.sqrt(np.sum((new_centers - centers) ** 2, axis=1))))
        centers = new_centers
        if shift < tol:
            break
    labels, min_d2 = _assign(values, centers)
    return labels, float(np.sum(min_d2))


# ---------------------------------------------------------------------------
# partition agreement

def _contingency(a, b):
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        raise ValidationError("label sequences differ in length")
    if not a:
        raise ValidationError("empty label sequences")
    ua = {v: i for i, v in enumerate(dict.fromkeys(a))}
    ub = {v: i for i, v in enumerate(dict.fromkeys(b))}
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    for x, y in zip(a, b):
        table[ua[x], ub[y]] += 1
    return table


def nmi(a, b) -> float:
    """Normalized mutual information 2*I(a;b) / (H(a) + H(b)), natural log.

    Defined as 1 when both partitions are single clusters (both entropies 0).
    """
    table = _contingency(a, b)
    n = table.sum()
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    ha = -np.sum(pa[pa > 0] * np.log(pa[pa > 0]))
    hb = -np.sum(pb[pb > 0] * np.log(pb[pb > 0]))
    if ha + hb == 0.0:
        return 1.0
    pj = table / n
    mask = pj > 0
    mi = np.sum(pj[mask] * (np.log(pj[mask]) - np.log(np.outer(pa, pb)[mask])))
    return float(2.0 * mi / (ha + hb))


def ari(a, b) -> float:
    """Adjusted Rand index via pair counting; 1 for identical partitions.

    Computed in exact integer arithmetic and divided once at the end, so
    rational results like -1/2 come out exact.
    """
    table = _contingency(a, b)
    n = int(table.sum())

    def comb2(x):
        return int(x) * (int(x) - 1) // 2

    sum_ij = sum(comb2(v) for v in table.ravel())
    sum_a = sum(comb2(v) for v in table.sum(axis=1))
    sum_b = sum(comb2(v) for v in table.sum(axis=0))
    total = comb2(n)
    # ari = (sum_ij - sum_a*sum_b/total) / ((sum_a+sum_b)/2 - sum_a*sum_b/total)
    num = 2 * total * sum_ij - 2 * sum_a * sum_b
    den = total * (sum_a + sum_b) - 2 * sum_a * sum_b
    if den == 0:
        return 1.0
    return num / den


# ---------------------------------------------------------------------------
# silhouettes

def silhouette_samples(values, codes) -> np.ndarray:
    """Per-cell Euclidean silhouette; cells in singleton groups score 0."""
    values = np.asarray(values, dtype=np.float64)
    codes = np.asarray(codes)
    groups = list(dict.fromkeys(codes.tolist()))
    if len(groups) < 2:
        raise ValidationError("silhouette needs at least two groups")
    onehot = np.stack([(codes == g).astype(np.float64) for g in groups], axis=1)
    counts = onehot.sum(axis=0)
    n = len(codes)
    sq = np.sum(values * values, axis=1)
    sums = np.empty((n, len(groups)))  # total distance from each cell to each group
    step = _row_block_size(n)
    for start in range(0, n, step):
        stop = min(start + step, n)
        d2 = _sq_dist_block(values[start:stop], values, sq, sq[start:stop])
        for i in range(start, stop):
            d2[i - start, i] = 0.0
        sums[start:stop] = np.sqrt(d2) @ onehot
    own = np.argmax(onehot, axis=1)
    s = np.zeros(n)
    for i in range(n):
        g = own[i]
        if counts[g] <= 1:
            continue
        a = sums[i, g] / (counts[g] - 1)
        b = min(sums[i, h] / counts[h] for h in range(len(groups)) if h != g)
        m = max(a, b)
        s[i] = 0.0 if m == 0 else (b - a) / m
    return s


def silhouette_label_asw(values, labels) -> float:
    """Cell-type silhouette rescaled to [0, 1] via (mean + 1) / 2."""
    s = silhouette_samples(values, labels)
    return float((np.mean(s) + 1.0) / 2.0)


def silhouette_batch_asw(values, batches, labels) -> float:
    """Batch-mixing silhouette: within each label, mean of 1 - |s(i)| over the
    batch silhouette, then averaged across labels.

    Labels containing a single batch are skipped (their batch silhouette is
    undefined); at least one label must span two batches.
    """
    values = np.asarray(values, dtype=np.float64)
    batches = np.asarray(batches)
    labels = np.asarray(labels)
    if len(dict.fromkeys(batches.tolist())) < 2:
        raise ValidationError("batch silhouette needs at least two batches")
    per_label = []
    for lab in dict.fromkeys(labels.tolist()):
        mask = labels == lab
        sub_batches = batches[mask]
        if len(dict.fromkeys(sub_batches.tolist())) < 2:
            continue
        s = silhouette_samples(values[mask], sub_batches)
        per_label.append(float(np.mean(1.0 - np.abs(s))))
    if not per_label:
        raise ValidationError("no label spans more than one batch")
    return float(np.mean(per_label))


# ---------------------------------------------------------------------------
# neighborhood composition

def lisi(graph_or_values, codes, k: int | None = None) -> np.ndarray:
    """Per-cell inverse Simpson index of the k-neighborhood composition.

    Neighborhood proportions are uniform over the fixed k nearest neighbors,
    self excluded. Accepts a prebuilt ``NeighborGraph`` or raw coordinates
    (then ``k`` is required).
    """
    if isinstance(graph_or_values, NeighborGraph):
        graph = graph_or_values
    else:
        if k is None:
            raise ValidationError("k is required when passing raw coordinates")
        graph = build_neighbor_graph(graph_or_values, k)
    codes = np.asarray(codes)
    groups = list(dict.fromkeys(codes.tolist()))
    index = {g: i for i, g in enumerate(groups)}
    coded = np.array([index[c] for c in codes.tolist()])
    neigh_codes = coded[graph.neighbors]
    k_eff = graph.neighbors.shape[1]
    out = np.empty(graph.n)
    for i in range(graph.n):
        counts = np.bincount(neigh_codes[i], minlength=len(groups))
        p = counts / k_eff
        out[i] = 1.0 / np.sum(p * p)
    return out


def ilisi_score(mean_ilisi: float, n_batches: int) -> float:
    """Rescale mean batch LISI to [0, 1]: (x - 1) / (B - 1), clamped."""
    if n_batches < 2:
        return 1.0
    return float(np.clip((mean_ilisi - 1.0) / (n_batches - 1.0), 0.0, 1.0))


def clisi_score(mean_clisi: float, n_types: int) -> float:
    """Rescale mean cell-type LISI to [0, 1]: (C - x) / (C - 1), clamped."""
    if n_types < 2:
        return 1.0
    return float(np.clip((n_types - mean_clisi) / (n_types - 1.0), 0.0, 1.0))


def _lower_regularized_gamma(a: float, x: float) -> float:
    # series expansion, valid and fast for x < a + 1
    term = 1.0 / a
    total = term
    for i in range(1, 1000):
        term *= x / (a + i)
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_regularized_gamma_cf(a: float, x: float) -> float:
    # Lentz continued fraction, valid for x >= a + 1
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def chi2_sf(x: float, df: int) -> float:
    """Chi-square survival function via the regularized incomplete gamma."""
    if df < 1:
        raise ValidationError("degrees of freedom must be >= 1")
    if x <= 0:
        return 1.0
    a = 0.5 * df
    half = 0.5 * x
    if half < a + 1.0:
        return max(0.0, min(1.0, 1.0 - _lower_regularized_gamma(a, half)))
    return max(0.0, min(1.0, _upper_regularized_gamma_cf(a, half)))


def kbet_per_label(graph: NeighborGraph, batches, labels, alpha: float = 0.05) -> float:
    """Mean per-label acceptance rate of a chi-square goodness-of-fit test of
    each cell's k-neighborhood batch counts against the label's global batch
    composition.

    Batches absent from a label have expected count zero and are merged out
    of that label's test; neighbors from such batches do not enter the
    statistic. Labels containing a single batch score 1 by convention.
    """
    batches = np.asarray(batches)
    labels = np.asarray(labels)
    if len(dict.fromkeys(batches.tolist())) < 2:
        raise ValidationError("kbet needs at least two batches")
    batch_order = list(dict.fromkeys(batches.tolist()))
    bindex = {b: i for i, b in enumerate(batch_order)}
    bcoded = np.array([bindex[b] for b in batches.tolist()])
    neigh = bcoded[graph.neighbors]

    per_label = []
    for lab in dict.fromkeys(labels.tolist()):
        mask = labels == lab
        present = np.bincount(bcoded[mask], minlength=len(batch_order))
        cats = np.flatnonzero(present)
        if len(cats) < 2:
            per_label.append(1.0)
            continue
        pi = present[cats] / present[cats].sum()
        df = len(cats) - 1
        accepted = 0
        cells = np.flatnonzero(mask)
        for i in cells:
            counts = np.bincount(neigh[i], minlength=len(batch_order))[cats]
            tot = counts.sum()
            if tot == 0:
                accepted += 1
                continue
            expected = pi * tot
            stat = float(np.sum((counts - expected) ** 2 / expected))
            if chi2_sf(stat, df) >= alpha:
                accepted += 1
        per_label.append(accepted / len(cells))
    return float(np.mean(per_label))


# ---------------------------------------------------------------------------
# graph connectivity

def graph_connectivity(graph: NeighborGraph, labels) -> float:
    """Average over labels of the largest-connected-component fraction of the
    label-induced subgraph on the symmetrized kNN edges."""
    labels = np.asarray(labels)
    adj = graph.undirected_adjacency()
    scores = []
    for lab in dict.fromkeys(labels.tolist()):
        nodes = np.flatnonzero(labels == lab)
        node_set = set(int(i) for i in nodes)
        unvisited = set(node_set)
        largest = 0
        while unvisited:
            start = unvisited.pop()
            size = 1
            stack = [start]
            while stack:
                u = stack.pop()
                for v in adj[u]:
                    if v in unvisited:
                        unvisited.remove(v)
                        stack.append(v)
                        size += 1
            largest = max(largest, size)
        scores.append(largest / len(node_set))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# principal component regression

def pcr_score(values, batches, max_components: int = 50) -> float:
    """1 minus the mean R^2 of regressing each principal component's scores on
    one-hot batch indicators (least squares via pseudo-inverse).

    Components with zero variance contribute R^2 = 0. Higher is better
    (less batch-associated variance).
    """
    values = np.asarray(values, dtype=np.float64)
    batches = np.asarray(batches)
    batch_order = list(dict.fromkeys(batches.tolist()))
    n, d = values.shape
    if len(batch_order) < 2:
        raise ValidationError("pcr needs at least two batches")
    if n <= len(batch_order):
        raise ValidationError("pcr needs more cells than batches")
    centered = values - values.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    m = min(d, max_components)
    comps = centered @ eigvecs[:, order[:m]]

    design = np.stack(
        [(batches == b).astype(np.float64) for b in batch_order], axis=1
    )
    coef, *_ = np.linalg.lstsq(design, comps, rcond=None)
    fitted = design @ coef
    r2 = np.zeros(m)
    for j in range(m):
        t = comps[:, j]
        ss_tot = float(np.sum((t - t.mean()) ** 2))
        if ss_tot == 0.0:
            continue
        ss_res = float(np.sum((t - fitted[:, j]) ** 2))
        r2[j] = 1.0 - ss_res / ss_tot
    return float(1.0 - np.mean(r2))


# ---------------------------------------------------------------------------
# isolated labels

def isolated_label_f1(batches, labels, clusters):
    """Max-F1 recovery of isolated labels by the given clustering.

    Isolated labels are those present in the minimum number of batches. For
    each, the score is the best F1 over clusters of predicting the label by
    cluster membership; the result is the mean over isolated labels. Returns
    ``(score, all_labels_isolated)`` where the flag marks the degenerate case
    of every label being isolated under the minimum rule.
    """
    batches = np.asarray(batches)
    labels = np.asarray(labels)
    clusters = np.asarray(clusters)
    label_order = list(dict.fromkeys(labels.tolist()))
    n_batches_of = {
        lab: len(dict.fromkeys(batches[labels == lab].tolist()))
        for lab in label_order
    }
    min_presence = min(n_batches_of.values())
    isolated = [lab for lab in label_order if n_batches_of[lab] == min_presence]
    all_isolated = len(isolated) == len(label_order)

    scores = []
    cluster_ids = list(dict.fromkeys(clusters.tolist()))
    for lab in isolated:
        truth = labels == lab
        best = 0.0
        for c in cluster_ids:
            pred = clusters == c
            tp = float(np.sum(pred & truth))
            if tp == 0:
                continue
            precision = tp / float(np.sum(pred))
            recall = tp / float(np.sum(truth))
            best = max(best, 2 * precision * recall / (precision + recall))
        scores.append(best)
    return float(np.mean(scores)), all_isolated


# ---------------------------------------------------------------------------
# one-shot evaluation

def evaluate(emb: EmbeddingMatrix, meta: CellMetadata, subset: str = "full",
             knn_k: int = 15, seed: int = 0,
             kmeans_restarts: int = 10) -> MetricsReport:
    """Build the kNN graph once, compute the active metric subset, aggregate.

    Cell-type labels are required. When the evaluated cells span a single
    batch, the batch-mixing metrics take their degenerate value 1.0 (there is
    nothing to mix), which keeps single-batch scenario stages well defined.
    """
    if subset not in METRIC_SUBSETS:
        raise ValidationError(f"unknown metric subset {subset!r}")
    values = emb.values
    batches = np.asarray(meta.batches_for(emb))
    labels = np.asarray(meta.labels_for(emb))
    if emb.n < 2:
        raise ValidationError("evaluation needs at least two cells")
    bio_names, batch_names = METRIC_SUBSETS[subset]
    wanted = set(bio_names + batch_names)
    n_batches = len(dict.fromkeys(batches.tolist()))
    label_order = list(dict.fromkeys(labels.tolist()))
    n_types = len(label_order)

    graph = None
    if wanted & {"clisi_score", "ilisi_score", "kbet_per_label", "graph_connectivity"}:
        graph = build_neighbor_graph(values, min(knn_k, emb.n - 1))

    clusters = None
    if wanted & {"kmeans_nmi", "kmeans_ari", "isolated_f1"}:
        clusters, _ = kmeans(values, n_types, seed=seed, restarts=kmeans_restarts)

    scores: dict[str, float] = {}
    all_isolated = False

    def single_batch_default(metric):
        scores[metric] = 1.0

    for metric in bio_names + batch_names:
        try:
            if metric == "kmeans_nmi":
                scores[metric] = nmi(clusters.tolist(), labels.tolist())
            elif metric == "kmeans_ari":
                scores[metric] = float(np.clip(ari(clusters.tolist(), labels.tolist()), 0.0, 1.0))
            elif metric == "label_asw":
                if n_types < 2:
                    raise ValidationError("label silhouette needs at least two labels")
                scores[metric] = silhouette_label_asw(values, labels)
            elif metric == "isolated_f1":
                score, all_isolated = isolated_label_f1(batches, labels, clusters)
                scores[metric] = score
            elif metric == "clisi_score":
                scores[metric] = clisi_score(float(np.mean(lisi(graph, labels))), n_types)
            elif metric == "batch_asw":
                if n_batches < 2:
                    single_batch_default(metric)
                else:
                    scores[metric] = silhouette_batch_asw(values, batches, labels)
            elif metric == "ilisi_score":
                if n_batches < 2:
                    single_batch_default(metric)
                else:
                    scores[metric] = ilisi_score(float(np.mean(lisi(graph, batches))), n_batches)
            elif metric == "kbet_per_label":
                if n_batches < 2:
                    single_batch_default(metric)
                else:
                    scores[metric] = kbet_per_label(graph, batches, labels)
            elif metric == "graph_connectivity":
                scores[metric] = graph_connectivity(graph, labels)
            elif metric == "pcr_score":
                if n_batches < 2:
                    single_batch_default(metric)
                else:
                    scores[metric] = pcr_score(values, batches)
        except ValidationError as exc:
            raise ValidationError(f"{metric}: {exc}") from exc
    return MetricsReport.from_scores(subset, scores, all_labels_isolated=all_isolated)
