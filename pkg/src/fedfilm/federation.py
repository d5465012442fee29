"""Round orchestration: broadcast, local updates, weighted averaging, and the
cumulative / continual dataset-evolution drivers.

Every round broadcasts an immutable snapshot of the global adapter, runs all
participating clients against it (optionally in parallel; the result does not
depend on execution order) and folds the updated rows back together with
sample-count-weighted averaging.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import os

import numpy as np

from .core import (
    CellMetadata,
    DimensionError,
    EmbeddingMatrix,
    FedfilmError,
    FilmAdapter,
    ValidationError,
    apply_adapter,
    batch_row_indices,
    identity_adapter,
)
from .objective import ClientState, TrainConfig, client_local_update, make_client_state

AGGREGATION_MODES = ("full-table", "row-restricted")


class TrainingAbort(FedfilmError):
    """Training produced a non-finite loss or parameter."""


@dataclass(frozen=True)
class RoundRecord:
    """One training-log line: a client's losses for one completed round."""

    round_index: int
    batch_name: str
    train_loss: float
    holdout_loss: float


def aggregate(client_params, mode: str, base: FilmAdapter) -> FilmAdapter:
    """Fold client parameter tables into the next global adapter.

    ``client_params`` is a list of ``(batch_name, gamma_table, beta_table, n_b)``
    with full B x d tables per client (a client edits only its own row; the
    other rows sit at their round-start values).

    full-table mode takes the n_b-weighted mean of every entry across all
    clients' tables. row-restricted mode takes each batch's row directly from
    its owning client. Frozen rows of ``base`` pass through unchanged in both
    modes. Every aggregated entry is clamped to the [min, max] envelope of the
    client submissions, which makes identical submissions a bit-exact fixed
    point and keeps weighted means inside the convex hull under rounding.
    """
    if mode not in AGGREGATION_MODES:
        raise ValidationError(f"unknown aggregation mode {mode!r}")
    if not client_params:
        raise ValidationError("aggregate needs at least one client")
    owners = []
    gammas = []
    betas = []
    weights = []
    for name, gtab, btab, n_b in client_params:
        gtab = np.asarray(gtab, dtype=np.float64)
        btab = np.asarray(btab, dtype=np.float64)
        if gtab.shape != (base.n_batches, base.d) or btab.shape != gtab.shape:
            raise DimensionError(
                f"client {name!r} submitted tables of shape {gtab.shape}, "
                f"expected {(base.n_batches, base.d)}"
            )
        if n_b < 1:
            raise ValidationError(f"client {name!r} has weight {n_b} < 1")
        owners.append(base.row_index(name))
        gammas.append(gtab)
        betas.append(btab)
        weights.append(float(n_b))
    total = float(sum(weights))
    if total <= 0:
        raise ValidationError("zero total aggregation weight")

    g_stack = np.stack(gammas)
    b_stack = np.stack(betas)
    if mode == "full-table":
        w = np.array(weights)[:, None, None]
        new_gamma = np.sum(w * g_stack, axis=0) / total
        new_beta = np.sum(w * b_stack, axis=0) / total
        new_gamma = np.clip(new_gamma, g_stack.min(axis=0), g_stack.max(axis=0))
        new_beta = np.clip(new_beta, b_stack.min(axis=0), b_stack.max(axis=0))
    else:
        new_gamma = base.gamma.copy()
        new_beta = base.beta.copy()
        for ci, row in enumerate(owners):
            new_gamma[row] = g_stack[ci, row]
            new_beta[row] = b_stack[ci, row]

    frozen_rows = [i for i, f in enumerate(base.frozen) if f]
    if frozen_rows:
        new_gamma = np.asarray(new_gamma).copy()
        new_beta = np.asarray(new_beta).copy()
        new_gamma[frozen_rows] = base.gamma[frozen_rows]
        new_beta[frozen_rows] = base.beta[frozen_rows]
    return FilmAdapter(base.batch_names, new_gamma, new_beta, base.frozen)


def _run_clients(clients, blocks, snapshot, cfg, round_index, threads):
    def work(item):
        state, cells = item
        return client_local_update(state, cells, snapshot, cfg, round_index)

    items = [(state, blocks[state.batch_name]) for state in clients]
    if threads == 1 or len(items) <= 1:
        return [work(it) for it in items]
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, items))


def run_federated_fit(emb: EmbeddingMatrix, meta: CellMetadata, cfg: TrainConfig,
                      init: FilmAdapter, mode: str = "full-table",
                      threads: int = 1):
    """Run the full round loop and return ``(final adapter, training log)``.

    Clients are the non-frozen batches present in ``meta``; all of them
    participate every round. Aggregation weights count all cells of a batch,
    not only its training split. Deterministic given inputs and ``cfg.seed``,
    regardless of ``threads``.
    """
    if init.d != emb.d:
        raise DimensionError(
            f"adapter dimension {init.d} does not match embedding dimension {emb.d}"
        )
    for b in meta.batch_names:
        init.row_index(b)  # raises MissingBatchError when a row is absent
    blocks = batch_row_indices(emb, meta)
    sizes = meta.batch_sizes()
    for b, rows in blocks.items():
        if len(rows) == 0:
            raise ValidationError(f"batch {b!r} has no cells")

    participating = [
        b for b in meta.batch_names if not init.frozen[init.row_index(b)]
    ]
    if not participating:
        raise ValidationError("no unfrozen batch to train on")

    cell_blocks = {b: emb.values[blocks[b]] for b in participating}
    clients: list[ClientState] = [
        make_client_state(b, init.row_index(b), sizes[b], emb.d, cfg)
        for b in participating
    ]

    adapter = init
    log: list[RoundRecord] = []
    for t in range(cfg.rounds):
        snapshot = adapter
        results = _run_clients(clients, cell_blocks, snapshot, cfg, t, threads)
        contributions = []
        for state, (gamma_row, beta_row, train_loss, holdout_loss) in zip(clients, results):
            if not (np.isfinite(train_loss) and np.isfinite(gamma_row).all()
                    and np.isfinite(beta_row).all()):
                raise TrainingAbort(
                    f"non-finite loss or parameters at round {t}, "
                    f"client {state.batch_name!r}"
                )
            gtab = snapshot.gamma.copy()
            btab = snapshot.beta.copy()
            row = snapshot.row_index(state.batch_name)
            gtab[row] = gamma_row
            btab[row] = beta_row
            contributions.append((state.batch_name, gtab, btab, sizes[state.batch_name]))
            log.append(RoundRecord(t, state.batch_name, train_loss, holdout_loss))
        adapter = aggregate(contributions, mode, snapshot)
    return adapter, log


@dataclass(frozen=True)
class ScenarioPlan:
    """Arrival-order protocol for dataset evolution.

    ``stages`` lists disjoint groups of batch names in arrival order.
    ``pca_components`` is the baseline re-embedding dimensionality used by
    cumulative mode when the data source is a raw feature matrix.
    """

    mode: str
    stages: tuple[tuple[str, ...], ...]
    pca_components: int | None = None

    def __post_init__(self):
        if self.mode not in ("cumulative", "continual"):
            raise ValidationError(f"unknown scenario mode {self.mode!r}")
        stages = tuple(tuple(str(b) for b in group) for group in self.stages)
        if not stages or any(not group for group in stages):
            raise ValidationError("stages must be non-empty groups")
        flat = [b for group in stages for b in group]
        if len(set(flat)) != len(flat):
            raise ValidationError("stage groups must be disjoint")
        object.__setattr__(self, "stages", stages)


@dataclass
class StageResult:
    stage_index: int
    batch_names: tuple[str, ...]
    corrected: EmbeddingMatrix
    adapter: FilmAdapter
    report: object
    baseline_report: object
    log: list[RoundRecord]


def _stage_cells(meta: CellMetadata, batches) -> list[str]:
    wanted = set(batches)
    return [c for c, b in meta.batch_of.items() if b in wanted]


def run_scenario(plan: ScenarioPlan, data: EmbeddingMatrix, meta: CellMetadata,
                 cfg: TrainConfig, mode: str = "full-table", threads: int = 1,
                 knn_k: int = 15, kmeans_restarts: int = 10,
                 metrics_seed: int = 0) -> list[StageResult]:
    """Drive a cumulative or continual dataset-evolution protocol.

    cumulative: at every stage re-embed all data seen so far (PCA of ``data``
    treated as raw features when ``plan.pca_components`` is set, otherwise
    ``data`` is used as a fixed precomputed embedding), train a fresh adapter
    from identity over all batches seen, and evaluate corrected vs baseline.

    continual: stage one trains normally and freezes its batches; later stages
    add identity rows for the newly arrived batches, train only those clients
    with row-restricted aggregation, and reuse previously corrected
    coordinates bit-exactly.

    Stage metrics use the scenario-safe metric subset.
    """
    from .metrics import evaluate  # local import to keep module load light

    known = set(meta.batch_names)
    for group in plan.stages:
        for b in group:
            if b not in known:
                raise ValidationError(f"stage references unknown batch {b!r}")

    results: list[StageResult] = []

    if plan.mode == "cumulative":
        from .synth import pca

        seen: list[str] = []
        for si, group in enumerate(plan.stages):
            seen.extend(group)
            cells = _stage_cells(meta, seen)
            sub_meta = meta.restricted_to(cells)
            if plan.pca_components is not None:
                base_emb = pca(data.subset(cells), plan.pca_components)
            else:
                base_emb = data.subset(cells)
            init = identity_adapter(sub_meta.batch_names, base_emb.d)
            adapter, log = run_federated_fit(base_emb, sub_meta, cfg, init,
                                             mode=mode, threads=threads)
            corrected = apply_adapter(base_emb, sub_meta, adapter)
            report = evaluate(corrected, sub_meta, subset="scenario", knn_k=knn_k,
                              seed=metrics_seed, kmeans_restarts=kmeans_restarts)
            baseline = evaluate(base_emb, sub_meta, subset="scenario", knn_k=knn_k,
                                seed=metrics_seed, kmeans_restarts=kmeans_restarts)
            results.append(StageResult(si, tuple(seen), corrected, adapter,
                                       report, baseline, log))
        return results

    # continual: data is the fixed precomputed embedding for all cells
    adapter: FilmAdapter | None = None
    corrected_coords: dict[str, np.ndarray] = {}
    seen = []
    for si, group in enumerate(plan.stages):
        new_cells = _stage_cells(meta, group)
        if not new_cells:
            raise ValidationError(f"continual stage {si} has zero new cells")
        new_emb = data.subset(new_cells)
        new_meta = meta.restricted_to(new_cells)
        if adapter is None:
            adapter = identity_adapter(new_meta.batch_names, new_emb.d)
            adapter, log = run_federated_fit(new_emb, new_meta, cfg, adapter,
                                             mode=mode, threads=threads)
        else:
            adapter = adapter.with_new_batches(new_meta.batch_names)
            # Only the new clients train; row-restricted aggregation keeps the
            # frozen reference rows untouched by construction.
            adapter, log = run_federated_fit(new_emb, new_meta, cfg, adapter,
                                             mode="row-restricted", threads=threads)
        corrected_new = apply_adapter(new_emb, new_meta, adapter)
        for cid, row in zip(corrected_new.cell_ids, corrected_new.values):
            corrected_coords[cid] = row
        adapter = adapter.freeze(new_meta.batch_names)

        seen.extend(group)
        seen_cells = _stage_cells(meta, seen)
        combined = EmbeddingMatrix(
            tuple(seen_cells),
            np.array([corrected_coords[c] for c in seen_cells]),
        )
        sub_meta = meta.restricted_to(seen_cells)
        baseline_emb = data.subset(seen_cells)
        report = evaluate(combined, sub_meta, subset="scenario", knn_k=knn_k,
                          seed=metrics_seed, kmeans_restarts=kmeans_restarts)
        baseline = evaluate(baseline_emb, sub_meta, subset="scenario", knn_k=knn_k,
                            seed=metrics_seed, kmeans_restarts=kmeans_restarts)
        results.append(StageResult(si, tuple(seen), combined, adapter,
                                   report, baseline, log))
    return results
