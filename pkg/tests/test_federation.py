import numpy as np
import pytest

from fedfilm import (
    CellMetadata,
    EmbeddingMatrix,
    ScenarioPlan,
    SynthSpec,
    TrainConfig,
    aggregate,
    generate,
    identity_adapter,
    run_federated_fit,
    run_scenario,
)
from fedfilm.core import ValidationError, batch_row_indices, FilmAdapter
from fedfilm.federation import TrainingAbort

from reference import closed_form_minimizer


def scalar_adapter(names, values, frozen=()):
    values = np.asarray(values, dtype=np.float64)[:, None]
    return FilmAdapter(tuple(names), values, np.zeros_like(values), frozen)


def tables(base, owner, value):
    g = base.gamma.copy()
    g[owner] = value
    return g, base.beta.copy()


def test_aggregate_weighted_mean_examples():
    base = scalar_adapter(["a", "b"], [0.0, 0.0])
    # two clients, equal weight, scalar values 2 and 4 -> 3
    params = [("a", *tables(base, 0, 2.0), 5), ("b", *tables(base, 1, 4.0), 5)]
    out = aggregate(params, "full-table", base)
    # row a: client a says 2, client b says 0 (round start), weights 5/5
    assert out.gamma[0, 0] == pytest.approx((5 * 2.0 + 5 * 0.0) / 10)
    # weights (1, 3), values (2, 4) -> 3.5 on a single shared coordinate
    single = scalar_adapter(["a"], [0.0])
    params = [("a", np.array([[2.0]]), np.zeros((1, 1)), 1),
              ("a", np.array([[4.0]]), np.zeros((1, 1)), 3)]
    out = aggregate(params, "full-table", single)
    assert out.gamma[0, 0] == pytest.approx(3.5)


def test_aggregate_identical_submissions_bit_exact():
    rng = np.random.default_rng(0)
    base = FilmAdapter(("a", "b"), rng.uniform(0.1, 2.0, (2, 3)), rng.standard_normal((2, 3)))
    params = [("a", base.gamma, base.beta, 1), ("b", base.gamma, base.beta, 7)]
    out = aggregate(params, "full-table", base)
    assert np.array_equal(out.gamma, base.gamma)
    assert np.array_equal(out.beta, base.beta)


def test_aggregate_full_table_hand_example():
    # B = 2, round-start gamma row_a = 1 everywhere; client a (n=1) updates its
    # row to 2, client b (n=3) leaves it at 1 -> aggregated row_a = 1.25
    base = identity_adapter(["a", "b"], 2)
    ga = base.gamma.copy()
    ga[0] = 2.0
    params = [("a", ga, base.beta, 1), ("b", base.gamma, base.beta, 3)]
    out = aggregate(params, "full-table", base)
    assert np.allclose(out.gamma[0], 1.25)
    assert np.allclose(out.gamma[1], 1.0)


def test_aggregate_row_restricted_takes_owner_rows():
    base = identity_adapter(["a", "b"], 1)
    ga = base.gamma.copy(); ga[0] = 5.0
    gb = base.gamma.copy(); gb[1] = -3.0
    params = [("a", ga, base.beta, 1), ("b", gb, base.beta, 100)]
    out = aggregate(params, "row-restricted", base)
    assert out.gamma[:, 0].tolist() == [5.0, -3.0]


def test_aggregate_convex_hull_property():
    rng = np.random.default_rng(7)
    for trial in range(200):
        n_clients = int(rng.integers(1, 5))
        b, d = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        base = FilmAdapter(
            tuple(f"b{i}" for i in range(b)),
            rng.standard_normal((b, d)),
            rng.standard_normal((b, d)),
        )
        params = []
        for ci in range(n_clients):
            params.append((f"b{ci % b}", rng.standard_normal((b, d)),
                           rng.standard_normal((b, d)), int(rng.integers(1, 50))))
        out = aggregate(params, "full-table", base)
        g_stack = np.stack([p[1] for p in params])
        b_stack = np.stack([p[2] for p in params])
        assert np.all(out.gamma >= g_stack.min(axis=0)) and np.all(out.gamma <= g_stack.max(axis=0))
        assert np.all(out.beta >= b_stack.min(axis=0)) and np.all(out.beta <= b_stack.max(axis=0))


def test_aggregate_errors():
    base = identity_adapter(["a"], 1)
    with pytest.raises(ValidationError):
        aggregate([], "full-table", base)
    with pytest.raises(ValidationError):
        aggregate([("a", np.ones((1, 1)), np.zeros((1, 1)), 0)], "full-table", base)
    from fedfilm.core import DimensionError
    with pytest.raises(DimensionError):
        aggregate([("a", np.ones((2, 1)), np.zeros((2, 1)), 1)], "full-table", base)


def test_aggregate_frozen_rows_pass_through():
    rng = np.random.default_rng(1)
    base = FilmAdapter(("a", "b"), rng.uniform(0.5, 1.5, (2, 2)),
                       rng.standard_normal((2, 2)), (True, False))
    gb = rng.uniform(0.5, 1.5, (2, 2))
    bb = rng.standard_normal((2, 2))
    for mode in ("full-table", "row-restricted"):
        out = aggregate([("b", gb, bb, 3)], mode, base)
        assert np.array_equal(out.gamma[0], base.gamma[0])
        assert np.array_equal(out.beta[0], base.beta[0])


def synthetic_instance(**kw):
    spec = dict(n_batches=3, n_types=3, dim=4, cells_per_batch=50,
                effect_scale_range=(0.8, 1.2), effect_shift_sigma=1.0, seed=21)
    spec.update(kw)
    emb, meta, truth = generate(SynthSpec(**spec))
    return emb, meta, truth


def test_fit_learning_rate_zero_returns_init():
    emb, meta, _ = synthetic_instance()
    cfg = TrainConfig(learning_rate=0.0, rounds=3, seed=1)
    init = identity_adapter(meta.batch_names, emb.d)
    adapter, log = run_federated_fit(emb, meta, cfg, init)
    assert np.array_equal(adapter.gamma, init.gamma)
    assert np.array_equal(adapter.beta, init.beta)
    assert len(log) == 3 * meta.n_batches


def test_fit_single_batch_modes_agree():
    emb, meta, _ = synthetic_instance(n_batches=1)
    cfg = TrainConfig(seed=2, rounds=2)
    init = identity_adapter(meta.batch_names, emb.d)
    a1, _ = run_federated_fit(emb, meta, cfg, init, mode="full-table")
    a2, _ = run_federated_fit(emb, meta, cfg, init, mode="row-restricted")
    assert np.array_equal(a1.gamma, a2.gamma)
    assert np.array_equal(a1.beta, a2.beta)


def test_fit_thread_count_does_not_change_bits():
    emb, meta, _ = synthetic_instance()
    cfg = TrainConfig(seed=3, rounds=2)
    init = identity_adapter(meta.batch_names, emb.d)
    a1, log1 = run_federated_fit(emb, meta, cfg, init, threads=1)
    a2, log2 = run_federated_fit(emb, meta, cfg, init, threads=3)
    a3, log3 = run_federated_fit(emb, meta, cfg, init, threads=0)
    assert np.array_equal(a1.gamma, a2.gamma) and np.array_equal(a1.beta, a2.beta)
    assert np.array_equal(a1.gamma, a3.gamma) and np.array_equal(a1.beta, a3.beta)
    assert log1 == log2 == log3


def test_fit_batch_relabeling_equivariance():
    emb, meta, _ = synthetic_instance()
    cfg = TrainConfig(seed=4, rounds=2)
    a1, _ = run_federated_fit(emb, meta, cfg, identity_adapter(meta.batch_names, emb.d))
    rename = {b: f"study_{b}" for b in meta.batch_names}
    meta2 = CellMetadata.from_columns(
        list(emb.cell_ids),
        [rename[meta.batch_of[c]] for c in emb.cell_ids],
        [meta.label_of[c] for c in emb.cell_ids],
    )
    a2, _ = run_federated_fit(emb, meta2, cfg, identity_adapter(meta2.batch_names, emb.d))
    assert a2.batch_names == tuple(rename[b] for b in meta.batch_names)
    assert np.array_equal(a1.gamma, a2.gamma)
    assert np.array_equal(a1.beta, a2.beta)


def test_fit_frozen_rows_never_move():
    emb, meta, _ = synthetic_instance()
    init = identity_adapter(meta.batch_names, emb.d).freeze([meta.batch_names[0]])
    cfg = TrainConfig(seed=5, rounds=4)
    adapter, log = run_federated_fit(emb, meta, cfg, init)
    assert np.array_equal(adapter.gamma[0], init.gamma[0])
    assert np.array_equal(adapter.beta[0], init.beta[0])
    trained = {rec.batch_name for rec in log}
    assert meta.batch_names[0] not in trained


def test_fit_approaches_closed_form_fixed_point():
    # At the loop's fixed point the proximal term vanishes and each row solves
    # its own mu=0 quadratic; with a generous budget the iterate gets close.
    emb, meta, _ = synthetic_instance(n_batches=2, n_types=3, dim=3, cells_per_batch=40, seed=5)
    lam = 1e-3
    cfg = TrainConfig(seed=1, rounds=150, local_epochs=30, learning_rate=1e-2,
                      minibatch_size=10_000, train_fraction=1.0, mu=1e-3, lam=lam)
    adapter, log = run_federated_fit(emb, meta, cfg, identity_adapter(meta.batch_names, emb.d))
    blocks = batch_row_indices(emb, meta)
    for bi, b in enumerate(meta.batch_names):
        z = emb.values[blocks[b]]
        for j in range(emb.d):
            gs, bs = closed_form_minimizer(z[:, j], adapter.gamma[bi, j],
                                           adapter.beta[bi, j], 0.0, lam)
            assert abs(adapter.gamma[bi, j] - gs) < 1e-3
            assert abs(adapter.beta[bi, j] - bs) < 1e-3
    # net improvement over the run (per-round decrease is not strict: the
    # identity start sits near-stationary and Adam wobbles at the 1e-6 scale)
    first = np.mean([r.train_loss for r in log if r.round_index == 0])
    last = np.mean([r.train_loss for r in log if r.round_index == cfg.rounds - 1])
    assert last < first


def test_fit_single_client_least_squares_limit():
    # mu = 0, lam = 0, B = 1: the local problem's minimizer solves the 2x2
    # least-squares system; from a non-identity start the pipeline reaches it.
    rng = np.random.default_rng(17)
    ids = tuple(f"c{i}" for i in range(30))
    emb = EmbeddingMatrix(ids, rng.standard_normal((30, 2)) * 1.5 + 0.4)
    meta = CellMetadata.from_columns(list(ids), ["b"] * 30)
    init = FilmAdapter(("b",), np.full((1, 2), 0.7), np.full((1, 2), 0.4))
    cfg = TrainConfig(mu=0.0, lam=0.0, learning_rate=1e-2, rounds=1,
                      local_epochs=600, minibatch_size=1000, train_fraction=1.0, seed=6)
    adapter, _ = run_federated_fit(emb, meta, cfg, init)
    for j in range(2):
        z = emb.values[:, j]
        gs, bs = closed_form_minimizer(z, 0.7, 0.4, 0.0, 0.0)
        assert abs(adapter.gamma[0, j] - gs) < 1e-3
        assert abs(adapter.beta[0, j] - bs) < 1e-3


def test_fit_aborts_on_nonfinite():
    emb, meta, _ = synthetic_instance()
    cfg = TrainConfig(learning_rate=1e200, rounds=1, seed=1)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingAbort, match="round 0"):
            run_federated_fit(emb, meta, cfg, identity_adapter(meta.batch_names, emb.d))


def test_fit_requires_adapter_rows_for_all_batches():
    emb, meta, _ = synthetic_instance()
    from fedfilm.core import MissingBatchError
    partial = identity_adapter(meta.batch_names[:-1], emb.d)
    with pytest.raises(MissingBatchError):
        run_federated_fit(emb, meta, TrainConfig(), partial)


def test_scenario_plan_validation():
    with pytest.raises(ValidationError):
        ScenarioPlan(mode="bogus", stages=(("a",),))
    with pytest.raises(ValidationError):
        ScenarioPlan(mode="continual", stages=(("a",), ("a",)))
    with pytest.raises(ValidationError):
        ScenarioPlan(mode="continual", stages=(("a",), ()))


def test_scenario_continual_freeze_contract():
    emb, meta, _ = synthetic_instance(n_batches=3, cells_per_batch=40)
    plan = ScenarioPlan(mode="continual",
                        stages=((meta.batch_names[0], meta.batch_names[1]),
                                (meta.batch_names[2],)))
    cfg = TrainConfig(seed=7, rounds=2)
    results = run_scenario(plan, emb, meta, cfg, knn_k=10)
    stage1, stage2 = results
    ids1 = set(stage1.corrected.cell_ids)
    rows2 = stage2.corrected.rows_for([c for c in stage2.corrected.cell_ids if c in ids1])
    rows1 = stage1.corrected.rows_for([c for c in stage2.corrected.cell_ids if c in ids1])
    assert np.array_equal(stage2.corrected.values[rows2], stage1.corrected.values[rows1])
    # stage-1 batches are frozen afterwards
    for b in plan.stages[0]:
        i = stage2.adapter.row_index(b)
        assert stage2.adapter.frozen[i]
        j = stage1.adapter.row_index(b)
        assert np.array_equal(stage2.adapter.gamma[i], stage1.adapter.gamma[j])


def test_scenario_cumulative_single_stage_matches_fit():
    emb, meta, _ = synthetic_instance(n_batches=2, cells_per_batch=40)
    plan = ScenarioPlan(mode="cumulative", stages=(tuple(meta.batch_names),))
    cfg = TrainConfig(seed=8, rounds=2)
    results = run_scenario(plan, emb, meta, cfg, knn_k=10)
    direct, _ = run_federated_fit(emb, meta, cfg, identity_adapter(meta.batch_names, emb.d))
    assert np.array_equal(results[0].adapter.gamma, direct.gamma)
    assert np.array_equal(results[0].adapter.beta, direct.beta)
    assert results[0].report.subset == "scenario"


def test_scenario_unknown_batch_rejected():
    emb, meta, _ = synthetic_instance(n_batches=2, cells_per_batch=30)
    plan = ScenarioPlan(mode="continual", stages=(("nope",),))
    with pytest.raises(ValidationError, match="unknown batch"):
        run_scenario(plan, emb, meta, TrainConfig(rounds=1))


def test_scenario_five_stage_both_orders_complete():
    emb, meta, _ = synthetic_instance(n_batches=5, n_types=3, dim=4, cells_per_batch=30, seed=31)
    order = tuple((b,) for b in meta.batch_names)
    cfg = TrainConfig(seed=9, rounds=2)
    for stages in (order, tuple(reversed(order))):
        plan = ScenarioPlan(mode="continual", stages=stages)
        results = run_scenario(plan, emb, meta, cfg, knn_k=8)
        assert len(results) == 5
        assert all(r.report.subset == "scenario" for r in results)
        assert all(np.isfinite(r.report.overall) for r in results)


def test_scenario_five_stage_pinned_reference_values():
    # Pinned aggregates from the reference run of the protocol-arrival plan.
    # The refined aggregate dips a few 1e-5 below the baseline at stages with
    # more than one batch: the adapters here are tiny shrinkage maps (see the
    # acceptance notes), so these are regression values, not quality claims.
    spec = SynthSpec(n_batches=5, n_types=4, dim=10, cells_per_batch=120,
                     effect_scale_range=(0.8, 1.3), effect_shift_sigma=1.0,
                     noise_sigma=0.5, centroid_scale=3.0, seed=4242)
    emb, meta, _ = generate(spec)
    plan = ScenarioPlan(mode="continual", stages=tuple((b,) for b in meta.batch_names))
    results = run_scenario(plan, emb, meta, TrainConfig(seed=3, rounds=7), knn_k=15)
    refined = [r.report.overall for r in results]
    baseline = [r.baseline_report.overall for r in results]
    assert refined == pytest.approx([0.985438387701, 0.663482976069, 0.668332693794,
                                     0.668099549091, 0.676798739672], abs=1e-6)
    assert baseline == pytest.approx([0.985436164422, 0.663499986798, 0.668361497937,
                                      0.668123904958, 0.676830229285], abs=1e-6)
    assert refined[0] > baseline[0]
    assert all(r < b for r, b in zip(refined[1:], baseline[1:]))
