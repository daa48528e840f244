"""Tests for the batch-split gradient descent estimator."""
import numpy as np
import pytest

from matchlearn import (
    ArgumentError,
    DegenerateInitError,
    EstimatorConfig,
    FactorState,
    Matching,
    Observation,
    ObservationBatch,
    OneToOne,
    RankDeficientDesignError,
    RemainderDroppedWarning,
    SingularCoreError,
    aggregate_response,
    batch_loss,
    batch_loss_gradient,
    estimate_rank,
    fit,
    generate_low_rank,
    gradient_step,
    observe,
    partition_batches,
    solve_G,
    spectral_init,
)


def projector_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a @ a.T - b @ b.T, 2))


def make_problem(d1, d2, r, T, sigma, seed, scale=1.0):
    truth = generate_low_rank(d1, d2, r, scale, np.random.default_rng([seed, 1]))
    batch = observe(truth, OneToOne(), T, sigma, np.random.default_rng([seed, 2]))
    return truth, batch


def tiling_records(truth):
    """d2 shifted one-to-one matchings covering every entry exactly once."""
    d1, d2 = truth.shape
    rows = np.arange(d1)
    recs = []
    for shift in range(d2):
        cols = (rows + shift) % d2
        recs.append(Observation(Matching(d1, d2, rows, cols), truth.values[rows, cols]))
    return recs


# ---------------------------------------------------------------------------
# partition_batches
# ---------------------------------------------------------------------------

def test_partition_exact_division():
    assert partition_batches(8, 2) == [(0, 2), (2, 4), (4, 6), (6, 8)]


def test_partition_remainder_dropped_with_warning():
    with pytest.warns(RemainderDroppedWarning):
        ranges = partition_batches(9, 2)
    assert ranges == [(0, 2), (2, 4), (4, 6), (6, 8)]


def test_partition_survey_scale():
    ranges = partition_batches(1000, 20)
    assert len(ranges) == 40
    assert all(b - a == 25 for a, b in ranges)
    assert ranges[0] == (0, 25) and ranges[-1] == (975, 1000)


def test_partition_too_few_observations():
    with pytest.raises(ArgumentError):
        partition_batches(3, 2)


# ---------------------------------------------------------------------------
# spectral_init
# ---------------------------------------------------------------------------

def test_spectral_init_exact_on_tiling():
    truth = generate_low_rank(4, 8, 2, 1.0, np.random.default_rng(5))
    recs = tiling_records(truth)
    # Each entry is revealed exactly once across d2 matchings, so with
    # nu = 1/d2 the scaled aggregate reproduces the matrix itself.
    agg = aggregate_response(recs, 1.0 / 8)
    np.testing.assert_allclose(agg, truth.values, atol=1e-12)
    u1, v1 = spectral_init(recs, 1.0 / 8, 2)
    assert projector_distance(u1, truth.left_factors) <= 1e-10
    assert projector_distance(v1, truth.right_factors) <= 1e-10


def test_spectral_init_proximity_one_to_one():
    truth, batch = make_problem(5, 10, 1, 2000, 0.0, seed=7)
    u1, _ = spectral_init(batch.records, 1.0 / 10, 1)
    assert projector_distance(u1, truth.left_factors) <= 0.2


def test_spectral_init_zero_aggregate_errors():
    rows = np.arange(3)
    recs = [Observation(Matching(3, 6, rows, rows + k), np.zeros(3)) for k in range(2)]
    with pytest.raises(DegenerateInitError):
        spectral_init(recs, 1.0 / 6, 1)


def test_spectral_init_argument_validation():
    truth, batch = make_problem(3, 6, 1, 4, 0.0, seed=9)
    with pytest.raises(ArgumentError):
        spectral_init([], 1.0 / 6, 1)
    with pytest.raises(ArgumentError):
        spectral_init(batch.records, 0.0, 1)
    with pytest.raises(ArgumentError):
        spectral_init(batch.records, 1.5, 1)


# ---------------------------------------------------------------------------
# solve_G
# ---------------------------------------------------------------------------

def test_solve_g_recovers_diagonal_core_noiseless():
    truth, batch = make_problem(6, 12, 2, 200, 0.0, seed=11)
    g = solve_G(truth.left_factors, truth.right_factors, batch.records, 2)
    np.testing.assert_allclose(g, np.diag(truth.singular_values), atol=1e-8)


def test_solve_g_rank_one_scalar_formula():
    truth, batch = make_problem(4, 8, 1, 30, 0.5, seed=13)
    g = solve_G(truth.left_factors, truth.right_factors, batch.records, 1)
    num = 0.0
    den = 0.0
    for rec in batch.records:
        for i, j, y in zip(rec.matching.rows, rec.matching.cols, rec.y):
            phi = truth.left_factors[i, 0] * truth.right_factors[j, 0]
            num += y * phi
            den += phi * phi
    assert abs(g[0, 0] - num / den) <= 1e-12 * abs(num / den)


def test_solve_g_matches_dense_normal_equation_oracle():
    rng = np.random.default_rng(17)
    truth, batch = make_problem(4, 6, 2, 40, 1.0, seed=17)
    u = np.linalg.qr(rng.standard_normal((4, 2)))[0]
    v = np.linalg.qr(rng.standard_normal((6, 2)))[0]
    g = solve_G(u, v, batch.records, 2)

    # Oracle: assemble the r^2 x r^2 normal equations entry by entry.
    a = np.zeros((4, 4))
    b = np.zeros(4)
    for rec in batch.records:
        for i, j, y in zip(rec.matching.rows, rec.matching.cols, rec.y):
            phi = np.array(
                [u[i, p] * v[j, q] for p in range(2) for q in range(2)]
            )
            a += np.outer(phi, phi)
            b += y * phi
    g_oracle = np.linalg.solve(a, b).reshape(2, 2)
    np.testing.assert_allclose(g, g_oracle, atol=1e-9)


def test_solve_g_residual_orthogonality():
    truth, batch = make_problem(5, 10, 2, 60, 1.0, seed=19)
    u, v = truth.left_factors, truth.right_factors
    g = solve_G(u, v, batch.records, 2)
    # Gradient of the objective in G at the solution must vanish.
    grad = np.zeros((2, 2))
    scale = 0.0
    for rec in batch.records:
        for i, j, y in zip(rec.matching.rows, rec.matching.cols, rec.y):
            resid = u[i] @ g @ v[j] - y
            grad += 2.0 * resid * np.outer(u[i], v[j])
            scale += y * y
    assert np.linalg.norm(grad) <= 1e-8 * max(scale, 1.0)


def test_solve_g_rank_deficient_design_errors():
    m = Matching(3, 6, [0, 1], [0, 1])
    recs = [Observation(m, [1.0, 2.0])] * 4
    u = np.linalg.qr(np.random.default_rng(23).standard_normal((3, 2)))[0]
    v = np.linalg.qr(np.random.default_rng(24).standard_normal((6, 2)))[0]
    with pytest.raises(RankDeficientDesignError) as exc_info:
        solve_G(u, v, recs, 2)
    assert exc_info.value.condition is None or exc_info.value.condition > 1e6


def test_solve_g_argument_validation():
    truth, batch = make_problem(4, 8, 2, 10, 0.0, seed=27)
    with pytest.raises(ArgumentError):
        solve_G(truth.left_factors[:, :1], truth.right_factors, batch.records, 2)
    with pytest.raises(ArgumentError):
        solve_G(truth.left_factors, truth.right_factors, [], 2)


# ---------------------------------------------------------------------------
# gradient_step
# ---------------------------------------------------------------------------

def test_gradient_step_fixed_point_at_truth():
    truth, batch = make_problem(6, 12, 2, 400, 0.0, seed=29)
    recs = batch.records
    state = FactorState.create(
        truth.left_factors, np.diag(truth.singular_values), truth.right_factors
    )
    new, grad_norm = gradient_step(state, recs[:200], recs[200:], 0.75, 1.0 / 12, 200)
    assert grad_norm == 0.0
    assert projector_distance(new.U, truth.left_factors) <= 1e-10
    assert projector_distance(new.V, truth.right_factors) <= 1e-10
    err = np.max(np.abs(new.estimate - truth.values))
    assert err <= 1e-8 * truth.singular_values[0]


def test_gradient_matches_central_differences():
    truth, batch = make_problem(3, 4, 1, 12, 0.8, seed=31)
    recs = batch.records
    m0 = np.random.default_rng(32).uniform(-1.0, 1.0, (3, 4))
    grad = batch_loss_gradient(m0, recs)
    h = 1e-6
    fd = np.zeros_like(grad)
    for i in range(3):
        for j in range(4):
            up = m0.copy()
            dn = m0.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd[i, j] = (batch_loss(up, recs) - batch_loss(dn, recs)) / (2 * h)
    assert np.max(np.abs(grad - fd)) <= 1e-4 * np.max(np.abs(grad))


def test_gradient_step_decreases_projector_distance():
    d1, d2, r = 10, 20, 2
    truth = generate_low_rank(d1, d2, r, 1.0, np.random.default_rng([33, 1]))
    n0 = 3000
    batch = observe(truth, OneToOne(), 3 * n0, 0.0, np.random.default_rng([33, 2]))
    recs = batch.records
    pert = np.random.default_rng([33, 3])
    u0 = np.linalg.qr(truth.left_factors + 0.25 * pert.standard_normal((d1, r)))[0]
    v0 = np.linalg.qr(truth.right_factors + 0.25 * pert.standard_normal((d2, r)))[0]
    state = FactorState.create(u0, solve_G(u0, v0, recs[:n0], r), v0)
    before = projector_distance(u0, truth.left_factors) + projector_distance(
        v0, truth.right_factors
    )
    new, _ = gradient_step(state, recs[n0 : 2 * n0], recs[2 * n0 :], 0.5, 1.0 / d2, n0)
    after = projector_distance(new.U, truth.left_factors) + projector_distance(
        new.V, truth.right_factors
    )
    assert after < before
    assert after <= 0.7 * before


def test_gradient_step_singular_core_errors():
    truth, batch = make_problem(4, 8, 2, 40, 0.0, seed=37)
    state = FactorState.create(
        truth.left_factors, np.diag([1.0, 0.0]), truth.right_factors
    )
    with pytest.raises(SingularCoreError):
        gradient_step(state, batch.records[:20], batch.records[20:], 0.5, 1.0 / 8, 20)


def test_gradient_step_rejects_bad_n0():
    truth, batch = make_problem(4, 8, 2, 40, 0.0, seed=39)
    state = FactorState.create(
        truth.left_factors, np.diag(truth.singular_values), truth.right_factors
    )
    with pytest.raises(ArgumentError):
        gradient_step(state, batch.records[:20], batch.records[20:], 0.5, 1.0 / 8, 0)


def test_factor_state_validates_inputs():
    rng = np.random.default_rng(41)
    u = np.linalg.qr(rng.standard_normal((5, 2)))[0]
    v = np.linalg.qr(rng.standard_normal((8, 2)))[0]
    with pytest.raises(ArgumentError):
        FactorState.create(u * 1.5, np.eye(2), v)
    good = FactorState.create(u, np.eye(2), v)
    with pytest.raises(ArgumentError):
        FactorState(U=u, G=np.eye(2) * 2.0, V=v, g_svd=good.g_svd)


def test_batch_loss_hand_computed():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    rec = Observation(Matching(2, 2, [0, 1], [0, 1]), [0.0, 0.0])
    assert batch_loss(m, [rec]) == pytest.approx(17.0)
    grad = batch_loss_gradient(m, [rec])
    np.testing.assert_allclose(grad, [[2.0, 0.0], [0.0, 8.0]])


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_fit_noiseless_trace_contracts():
    truth, batch = make_problem(20, 40, 2, 4000, 0.0, seed=43)
    cfg = EstimatorConfig(r=2, eta=0.75, m=5, nu=1.0 / 40)
    m_hat, trace = fit(batch, cfg, truth=truth)
    assert len(trace) == 5
    # Noiseless: every gradient pair strictly shrinks the error.
    assert np.all(np.diff(trace.rel_max_err_sq) < 0.0)
    rel = np.max(np.abs(m_hat - truth.values)) / truth.singular_values[-1]
    # Four calibrated steps retain about (1-eta)^4 of the spectral
    # initializer's error, which lands near 2e-4 here.
    assert rel <= 1e-3


def test_fit_noiseless_reaches_tight_accuracy_with_more_steps():
    truth, batch = make_problem(20, 40, 2, 4000, 0.0, seed=43)
    cfg = EstimatorConfig(r=2, eta=0.75, m=20, nu=1.0 / 40)
    m_hat, _ = fit(batch, cfg, truth=truth)
    rel = np.max(np.abs(m_hat - truth.values)) / truth.singular_values[-1]
    assert rel <= 1e-6


def test_fit_trace_shape_at_survey_scale():
    reps = 20
    for eta in (0.5, 0.7):
        traces = []
        for rep in range(reps):
            truth = generate_low_rank(50, 150, 2, 20.0, np.random.default_rng([11, rep, 1]))
            batch = observe(
                truth, OneToOne(), 600, 1.0, np.random.default_rng([11, rep, 2])
            )
            cfg = EstimatorConfig(r=2, eta=eta, m=10, nu=1.0 / 150)
            _, trace = fit(batch, cfg, truth=truth)
            traces.append(trace.rel_max_err_sq)
        med = np.median(np.array(traces), axis=0)
        # Most of the descent happens in the first few batches ...
        assert med[2] <= 0.5 * med[0]
        assert med[4] <= 0.1 * med[0]
        # ... after which the curve flattens out rather than climbing.
        for p in range(4, 9):
            assert med[p + 1] <= 1.25 * med[p]
        assert med[9] <= med[4]


def test_fit_noise_proportionality():
    ratios = []
    for rep in range(50):
        truth = generate_low_rank(20, 60, 2, 5.0, np.random.default_rng([7, rep, 1]))
        finals = []
        for sigma in (1.0, 2.0):
            batch = observe(
                truth, OneToOne(), 2400, sigma, np.random.default_rng([7, rep, 2])
            )
            cfg = EstimatorConfig(r=2, eta=0.7, m=6, nu=1.0 / 60)
            m_hat, _ = fit(batch, cfg)
            finals.append(np.max(np.abs(m_hat - truth.values)))
        ratios.append(finals[1] / finals[0])
    assert 1.5 <= float(np.median(ratios)) <= 2.5


def test_fit_rejects_mismatched_nu():
    truth, batch = make_problem(4, 8, 1, 16, 0.0, seed=47)
    cfg = EstimatorConfig(r=1, eta=0.75, m=2, nu=0.5)
    with pytest.raises(ArgumentError):
        fit(batch, cfg)


def test_fit_single_pair_returns_spectral_refit():
    truth, batch = make_problem(5, 10, 2, 400, 0.2, seed=49)
    cfg = EstimatorConfig(r=2, eta=0.75, m=1, nu=1.0 / 10)
    m_hat, trace = fit(batch, cfg, truth=truth)
    assert len(trace) == 1
    assert np.isnan(trace.grad_norm[0])
    u, v = spectral_init(batch.records[:200], 1.0 / 10, 2)
    g = solve_G(u, v, batch.records[200:], 2)
    np.testing.assert_array_equal(m_hat, (u @ g) @ v.T)


def test_fit_trace_policies():
    truth, batch = make_problem(5, 10, 2, 200, 0.1, seed=53)
    cfg = EstimatorConfig(r=2, eta=0.75, m=2, nu=1.0 / 10)
    _, trace = fit(batch, cfg)
    assert np.all(np.isnan(trace.rel_max_err_sq))
    assert np.all(np.isfinite(trace.g_sigma_min))
    _, no_trace = fit(batch, EstimatorConfig(r=2, eta=0.75, m=2, nu=1.0 / 10, record_trace=False))
    assert no_trace is None


def test_fit_reports_failing_batch_index():
    rows = np.arange(3)
    zero_recs = [
        Observation(Matching(3, 6, rows, (rows + k) % 6), np.zeros(3)) for k in range(8)
    ]
    batch = ObservationBatch(OneToOne(), 3, 6, 0.0, tuple(zero_recs))
    cfg = EstimatorConfig(r=1, eta=0.75, m=2, nu=1.0 / 6)
    with pytest.raises(DegenerateInitError, match="batch pair 1"):
        fit(batch, cfg)


def test_fit_reports_failure_in_later_batch():
    truth = generate_low_rank(3, 6, 2, 1.0, np.random.default_rng(57))
    good = observe(truth, OneToOne(), 90, 0.0, np.random.default_rng(58)).records
    stuck = Matching(3, 6, [0, 1], [0, 1])
    bad = Observation(stuck, truth.values[[0, 1], [0, 1]])
    records = tuple(good) + (bad,) * 30
    batch = ObservationBatch(OneToOne(), 3, 6, 0.0, records)
    cfg = EstimatorConfig(r=2, eta=0.75, m=2, nu=1.0 / 6)
    with pytest.raises(RankDeficientDesignError, match="batch pair 2"):
        fit(batch, cfg)


def test_fit_estimate_is_rotation_invariant():
    d1, d2, r = 8, 16, 2
    truth = generate_low_rank(d1, d2, r, 1.0, np.random.default_rng([59, 1]))
    n0 = 300
    batch = observe(truth, OneToOne(), 6 * n0, 0.3, np.random.default_rng([59, 2]))
    recs = batch.records
    slices = [recs[p * n0 : (p + 1) * n0] for p in range(6)]

    rng = np.random.default_rng([59, 3])
    o1 = np.linalg.qr(rng.standard_normal((r, r)))[0]
    o2 = np.linalg.qr(rng.standard_normal((r, r)))[0]

    u, v = spectral_init(slices[0], 1.0 / d2, r)
    states = []
    for uu, vv in ((u, v), (u @ o1, v @ o2)):
        states.append(FactorState.create(uu, solve_G(uu, vv, slices[1], r), vv))
    scale = np.max(np.abs(states[0].estimate))
    assert np.max(np.abs(states[0].estimate - states[1].estimate)) <= 1e-8 * scale

    for p in (1, 2):
        states = [
            gradient_step(s, slices[2 * p], slices[2 * p + 1], 0.7, 1.0 / d2, n0)[0]
            for s in states
        ]
        diff = np.max(np.abs(states[0].estimate - states[1].estimate))
        assert diff <= 1e-8 * scale


def test_fit_debug_checks_match_default_run():
    truth, batch = make_problem(6, 12, 2, 240, 0.5, seed=61)
    base = EstimatorConfig(r=2, eta=0.7, m=3, nu=1.0 / 12)
    checked = EstimatorConfig(r=2, eta=0.7, m=3, nu=1.0 / 12, debug_checks=True)
    m_a, _ = fit(batch, base, truth=truth)
    m_b, _ = fit(batch, checked, truth=truth)
    np.testing.assert_array_equal(m_a, m_b)


def test_trace_csv_round_trip(tmp_path):
    truth, batch = make_problem(5, 10, 1, 120, 0.3, seed=63)
    cfg = EstimatorConfig(r=1, eta=0.75, m=3, nu=1.0 / 10)
    _, trace = fit(batch, cfg, truth=truth)
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "batch,rel_max_err_sq,g_sigma_min,g_sigma_max,grad_norm"
    assert len(lines) == 4
    first = lines[1].split(",")
    assert int(first[0]) == 1
    assert float(first[1]) == pytest.approx(trace.rel_max_err_sq[0])
    assert first[4] == "nan"


# ---------------------------------------------------------------------------
# estimate_rank
# ---------------------------------------------------------------------------

def test_estimate_rank_clear_gap():
    sel = estimate_rank([10.0, 9.0, 1e-6, 1e-7], max_rank=3)
    assert (sel.rank, sel.elbow_found) == (2, True)


def test_estimate_rank_flat_spectrum_policy():
    sel = estimate_rank([5.0, 4.5, 4.1, 3.8], max_rank=3)
    assert (sel.rank, sel.elbow_found) == (3, False)


def test_estimate_rank_zero_tail():
    sel = estimate_rank([4.0, 2.0, 0.0, 0.0], max_rank=3)
    assert (sel.rank, sel.elbow_found) == (2, True)


def test_estimate_rank_noisy_rank_three_aggregate():
    truth = generate_low_rank(10, 20, 3, 1.0, np.random.default_rng([21, 0]))
    sigma = truth.singular_values[0] / 50.0
    batch = observe(truth, OneToOne(), 4000, sigma, np.random.default_rng([22, 0]))
    agg = aggregate_response(batch.records, 1.0 / 20)
    spectrum = np.linalg.svd(agg, compute_uv=False)
    sel = estimate_rank(spectrum, max_rank=6)
    assert (sel.rank, sel.elbow_found) == (3, True)


def test_estimate_rank_input_validation():
    with pytest.raises(ArgumentError):
        estimate_rank([1.0, 2.0], max_rank=1)
    with pytest.raises(ArgumentError):
        estimate_rank([], max_rank=1)
    with pytest.raises(ArgumentError):
        estimate_rank([3.0, 1.0], max_rank=0)
    sel = estimate_rank([5.0], max_rank=2)
    assert (sel.rank, sel.elbow_found) == (1, False)


def test_estimator_config_validation():
    good = dict(r=1, eta=0.5, m=1, nu=0.1)
    EstimatorConfig(**good)
    for bad in (
        dict(good, eta=0.0),
        dict(good, eta=1.0),
        dict(good, m=0),
        dict(good, r=0),
        dict(good, nu=0.0),
        dict(good, nu=1.5),
        dict(good, min_g_singular=0.0),
    ):
        with pytest.raises(ArgumentError):
            EstimatorConfig(**bad)
