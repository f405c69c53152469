import numpy as np
import pytest

from qmpc import mpc, qcore, scenarios
from qmpc.dynamics import BilinearModel, build_liouvillian, discretize_first_order, linearize
from qmpc.mpc import (
    GuessTrajectory,
    LinearModel,
    MPCConfig,
    ReferenceTrajectory,
    build_condensed_qp,
    build_qp,
    run_closed_loop,
    shift_warm_start,
    solve_linear_mpc_step,
    sqp_solve,
)
from qmpc.qcore import QuantumState, sigma_x, sigma_z


def affine_double_integrator(dt=0.1):
    """State (position, velocity, 1); the control enters through the constant."""
    A = np.array([[1, dt, 0], [0, 1, 0], [0, 0, 1.0]])
    N = np.zeros((1, 3, 3))
    N[0, 1, 2] = dt
    return BilinearModel(A, N, dt)


def qubit_setup(horizon=50, delta=0.0, q_coherence=1.0, **kw):
    p = scenarios.resolve_params("qubit_detuning", dict(horizon=horizon, q_coherence=q_coherence, **kw))
    model = discretize_first_order(scenarios.qubit_liouvillian(delta), p["dt"])
    Q = scenarios.population_weight(2, 1.0, coherence=q_coherence)
    cfg = scenarios._mpc_config(p, Q, 1)
    ref = ReferenceTrajectory.setpoint(QuantumState.basis(2, 1).x, horizon, 1)
    return model, cfg, ref


def batch_lsq(A, B, x0, r, q, qf, R, T):
    """Unconstrained finite-horizon LQ via dense least squares."""
    n, m = B.shape
    rows, rhs = [], []
    pows = [np.linalg.matrix_power(A, k) for k in range(T + 1)]
    for t in range(1, T + 1):
        St = np.zeros((n, T * m))
        for k in range(t):
            St[:, k * m:(k + 1) * m] = pows[t - 1 - k] @ B
        w = np.sqrt(qf if t == T else q)
        rows.append(w * St)
        rhs.append(w * (r - pows[t] @ x0))
    rows.append(np.sqrt(R) * np.eye(T * m))
    rhs.append(np.zeros(T * m))
    return np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]


class TestConfig:
    def test_bound_order_rejected(self):
        with pytest.raises(ValueError):
            MPCConfig(horizon=2, dt=0.1, Q=np.eye(1), R=np.eye(1), u_min=1.0, u_max=-1.0)
        with pytest.raises(ValueError):
            MPCConfig(horizon=2, dt=0.1, Q=np.eye(1), R=np.eye(1), x_min=1.0, x_max=0.0)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            MPCConfig(horizon=2, dt=0.1, Q=np.array([[1.0, 2.0], [0.0, 1.0]]), R=np.eye(1))
        with pytest.raises(ValueError):
            MPCConfig(horizon=2, dt=0.1, Q=np.eye(1), R=-np.eye(1))
        with pytest.raises(ValueError):
            MPCConfig(horizon=0, dt=0.1, Q=np.eye(1), R=np.eye(1))


class TestBuildQP:
    def test_one_step_lqr_closed_form(self):
        a, b, x0, r, qf, R = 0.9, 0.5, 2.0, 1.0, 3.0, 0.7
        cfg = MPCConfig(horizon=1, dt=1.0, Q=[[1.0]], R=[[R]], Qf=[[qf]])
        ref = ReferenceTrajectory(np.array([[0.0], [r]]), np.zeros((1, 1)))
        X, U, info = solve_linear_mpc_step(np.array([x0]), LinearModel([[a]], [[b]]), ref, cfg)
        expected = qf * b * (r - a * x0) / (qf * b * b + R)
        assert U[0, 0] == pytest.approx(expected, abs=1e-6)
        assert X[1, 0] == pytest.approx(a * x0 + b * expected, abs=1e-6)

    def test_rows_without_slew_or_state_bounds(self):
        cfg = MPCConfig(horizon=4, dt=0.1, Q=np.eye(2), R=np.eye(1), u_min=-1, u_max=1)
        qp = build_qp(np.zeros(2), LinearModel(np.eye(2), np.ones((2, 1))), ReferenceTrajectory.setpoint(np.zeros(2), 4, 1), cfg)
        assert qp.G.shape == (4 * 2 + 4 * 1, 4 * 2 + 4 * 1)
        eq = qp.l == qp.u
        assert eq.sum() == 8
        assert np.all(qp.u[~eq] == 1.0)

    def test_qubit_dimensions(self):
        model, cfg, ref = qubit_setup(q_coherence=0.0)
        X = np.tile(QuantumState.basis(2, 0).x, (51, 1))
        qp = build_qp(X[0], linearize(model, X, np.zeros((50, 1))), ref, cfg, u_prev=np.zeros(1))
        assert qp.n == 50 * 8 + 50 * 1
        assert cfg.u_max == pytest.approx(2 * np.pi * 0.1)
        assert cfg.du_max == pytest.approx(2 * np.pi * 0.04)

    def test_condensed_matches_sparse(self, rng):
        model, cfg, ref = qubit_setup(horizon=8)
        X = model.rollout(QuantumState.basis(2, 0).x, 0.2 * np.ones((8, 1)))
        lin = linearize(model, X, 0.2 * np.ones((8, 1)))
        sparse = build_qp(X[0], lin, ref, cfg, u_prev=np.zeros(1))
        dense, S, s = build_condensed_qp(X[0], lin, ref, cfg, u_prev=np.zeros(1))
        from qmpc import qpsolver
        zs = qpsolver.solve(sparse, cfg.qp).z
        zd = qpsolver.solve(dense, cfg.qp).z
        np.testing.assert_allclose(zs[8 * 8:], zd, atol=1e-5)
        np.testing.assert_allclose(zs[:8 * 8], (np.einsum("tai,i->ta", S, zd) + s).ravel(), atol=1e-5)

    def test_condensed_rejects_state_bounds(self):
        cfg = MPCConfig(horizon=2, dt=0.1, Q=np.eye(2), R=np.eye(1), x_max=1.0)
        with pytest.raises(ValueError):
            build_condensed_qp(np.zeros(2), LinearModel(np.eye(2), np.ones((2, 1))),
                               ReferenceTrajectory.setpoint(np.zeros(2), 2, 1), cfg)


class TestLinearMPC:
    def test_at_setpoint(self):
        cfg = MPCConfig(horizon=5, dt=0.1, Q=np.eye(2), R=np.eye(2), u_min=-1, u_max=1)
        ref = ReferenceTrajectory.setpoint(np.array([0.3, -0.2]), 5, 2)
        X, U, _ = solve_linear_mpc_step(np.array([0.3, -0.2]), LinearModel(np.eye(2), np.eye(2)), ref, cfg)
        np.testing.assert_allclose(U, 0, atol=1e-6)

    def test_double_integrator_batch_least_squares(self):
        A, B = np.array([[1, 0.1], [0, 1.0]]), np.array([[0.005], [0.1]])
        T, x0, r = 10, np.array([1.0, 0.0]), np.zeros(2)
        cfg = MPCConfig(horizon=T, dt=0.1, Q=np.eye(2), R=0.01 * np.eye(1))
        _, U, _ = solve_linear_mpc_step(x0, LinearModel(A, B), ReferenceTrajectory.setpoint(r, T, 1), cfg)
        expected = batch_lsq(A, B, x0, r, 1.0, 1.0, 0.01, T)
        np.testing.assert_allclose(U.ravel(), expected, atol=1e-5)

    def test_tightening_never_lowers_cost(self):
        A, B = np.array([[1, 0.1], [0, 1.0]]), np.array([[0.005], [0.1]])
        ref = ReferenceTrajectory.setpoint(np.zeros(2), 10, 1)
        costs = []
        for u_max in (10.0, 2.0, 1.0, 0.5, 0.2):
            cfg = MPCConfig(horizon=10, dt=0.1, Q=np.eye(2), R=0.01 * np.eye(1), u_min=-u_max, u_max=u_max)
            X, U, _ = solve_linear_mpc_step(np.array([1.0, 0.0]), LinearModel(A, B), ref, cfg)
            assert np.all(np.abs(U) <= u_max + 1e-6)
            costs.append(mpc.trajectory_cost(X, U, ref, cfg))
        assert all(b >= a - 1e-6 for a, b in zip(costs, costs[1:]))

    def test_infeasible_holds_previous_control(self):
        # slew bound forbids reaching the amplitude box from u_prev
        cfg = MPCConfig(horizon=3, dt=0.1, Q=np.eye(1), R=np.eye(1), u_min=-1, u_max=1, du_max=0.1)
        ref = ReferenceTrajectory.setpoint(np.zeros(1), 3, 1)
        X, U, info = solve_linear_mpc_step(np.zeros(1), LinearModel([[1.0]], [[1.0]]), ref, cfg, u_prev=[5.0])
        assert "hold_previous_control" in info.flags
        np.testing.assert_array_equal(U, 5.0)


class TestSQP:
    def test_linear_model_one_full_step(self):
        model = affine_double_integrator()
        cfg = MPCConfig(horizon=5, dt=0.1, Q=np.diag([1, 0.1, 0]), R=0.1 * np.eye(1), u_min=-1, u_max=1)
        x0 = np.array([0, 0, 1.0])
        res = sqp_solve(x0, model, ReferenceTrajectory.setpoint([1, 0, 1], 5, 1), cfg, GuessTrajectory.initial(x0, 5, 1))
        assert res.converged and res.iterations == 1 and res.alphas == (1.0,)

    def test_zero_guess_is_stationary(self):
        model, cfg, ref = qubit_setup(horizon=10, q_coherence=0.0)
        x0 = QuantumState.basis(2, 0).x
        res = sqp_solve(x0, model, ref, cfg, GuessTrajectory.initial(x0, 10, 1, 0.0))
        np.testing.assert_allclose(res.U, 0, atol=1e-8)

    def test_matched_qubit_pulse_area(self):
        model, cfg, ref = qubit_setup()
        x0 = QuantumState.basis(2, 0).x
        res = sqp_solve(x0, model, ref, cfg, GuessTrajectory.initial(x0, 50, 1, 0.1))
        assert res.U.sum() * cfg.dt == pytest.approx(np.pi, rel=0.02)
        assert np.all(np.diff(res.merits) <= 1e-12)
        assert np.all(np.abs(res.U) <= cfg.u_max + 1e-6)
        assert np.all(np.abs(np.diff(res.U[:, 0])) <= cfg.du_max + 1e-6)

    def test_guess_shape_checked(self):
        model, cfg, ref = qubit_setup(horizon=5)
        with pytest.raises(ValueError):
            sqp_solve(np.zeros(8), model, ref, cfg, GuessTrajectory.initial(np.zeros(8), 4, 1))


class TestWarmStart:
    def test_shift(self):
        g = GuessTrajectory(np.arange(4.0).reshape(4, 1), np.array([[1.0], [2.0], [3.0]]))
        s = shift_warm_start(g)
        np.testing.assert_array_equal(s.U.ravel(), [2, 3, 3])
        np.testing.assert_array_equal(s.X.ravel(), [1, 2, 3, 3])
        assert s.X.shape == g.X.shape

    def test_constant_unchanged(self):
        g = GuessTrajectory(np.ones((4, 2)), np.full((3, 1), 0.5))
        s = shift_warm_start(g)
        np.testing.assert_array_equal(s.X, g.X)
        np.testing.assert_array_equal(s.U, g.U)


class TestClosedLoop:
    @pytest.mark.parametrize("period", [1, 4, 7])
    def test_matched_model_reaches_target(self, period):
        p = scenarios.resolve_params("qubit_detuning", dict(delta_plant=0.0, feedback_period=period))
        rec = scenarios.run_qubit_mpc(p)
        assert rec.infidelity_at(12.5) <= 1e-3

    def test_zero_steps(self):
        model, cfg, ref = qubit_setup(horizon=5)
        rec = run_closed_loop(scenarios.qubit_liouvillian(0.0), model, QuantumState.basis(2, 0), ref, cfg, 0)
        assert rec.states.shape == (1, 8) and rec.controls.shape == (0, 1)
        assert rec.final_infidelity == 1.0

    def test_constraints_respected_under_mismatch(self):
        p = scenarios.resolve_params("qubit_detuning")
        rec = scenarios.run_qubit_mpc(p)
        u_max, du_max = scenarios.control_bounds(p)
        assert scenarios.constraint_violations(rec.controls, u_max, du_max) == 0
        assert rec.feedback.sum() == int(np.ceil(len(rec.controls) / 7))

    def test_bilinear_plant_and_unknown_mode(self):
        model, cfg, ref = qubit_setup(horizon=5)
        rec = run_closed_loop(model, model, QuantumState.basis(2, 0), ref, cfg, 3)
        assert rec.states.shape == (4, 8)
        with pytest.raises(ValueError):
            run_closed_loop(model, model, QuantumState.basis(2, 0), ref, cfg, 3, sqp_mode="bogus")


class TestFeedbackAdapters:
    def test_product_state(self, rng):
        from conftest import random_density
        ra, rb = random_density(rng, 2), random_density(rng, 2)
        x = mpc.reduced_feedback_adapter(np.kron(ra, rb), (2, 2))
        np.testing.assert_allclose(x, np.concatenate([qcore.state_to_x(ra), qcore.state_to_x(rb)]), atol=1e-14)

    def test_bell_state(self):
        x = mpc.reduced_feedback_adapter(QuantumState.pure([1, 0, 0, 1]), (2, 2))
        half = qcore.state_to_x(np.eye(2) / 2)
        np.testing.assert_allclose(x, np.concatenate([half, half]))

    def test_ground_state(self):
        x = mpc.reduced_feedback_adapter(QuantumState.basis(4, 0), (2, 2))
        g = QuantumState.basis(2, 0).x
        np.testing.assert_array_equal(x, np.concatenate([g, g]))

    def test_partition_mismatch(self):
        with pytest.raises(ValueError):
            mpc.reduced_feedback_adapter(QuantumState.basis(4, 0), (2, 3))

    def test_subspace_block(self):
        rho = np.diag([0.6, 0.2, 0.2]).astype(complex)
        x = mpc.subspace_feedback_adapter(rho, 2)
        np.testing.assert_allclose(qcore.x_to_state(x), np.diag([0.75, 0.25]))
        raw = mpc.subspace_feedback_adapter(rho, 2, normalize=False)
        np.testing.assert_allclose(qcore.x_to_state(raw), np.diag([0.6, 0.2]))
        with pytest.raises(ValueError):
            mpc.subspace_feedback_adapter(rho, 4)
