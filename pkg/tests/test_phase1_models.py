"""
Phase 1 Tests: Dynamics Core & Models

Tests for:
- State decomposition split/merge
- Cart-pendulum vector field and pendulum pre-feedback
- Three-link biped mass matrix, impact map and relabeling
- Normal-form pre-feedbacks
- Model registry
"""
import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from app.errors import ConfigError, ContractViolationError, ModelDefinitionError, SingularityError
from app.models import build_model
from app.models.base import HybridModel, StateDecomposition, eval_field
from app.models.biped3 import RELABEL, Biped3, Biped3Params, biped3
from app.models.cart_pendulum import (
    CartPendulum,
    CartPendulumParams,
    barrier_penalty,
    barrier_penalty_gradient,
    cart_force,
    cart_pendulum,
    cart_pendulum_prefeedback,
    pendulum_acceleration,
    total_energy,
)
from app.models.normal_forms import (
    actuated_acceleration,
    conjugate_momentum_coords,
    momentum_rate,
    spong_prefeedback,
    velocities_from_momentum,
)
from app.services.simulation_service import integrate
from tests.utils import double_integrator, numerical_gradient


@st.composite
def decompositions(draw):
    n1 = draw(st.integers(min_value=1, max_value=4))
    n2 = draw(st.integers(min_value=1, max_value=4))
    perm = draw(st.permutations(list(range(n1 + n2))))
    return StateDecomposition(n1, n2, tuple(perm[:n1]), tuple(perm[n1:]))


class TestStateDecomposition:
    """Split/merge selector."""

    @pytest.mark.phase1
    @hsettings(max_examples=50, deadline=None)
    @given(dec=decompositions(), seed=st.integers(min_value=0, max_value=2 ** 16))
    def test_merge_inverts_split(self, dec, seed):
        x = np.random.default_rng(seed).normal(size=dec.n)
        x1, x2 = dec.split(x)
        assert x1.shape == (dec.n1,) and x2.shape == (dec.n2,)
        np.testing.assert_array_equal(dec.merge(x1, x2), x)

    @pytest.mark.phase1
    def test_batched_split(self):
        dec = StateDecomposition.leading(2, 4)
        X = np.arange(18.0).reshape(3, 6)
        x1, x2 = dec.split(X)
        np.testing.assert_array_equal(x1, X[:, :2])
        np.testing.assert_array_equal(dec.merge(x1, x2), X)

    @pytest.mark.phase1
    def test_index_lists_must_partition(self):
        with pytest.raises(ContractViolationError):
            StateDecomposition(1, 1, (0,), (0,))
        with pytest.raises(ContractViolationError):
            StateDecomposition(2, 1, (0,), (1,))

    @pytest.mark.phase1
    def test_wrong_width_rejected(self):
        dec = StateDecomposition.leading(2, 2)
        with pytest.raises(ContractViolationError):
            dec.split(np.zeros(3))
        with pytest.raises(ContractViolationError):
            dec.merge(np.zeros(2), np.zeros(3))


class TestControlSystem:

    @pytest.mark.phase1
    def test_eval_field_checks_shapes(self):
        sys = double_integrator()
        np.testing.assert_allclose(eval_field(sys, 0.0, [1.0, 2.0], [3.0]), [2.0, 3.0])
        with pytest.raises(ContractViolationError):
            eval_field(sys, 0.0, [1.0], [0.0])
        with pytest.raises(ContractViolationError):
            eval_field(sys, 0.0, [1.0, 2.0], [0.0, 0.0])

    @pytest.mark.phase1
    def test_jacobians_of_linear_system(self):
        sys = double_integrator()
        Fx, Fu = sys.jacobians(0.0, np.ones((3, 2)), np.zeros((3, 1)))
        np.testing.assert_allclose(Fx[1], [[0.0, 1.0], [0.0, 0.0]], atol=1e-8)
        np.testing.assert_allclose(Fu[2], [[0.0], [1.0]], atol=1e-8)

    @pytest.mark.phase1
    def test_vanishing_guard_gradient_detected(self):
        sys = double_integrator()
        model = HybridModel("flat", sys, guard=lambda x: 1.0, reset=lambda x: x,
                            decomposition=sys.decomposition)
        with pytest.raises(ModelDefinitionError):
            model.check_guard_gradient([np.zeros(2)])


class TestCartPendulum:
    """Cart-pendulum dynamics."""

    @pytest.mark.phase1
    def test_matches_unit_closed_form(self, rng):
        sys = cart_pendulum(CartPendulumParams(gravity=9.81))
        g = 9.81
        for _ in range(5):
            p, dp, th, dth = rng.uniform(-1.0, 1.0, size=4)
            u = rng.uniform(-3.0, 3.0)
            s, c = np.sin(th), np.cos(th)
            den = 3 * c ** 2 - 8
            expected = [
                dp,
                (2 * s * dth ** 2 - 3 * g * c * s - 4 * u) / den,
                dth,
                (3 * c * s * dth ** 2 - 12 * g * s - 6 * c * u) / den,
            ]
            np.testing.assert_allclose(eval_field(sys, 0.0, [p, dp, th, dth], [u]), expected, rtol=1e-12, atol=1e-12)

    @pytest.mark.phase1
    def test_field_agrees_with_lagrangian_form(self, pendulum_params, rng):
        sys = cart_pendulum(pendulum_params)
        mech = CartPendulum(pendulum_params)
        x = rng.uniform(-0.5, 0.5, size=4)
        u = np.array([0.7])
        np.testing.assert_allclose(eval_field(sys, 0.0, x, u), mech.state_derivative(x, u), atol=1e-12)

    @pytest.mark.phase1
    def test_energy_conserved_without_input(self, pendulum_params):
        sys = cart_pendulum(pendulum_params)
        traj = integrate(sys, None, [0.0, 0.0, 0.3, 0.0], 0.0, 2.0)
        E = total_energy(pendulum_params, traj.states)
        assert np.max(np.abs(E - E[0])) < 1e-7

    @pytest.mark.phase1
    def test_cart_force_inverts_prefeedback(self, pendulum_params, rng):
        for _ in range(5):
            x = np.array([0.0, 0.3, rng.uniform(-1.2, 1.2), rng.uniform(-2.0, 2.0)])
            ubar = rng.uniform(-5.0, 5.0)
            u = cart_force(pendulum_params, x, ubar)
            assert pendulum_acceleration(pendulum_params, x, u) == pytest.approx(ubar, abs=1e-9)

    @pytest.mark.phase1
    def test_prefeedback_system_matches_physical(self, pendulum_params):
        x = np.array([0.1, -0.2, 0.4, 0.5])
        ubar = 1.3
        u = cart_force(pendulum_params, x, ubar)
        physical = eval_field(cart_pendulum(pendulum_params), 0.0, x, [u])
        reduced = eval_field(cart_pendulum_prefeedback(pendulum_params), 0.0, x, [ubar])
        np.testing.assert_allclose(reduced, physical, atol=1e-9)

    @pytest.mark.phase1
    def test_spong_form_reproduces_cart_force(self, pendulum_params):
        mech = CartPendulum(pendulum_params)
        x = np.array([0.0, 0.1, 0.3, -0.4])
        q, dq = mech.configuration(x)
        u = spong_prefeedback(mech, q, dq, [0.8])
        assert u[0] == pytest.approx(cart_force(pendulum_params, x, 0.8), abs=1e-9)

    @pytest.mark.phase1
    def test_prefeedback_singular_at_horizontal(self, pendulum_params):
        x = np.array([0.0, 0.0, np.pi / 2, 0.0])
        with pytest.raises(SingularityError) as info:
            cart_force(pendulum_params, x, 1.0)
        assert info.value.configuration is not None
        mech = CartPendulum(pendulum_params)
        with pytest.raises(SingularityError):
            spong_prefeedback(mech, np.array([0.0, np.pi / 2]), np.zeros(2), [1.0])

    @pytest.mark.phase1
    def test_barrier_gradient(self):
        p = np.array([-1.5, -0.2, 0.0, 0.7, 1.9])
        numeric = np.array([numerical_gradient(lambda v: float(barrier_penalty(v[0], 2.0, 10.0)), np.array([pk]))[0]
                            for pk in p])
        np.testing.assert_allclose(barrier_penalty_gradient(p, 2.0, 10.0), numeric, rtol=1e-6, atol=1e-8)
        assert barrier_penalty(0.0, 2.0, 10.0) == 0.0

    @pytest.mark.phase1
    def test_params_reject_unknown_fields(self):
        with pytest.raises(ValueError):
            CartPendulumParams(mass=1.0)


def _pre_impact(theta=0.2, torso=0.1):
    """Configuration with the swing foot on the ground ahead of the stance foot."""
    return np.array([theta, torso, -2.0 * theta])


class TestBiped:
    """Three-link walker."""

    @pytest.mark.phase1
    def test_mass_matrix_symmetric_positive_definite(self, rng):
        mech = Biped3(Biped3Params())
        for _ in range(10):
            q = rng.uniform(-1.0, 1.0, size=3)
            D = mech.mass_matrix(q)
            np.testing.assert_allclose(D, D.T, atol=1e-12)
            mech.cholesky(q)

    @pytest.mark.phase1
    def test_swing_foot_on_ground_at_symmetric_stance(self):
        mech = Biped3(Biped3Params())
        q = _pre_impact()
        x = mech.state_from(q, np.zeros(3))
        assert mech.swing_foot_height(x) == pytest.approx(0.0, abs=1e-12)
        assert mech.step_length(x) == pytest.approx(2.0 * np.sin(0.2), abs=1e-12)
        assert mech.armed(x)

    @pytest.mark.phase1
    def test_impact_dissipates_energy_and_stops_swing_foot(self):
        mech = Biped3(Biped3Params())
        q = _pre_impact()
        dq = np.array([-1.0, 0.5, 2.0])
        dqe_plus, _ = mech.impact_velocities(q, dq)
        foot_velocity = mech.point_jacobian("swing_foot", q) @ dqe_plus[:3] + dqe_plus[3:]
        np.testing.assert_allclose(foot_velocity, 0.0, atol=1e-10)
        ke_minus = mech.kinetic_energy(q, dq)
        ke_plus = 0.5 * dqe_plus @ mech.extended_mass_matrix(q) @ dqe_plus
        assert ke_plus <= ke_minus + 1e-12

    @pytest.mark.phase1
    def test_impact_conserves_angular_momentum_about_contact(self):
        mech = Biped3(Biped3Params())
        q = _pre_impact()
        dq = np.array([-1.0, 0.5, 2.0])
        contact = mech.point("swing_foot", q)
        dqe_plus, _ = mech.impact_velocities(q, dq)
        H_minus = mech.angular_momentum(q, np.concatenate([dq, np.zeros(2)]), contact)
        H_plus = mech.angular_momentum(q, dqe_plus, contact)
        assert H_plus == pytest.approx(H_minus, abs=1e-9)

    @pytest.mark.phase1
    def test_relabeling_preserves_kinetic_energy(self):
        mech = Biped3(Biped3Params())
        q = _pre_impact()
        dq = np.array([-1.0, 0.5, 2.0])
        dqe_plus, _ = mech.impact_velocities(q, dq)
        x_plus = mech.impact(mech.state_from(q, dq))
        qp, dqp = mech.configuration(x_plus)
        np.testing.assert_allclose(qp, RELABEL @ q)
        ke_extended = 0.5 * dqe_plus @ mech.extended_mass_matrix(q) @ dqe_plus
        assert mech.kinetic_energy(qp, dqp) == pytest.approx(ke_extended, rel=1e-9)
        # the old stance foot is now the swing foot, back on the ground
        assert mech.swing_foot_height(x_plus) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.phase1
    def test_spong_prefeedback_realizes_commanded_accelerations(self, rng):
        mech = Biped3(Biped3Params())
        q = rng.uniform(-0.4, 0.4, size=3)
        dq = rng.uniform(-1.0, 1.0, size=3)
        v = np.array([2.0, -3.0])
        u = spong_prefeedback(mech, q, dq, v)
        np.testing.assert_allclose(actuated_acceleration(mech, q, dq, u), v, atol=1e-9)

    @pytest.mark.phase1
    def test_conjugate_momentum_round_trip(self):
        mech = Biped3(Biped3Params())
        q = np.array([0.1, 0.2, -0.3])
        dq = np.array([-0.8, 0.4, 1.1])
        _, sigma = conjugate_momentum_coords(mech, q, dq)
        np.testing.assert_allclose(velocities_from_momentum(mech, q, sigma, dq[1:]), dq[:1], atol=1e-12)

    @pytest.mark.phase1
    def test_momentum_rate_matches_simulated_derivative(self):
        params = Biped3Params()
        mech = Biped3(params)
        u = np.array([3.0, -2.0])
        x0 = mech.state_from(np.array([0.15, 0.3, -0.2]), np.array([-0.9, 0.2, 1.5]))
        traj = integrate(biped3(params).continuous, lambda t, x: u, x0, 0.0, 0.2, dt=1e-3)
        sigma = np.array([conjugate_momentum_coords(mech, *mech.configuration(x))[1][0] for x in traj.states])
        rate = np.gradient(sigma, traj.times)
        for k in (20, 100, 180):
            q, dq = mech.configuration(traj.states[k])
            assert momentum_rate(mech, q, dq, u)[0] == pytest.approx(rate[k], abs=1e-4)

    @pytest.mark.phase1
    def test_leg_center_of_mass_must_lie_on_leg(self):
        with pytest.raises(ModelDefinitionError):
            Biped3(Biped3Params(leg_com=1.5))


class TestModelRegistry:

    @pytest.mark.phase1
    def test_builds_bundled_models(self, pendulum, biped):
        assert not pendulum.is_hybrid
        assert pendulum.system.n == 4 and pendulum.prefeedback is not None
        assert biped.is_hybrid
        assert biped.system.decomposition.n1 == 2
        assert biped.period == pytest.approx(0.7)

    @pytest.mark.phase1
    def test_input_maps_are_inverse(self, biped):
        x = np.array([0.1, -0.5, 0.2, -0.2, 0.3, 1.0])
        v = np.array([1.0, -2.0])
        u = biped.to_physical(x, v)
        np.testing.assert_allclose(biped.to_prefeedback(x, u), v, atol=1e-9)

    @pytest.mark.phase1
    def test_unknown_model(self):
        with pytest.raises(ConfigError):
            build_model("acrobot", {})

    @pytest.mark.phase1
    def test_invalid_parameters(self):
        with pytest.raises(ConfigError):
            build_model("cart_pendulum", {"length": -1.0})
