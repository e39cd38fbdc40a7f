import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from battshare import (
    CapacityError,
    JointModel,
    NumericalError,
    ParseError,
    StructuralError,
    UserModel,
    ValidationError,
    drift,
    load_chain,
    product_chain,
    save_chain,
    stationary_distribution,
    time_reverse,
    validate,
)
from battshare.markov_core import parse_chain

from conftest import make_e2, random_model
from oracles import simulate_states, stationary_by_powers


def _names_failed(report):
    return {c.name for c in report.failures()}


class TestValidate:
    def test_e2_passes(self, e2):
        assert validate(e2).ok

    def test_periodic_chain_fails_a1(self):
        rep = validate(UserModel([[0, 1], [1, 0]], [-1, 1]))
        assert _names_failed(rep) == {"A1_self_loops"}

    def test_surplus_only_fails_a2(self):
        rep = validate(UserModel([[0.4, 0.6], [0.4, 0.6]], [1, 2]))
        assert _names_failed(rep) == {"A2_deficit_state"}

    def test_strict_raises_with_check_and_state(self):
        with pytest.raises(ValidationError) as err:
            validate(UserModel([[0, 1], [1, 0]], [-1, 1], states=["a", "b"]), strict=True)
        assert err.value.check == "A1_self_loops"
        assert err.value.state == "a"

    def test_row_sum(self):
        rep = validate(UserModel([[0.5, 0.4], [0.5, 0.5]], [-1, 1]))
        assert "row_stochastic" in _names_failed(rep)

    def test_reducible(self):
        rep = validate(UserModel([[1.0, 0.0], [0.5, 0.5]], [-1, 1]))
        assert "irreducible" in _names_failed(rep)

    def test_non_integer_reward(self):
        rep = validate(UserModel([[0.5, 0.5], [0.5, 0.5]], [-1.5, 1.0]))
        assert "integer_rewards" in _names_failed(rep)

    def test_dimension_mismatch_is_structural(self):
        with pytest.raises(StructuralError):
            UserModel([[0.5, 0.5], [0.5, 0.5]], [-1, 1, 2])
        with pytest.raises(StructuralError):
            UserModel([[0.5, 0.5]], [-1])


class TestStationary:
    def test_e2(self, e2):
        # pi P = pi with identical rows gives pi = the row.
        np.testing.assert_allclose(stationary_distribution(e2), [0.4, 0.6], atol=1e-14)

    def test_symmetric(self):
        m = UserModel([[0.9, 0.1], [0.1, 0.9]], [-1, 1])
        np.testing.assert_allclose(stationary_distribution(m), [0.5, 0.5], atol=1e-14)

    def test_single_state(self):
        m = UserModel([[1.0]], [-1])
        np.testing.assert_allclose(stationary_distribution(m), [1.0])

    def test_residual_and_matrix_power_oracle(self):
        rng = np.random.default_rng(11)
        for n in (3, 4, 5, 6):
            m = random_model(rng, n, positive_drift=False)
            pi = stationary_distribution(m)
            assert np.max(np.abs(pi @ m.transition - pi)) <= 1e-10
            np.testing.assert_allclose(pi, stationary_by_powers(m.transition), atol=1e-10)

    def test_singular_solve_reports_residual(self):
        m = UserModel([[1.0, 0.0], [0.0, 1.0]], [-1, 1])
        with pytest.raises(NumericalError):
            stationary_distribution(m)

    def test_matches_long_run_occupancy(self):
        m = random_model(np.random.default_rng(5), 3)
        steps = 10**6
        path = simulate_states(m.transition, steps, seed=3)
        freq = np.bincount(path, minlength=3) / steps
        pi = stationary_distribution(m)
        # Batch-means standard error of each occupancy fraction.
        batches = (path[: steps // 100 * 100].reshape(100, -1)[..., None] == np.arange(3)).mean(axis=1)
        se = batches.std(axis=0, ddof=1) / 10
        assert np.all(np.abs(freq - pi) <= 3 * se + 1e-12)


class TestDrift:
    def test_e2(self, e2):
        assert drift(e2) == pytest.approx(0.2, abs=1e-14)

    def test_zero_drift_warns(self):
        m = UserModel([[0.9, 0.1], [0.1, 0.9]], [-1, 1])
        with pytest.warns(RuntimeWarning):
            assert drift(m) == pytest.approx(0.0, abs=1e-14)

    def test_two_user_joint(self, e2):
        assert drift(product_chain([e2, e2])) == pytest.approx(0.4, abs=1e-14)

    def test_additive_over_users(self):
        rng = np.random.default_rng(2)
        users = [random_model(rng, n) for n in (2, 3, 4)]
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert drift(product_chain(users)) == pytest.approx(sum(drift(u) for u in users), abs=1e-10)


class TestTimeReverse:
    def test_identical_rows_chain_is_self_reverse(self, e2):
        np.testing.assert_allclose(time_reverse(e2).transition, e2.transition, atol=1e-15)

    def test_symmetric_chain(self):
        m = UserModel([[0.9, 0.1], [0.1, 0.9]], [-1, 1])
        np.testing.assert_allclose(time_reverse(m).transition, m.transition, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_involution_and_same_law(self, seed):
        m = random_model(np.random.default_rng(seed), 3)
        rev = time_reverse(m)
        np.testing.assert_allclose(rev.transition.sum(axis=1), 1.0, atol=1e-14)
        pi = stationary_distribution(m)
        np.testing.assert_allclose(pi @ rev.transition, pi, atol=1e-12)
        twice = time_reverse(UserModel(rev.transition, rev.net_gen))
        np.testing.assert_allclose(twice.transition, m.transition, atol=1e-12)

    def test_definition(self):
        m = random_model(np.random.default_rng(9), 4)
        pi = stationary_distribution(m)
        P, Ps = m.transition, time_reverse(m).transition
        for s in range(4):
            for t in range(4):
                assert Ps[s, t] == pytest.approx(pi[t] * P[t, s] / pi[s], abs=1e-14)


class TestProductChain:
    def test_single_user_unchanged(self, e2):
        j = product_chain([e2])
        np.testing.assert_array_equal(j.transition, e2.transition)
        np.testing.assert_array_equal(j.net_gen, e2.net_gen)

    def test_e2_squared(self, e2):
        j = product_chain([e2, e2])
        assert j.n_states == 4
        assert j.net_gen.tolist() == [-2, 0, 0, 2]
        np.testing.assert_allclose(stationary_distribution(j), [0.16, 0.24, 0.24, 0.36], atol=1e-12)
        assert j.states[1] == ("D", "S")

    def test_entries_are_products(self):
        rng = np.random.default_rng(4)
        a, b = random_model(rng, 2), random_model(rng, 3)
        j = product_chain([a, b])
        for s in range(6):
            for t in range(6):
                expected = a.transition[s // 3, t // 3] * b.transition[s % 3, t % 3]
                assert j.transition[s, t] == pytest.approx(expected, abs=1e-16)
                assert j.net_gen[s] == a.net_gen[s // 3] + b.net_gen[s % 3]

    def test_joint_law_factorizes(self):
        rng = np.random.default_rng(8)
        users = [random_model(rng, n) for n in (2, 3, 3)]
        j = product_chain(users)
        pi = stationary_distribution(j)
        expected = np.kron(np.kron(*[stationary_distribution(u) for u in users[:2]]),
                           stationary_distribution(users[2]))
        np.testing.assert_allclose(pi, expected, atol=1e-10)
        cube = pi.reshape(2, 3, 3)
        for axis, u in enumerate(users):
            others = tuple(k for k in range(3) if k != axis)
            np.testing.assert_allclose(cube.sum(axis=others), stationary_distribution(u), atol=1e-10)

    def test_invalid_user_rejected(self, e2):
        with pytest.raises(ValidationError):
            product_chain([e2, UserModel([[0.4, 0.6], [0.4, 0.6]], [1, 2])])

    def test_state_cap(self, e2):
        with pytest.raises(CapacityError, match="Monte Carlo"):
            product_chain([e2] * 5, state_cap=16)

    def test_large_joint_is_lazy(self, e2):
        j = product_chain([e2] * 13)
        assert isinstance(j, JointModel) and not j.materializable
        assert drift(j) == pytest.approx(13 * 0.2, abs=1e-10)
        with pytest.raises(CapacityError):
            j.transition


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 5))
def test_reverse_preserves_law_property(seed, n):
    m = random_model(np.random.default_rng(seed), n, positive_drift=False)
    pi = stationary_distribution(m)
    rev = time_reverse(m)
    np.testing.assert_allclose(pi @ rev.transition, pi, atol=1e-12)


class TestChainSpec:
    def test_round_trip(self, tmp_path):
        m = random_model(np.random.default_rng(1), 3)
        path = tmp_path / "m.json"
        save_chain(m, path)
        back = load_chain(path)
        np.testing.assert_array_equal(back.transition, m.transition)
        np.testing.assert_array_equal(back.net_gen, m.net_gen)

    def test_bad_json_line(self):
        with pytest.raises(ParseError) as err:
            parse_chain('{\n "transition": [[1]],\n "net_gen": [1,]\n}')
        assert err.value.line == 3

    def test_non_integer_rewards_line(self):
        text = json.dumps({"transition": [[0.5, 0.5], [0.5, 0.5]], "net_gen": [-1.5, 1]}, indent=1)
        with pytest.raises(ParseError) as err:
            parse_chain(text)
        assert err.value.line == text.splitlines().index(' "net_gen": [') + 1

    def test_ragged_rows(self):
        with pytest.raises(ParseError, match="row 1"):
            parse_chain('{"transition": [[0.5, 0.5], [1]], "net_gen": [-1, 1]}')

    def test_missing_key(self):
        with pytest.raises(ParseError, match="net_gen"):
            parse_chain('{"transition": [[1]]}')

    def test_unknown_key(self):
        with pytest.raises(ParseError, match="rewards"):
            parse_chain('{"transition": [[1]], "net_gen": [-1], "rewards": []}')

    def test_labels(self):
        m = parse_chain(json.dumps({"states": ["D", "S"], "transition": make_e2().transition.tolist(),
                                    "net_gen": [-1, 1]}))
        assert m.states == ("D", "S")
