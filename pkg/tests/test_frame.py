"""Tests for the model frame: parameter layout, constraints, likelihood.

The forward recursion is checked against a brute-force reference that sums
the complete-data likelihood over every state path.
"""

import itertools
import math

import numpy as np
import pytest
import scipy.stats

from flexhmm.data import from_arrays
from flexhmm.frame import ModelFrame, ParameterSet
from flexhmm.model import make_spec


def _tpm(eta12, eta21):
    g = np.array([[0.0, eta12], [eta21, 0.0]])
    e = np.exp(g)
    return e / e.sum(axis=1, keepdims=True)


def brute_force_loglik(deltas, gamma_rows, logf, starts):
    """Sum the likelihood over all state paths, series by series.

    deltas: (M, K) initial distributions; gamma_rows: (n, K, K) where the
    matrix at row t drives the transition INTO row t; logf: (n, K);
    starts: series start indices.
    """
    n, K = logf.shape
    bounds = list(starts) + [n]
    total = 0.0
    for m in range(len(starts)):
        lo, hi = bounds[m], bounds[m + 1]
        like = 0.0
        for path in itertools.product(range(K), repeat=hi - lo):
            p = deltas[m][path[0]] * math.exp(logf[lo, path[0]])
            for t in range(1, hi - lo):
                p *= gamma_rows[lo + t][path[t - 1], path[t]] * math.exp(
                    logf[lo + t, path[t]]
                )
            like += p
        total += math.log(like)
    return total


def _norm_spec(initial="estimated", hidden_terms="intercept", **kw):
    return make_spec(
        n_states=2,
        observations=[
            {
                "name": "y",
                "dist": "norm",
                "par": {"mean": {"init": [-1.0, 2.0]}, "sd": {"init": [0.7, 1.3]}},
            }
        ],
        hidden_terms=hidden_terms,
        initial=initial,
        **kw,
    )


def _dataset(y, x=None, ids=None, states=None):
    y = np.asarray(y, dtype=float)
    cov = {"x": np.asarray(x, dtype=float)} if x is not None else {}
    return from_arrays(
        {"y": y},
        cov,
        series_ids=ids,
        known_states=states,
    )


class TestLayout:
    def test_names_and_sizes(self):
        spec = make_spec(
            n_states=2,
            observations=[
                {
                    "name": "y",
                    "dist": "norm",
                    "par": {"mean": {"terms": "intercept + spline(x, k=5)"}},
                }
            ],
            hidden_terms="intercept + x",
            initial="estimated",
        )
        rng = np.random.default_rng(0)
        d = _dataset(rng.normal(size=40), x=np.linspace(0, 1, 40))
        fr = ModelFrame(spec, d)
        assert fr.alpha_names[:4] == [
            "S1>S2.(Intercept)",
            "S1>S2.x",
            "S2>S1.(Intercept)",
            "S2>S1.x",
        ]
        assert "y.mean.state1.(Intercept)" in fr.alpha_names
        assert fr.lambda_names == [
            "y.mean.state1.spline(x).lambda",
            "y.mean.state2.spline(x).lambda",
        ]
        assert fr.delta_names == ["delta0.state2"]
        assert fr.p_beta == 8  # two states x (k=5 -> 4 centered columns)
        assert fr.beta_names[0] == "y.mean.state1.spline(x).1"
        assert len(fr.outer_names) == fr.p_alpha + fr.p_lambda + fr.p_delta

    def test_initial_values_from_links_and_tpm(self):
        spec = make_spec(
            n_states=2,
            observations=[
                {
                    "name": "y",
                    "dist": "gamma2",
                    "par": {"mean": {"init": [0.5, 3.0]}, "sd": {"init": [0.5, 2.0]}},
                }
            ],
            tpm_init=[[0.9, 0.1], [0.2, 0.8]],
            initial="estimated",
        )
        d = _dataset(np.abs(np.random.default_rng(1).normal(size=30)) + 0.1)
        fr = ModelFrame(spec, d)
        p = fr.init
        name_to = {n: i for i, n in enumerate(fr.alpha_names)}
        assert np.isclose(
            p.alpha[name_to["S1>S2.(Intercept)"]], np.log(0.1 / 0.9)
        )
        assert np.isclose(
            p.alpha[name_to["S2>S1.(Intercept)"]], np.log(0.2 / 0.8)
        )
        assert np.isclose(p.alpha[name_to["y.mean.state1.(Intercept)"]], np.log(0.5))
        assert np.isclose(p.alpha[name_to["y.sd.state2.(Intercept)"]], np.log(2.0))
        assert p.delta0_logits.shape == (1,)

    def test_boundary_init_rejected_with_domain_message(self):
        spec = make_spec(
            n_states=2,
            observations=[
                {"name": "a", "dist": "wrpcauchy", "par": {"rho": {"init": [0.0, 0.5]}}}
            ],
        )
        d = from_arrays({"a": np.array([0.1, 0.2, 0.3, -0.1])}, {})
        with pytest.raises(ValueError, match="domain"):
            ModelFrame(spec, d)

    def test_per_series_delta_names(self):
        spec = _norm_spec(initial="estimated_per_series")
        d = _dataset([0.0, 1.0, 2.0, 3.0], ids=["a", "a", "b", "b"])
        fr = ModelFrame(spec, d)
        assert fr.delta_names == ["delta0.a.state2", "delta0.b.state2"]
        assert fr.p_delta == 2

    def test_missing_response_column(self):
        spec = make_spec(n_states=2, observations=[{"name": "speed", "dist": "norm"}])
        d = _dataset([1.0, 2.0])
        with pytest.raises(ValueError, match="speed"):
            ModelFrame(spec, d)

    def test_known_state_beyond_K(self):
        spec = _norm_spec()
        d = _dataset([1.0, 2.0, 3.0], states=[1, 3, 2])
        with pytest.raises(ValueError, match="exceeds"):
            ModelFrame(spec, d)


class TestConstraints:
    def _frame(self, fixed=(), shared=()):
        spec = _norm_spec(initial="estimated", fixed=fixed, shared=shared)
        d = _dataset([0.0, 1.0, -1.0, 2.0])
        return ModelFrame(spec, d)

    def test_unknown_fixed_name(self):
        with pytest.raises(ValueError, match="does not match"):
            self._frame(fixed=("y.mean.state9.(Intercept)",))

    def test_fixed_is_bitwise_initial(self):
        fr = self._frame(fixed=("y.mean.state2.(Intercept)",))
        i = fr.outer_names.index("y.mean.state2.(Intercept)")
        assert fr.psi_fixed[i]
        free = np.full(fr.p_free, 9.9)
        full = fr.full_of(free)
        assert full[i] == 2.0  # the declared initial mean, bitwise
        assert fr.p_free == len(fr.outer_names) - 1

    def test_shared_pair_bitwise_equal(self):
        fr = self._frame(shared=(("S1>S2.(Intercept)", "S2>S1.(Intercept)"),))
        i = fr.outer_names.index("S1>S2.(Intercept)")
        j = fr.outer_names.index("S2>S1.(Intercept)")
        rng = np.random.default_rng(3)
        free = rng.normal(size=fr.p_free)
        full = fr.full_of(free)
        assert full[i] == full[j]
        assert fr.p_free == len(fr.outer_names) - 1

    def test_fixing_one_member_pins_the_group(self):
        fr = self._frame(
            fixed=("S1>S2.(Intercept)",),
            shared=(("S1>S2.(Intercept)", "S2>S1.(Intercept)"),),
        )
        i = fr.outer_names.index("S1>S2.(Intercept)")
        j = fr.outer_names.index("S2>S1.(Intercept)")
        full = fr.full_of(np.zeros(fr.p_free))
        assert fr.psi_fixed[i] and fr.psi_fixed[j]
        assert full[i] == full[j]
        assert fr.p_free == len(fr.outer_names) - 2

    def test_free_full_round_trip(self):
        fr = self._frame(shared=(("y.sd.state1.(Intercept)", "y.sd.state2.(Intercept)"),))
        rng = np.random.default_rng(4)
        free = rng.normal(size=fr.p_free)
        assert np.allclose(fr.free_of(fr.full_of(free)), free)


class TestForward:
    def test_matches_path_enumeration_iid(self):
        """Constant chain, estimated initial distribution, one series."""
        spec = _norm_spec(initial="estimated")
        y = np.array([0.3, -1.2, 2.5, 0.0, 1.7])
        d = _dataset(y)
        fr = ModelFrame(spec, d)
        p = fr.init.copy()
        p.alpha = fr.init.alpha.copy()
        names = {n: i for i, n in enumerate(fr.alpha_names)}
        p.alpha[names["S1>S2.(Intercept)"]] = -0.7
        p.alpha[names["S2>S1.(Intercept)"]] = 0.4
        p.delta0_logits = np.array([0.6])

        gam = _tpm(-0.7, 0.4)
        delta = np.exp([0.0, 0.6])
        delta = delta / delta.sum()
        logf = np.column_stack(
            [
                scipy.stats.norm.logpdf(y, -1.0, 0.7),
                scipy.stats.norm.logpdf(y, 2.0, 1.3),
            ]
        )
        want = brute_force_loglik(
            [delta], np.broadcast_to(gam, (5, 2, 2)), logf, [0]
        )
        assert np.isclose(fr.loglik(p), want, rtol=1e-12)

    def test_matches_path_enumeration_covariate_tpm(self):
        """The matrix built from row t's covariate drives the move into t."""
        spec = _norm_spec(initial="estimated", hidden_terms="intercept + x")
        y = np.array([0.3, -1.2, 2.5, 0.0])
        x = np.array([5.0, -2.0, 1.0, 0.5])
        d = _dataset(y, x=x)
        fr = ModelFrame(spec, d)
        p = fr.init.copy()
        names = {n: i for i, n in enumerate(fr.alpha_names)}
        p.alpha[names["S1>S2.(Intercept)"]] = -0.3
        p.alpha[names["S1>S2.x"]] = 0.8
        p.alpha[names["S2>S1.(Intercept)"]] = 0.1
        p.alpha[names["S2>S1.x"]] = -0.5
        p.delta0_logits = np.array([-0.2])

        gam_rows = np.stack(
            [_tpm(-0.3 + 0.8 * xi, 0.1 - 0.5 * xi) for xi in x]
        )
        delta = np.exp([0.0, -0.2])
        delta = delta / delta.sum()
        logf = np.column_stack(
            [
                scipy.stats.norm.logpdf(y, -1.0, 0.7),
                scipy.stats.norm.logpdf(y, 2.0, 1.3),
            ]
        )
        want = brute_force_loglik([delta], gam_rows, logf, [0])
        assert np.isclose(fr.loglik(p), want, rtol=1e-12)

        # flipping which covariate row feeds the first transition changes the
        # answer, so the convention is actually exercised by this dataset
        wrong = brute_force_loglik([delta], np.roll(gam_rows, 1, axis=0), logf, [0])
        assert not np.isclose(want, wrong)

    def test_additive_over_series(self):
        spec = _norm_spec(initial="estimated")
        y = np.array([0.3, -1.2, 2.5, 0.0, 1.7, -0.4])
        joint = ModelFrame(spec, _dataset(y, ids=["a"] * 3 + ["b"] * 3))
        pa = joint.init
        split_a = ModelFrame(spec, _dataset(y[:3]))
        split_b = ModelFrame(spec, _dataset(y[3:]))
        assert np.isclose(
            joint.loglik(pa),
            split_a.loglik(split_a.init) + split_b.loglik(split_b.init),
            rtol=1e-12,
        )

    def test_stationary_initial_mode(self):
        spec = _norm_spec(initial="stationary")
        y = np.array([0.3, -1.2, 2.5])
        fr = ModelFrame(spec, _dataset(y))
        p = fr.init.copy()
        names = {n: i for i, n in enumerate(fr.alpha_names)}
        p.alpha[names["S1>S2.(Intercept)"]] = -0.7
        p.alpha[names["S2>S1.(Intercept)"]] = 0.4
        gam = _tpm(-0.7, 0.4)
        from flexhmm.hidden import stationary

        delta = stationary(gam)
        logf = np.column_stack(
            [
                scipy.stats.norm.logpdf(y, -1.0, 0.7),
                scipy.stats.norm.logpdf(y, 2.0, 1.3),
            ]
        )
        want = brute_force_loglik([delta], np.broadcast_to(gam, (3, 2, 2)), logf, [0])
        assert np.isclose(fr.loglik(p), want, rtol=1e-12)

    def test_fixed_initial_state(self):
        spec = _norm_spec(initial=[2])
        y = np.array([0.3, -1.2])
        fr = ModelFrame(spec, _dataset(y))
        gam = _tpm(
            np.log(0.1 / 0.9), np.log(0.1 / 0.9)
        )  # default tpm 0.9/0.1
        logf = np.column_stack(
            [
                scipy.stats.norm.logpdf(y, -1.0, 0.7),
                scipy.stats.norm.logpdf(y, 2.0, 1.3),
            ]
        )
        want = brute_force_loglik(
            [np.array([0.0, 1.0])], np.broadcast_to(gam, (2, 2, 2)), logf, [0]
        )
        assert np.isclose(fr.loglik(fr.init), want, rtol=1e-12)

    def test_all_missing_gives_zero(self):
        spec = _norm_spec(initial="estimated")
        d = _dataset([np.nan, np.nan, np.nan])
        fr = ModelFrame(spec, d)
        assert abs(fr.loglik(fr.init)) < 1e-9

    def test_partial_missing_drops_only_that_factor(self):
        spec = _norm_spec(initial="estimated")
        y = np.array([0.3, np.nan, 2.5])
        fr = ModelFrame(spec, _dataset(y))
        p = fr.init
        gam = _tpm(np.log(0.1 / 0.9), np.log(0.1 / 0.9))
        delta = np.array([0.5, 0.5])
        logf = np.column_stack(
            [
                scipy.stats.norm.logpdf(y, -1.0, 0.7),
                scipy.stats.norm.logpdf(y, 2.0, 1.3),
            ]
        )
        logf[1] = 0.0  # missing row contributes a factor of one
        want = brute_force_loglik([delta], np.broadcast_to(gam, (3, 2, 2)), logf, [0])
        assert np.isclose(fr.loglik(p), want, rtol=1e-12)

    def test_known_states_give_complete_data_likelihood(self):
        spec = _norm_spec(initial="estimated")
        y = np.array([0.3, -1.2, 2.5])
        states = [1, 2, 2]
        fr = ModelFrame(spec, _dataset(y, states=states))
        p = fr.init.copy()
        p.delta0_logits = np.array([0.3])
        gam = _tpm(np.log(0.1 / 0.9), np.log(0.1 / 0.9))
        delta = np.exp([0.0, 0.3])
        delta = delta / delta.sum()
        want = (
            np.log(delta[0])
            + np.log(gam[0, 1])
            + np.log(gam[1, 1])
            + scipy.stats.norm.logpdf(0.3, -1.0, 0.7)
            + scipy.stats.norm.logpdf(-1.2, 2.0, 1.3)
            + scipy.stats.norm.logpdf(2.5, 2.0, 1.3)
        )
        assert np.isclose(fr.loglik(p), want, rtol=1e-10)

    def test_structural_zero_blocks_path(self):
        """With 1->2 structurally zero and states known to use it, the
        likelihood collapses to (numerical) zero."""
        spec = make_spec(
            n_states=3,
            observations=[{"name": "y", "dist": "norm"}],
            structural_zeros=[(1, 2)],
            initial="estimated",
        )
        d = _dataset([0.1, 0.2], states=[1, 2])
        fr = ModelFrame(spec, d)
        assert fr.loglik(fr.init) < -1e25


class TestPenalty:
    def _spline_frame(self):
        spec = make_spec(
            n_states=2,
            observations=[
                {
                    "name": "y",
                    "dist": "norm",
                    "par": {"mean": {"terms": ["intercept + spline(x, k=6)", "intercept"]}},
                }
            ],
            initial="estimated",
        )
        rng = np.random.default_rng(7)
        n = 50
        return ModelFrame(spec, _dataset(rng.normal(size=n), x=rng.uniform(0, 1, n)))

    def test_penalized_equals_nll_plus_full_quadratic(self):
        fr = self._spline_frame()
        assert fr.p_beta == 5 and len(fr.blocks) == 1
        rng = np.random.default_rng(8)
        p = fr.init.copy()
        p.beta = rng.normal(size=fr.p_beta)
        p.log_lambda = np.array([np.log(2.0)])
        S = fr.blocks[0].S
        quad = p.beta @ S @ p.beta
        expect = -fr.loglik(p) + 2.0 * quad
        assert np.isclose(fr.penalized_joint_nll(p), expect, rtol=1e-12)

    def test_penalty_contribution_of_four(self):
        """lambda = 2 and a coefficient quadratic of 2 add exactly 4."""
        fr = self._spline_frame()
        rng = np.random.default_rng(9)
        p = fr.init.copy()
        b = rng.normal(size=fr.p_beta)
        S = fr.blocks[0].S
        p.beta = b * np.sqrt(2.0 / (b @ S @ b))
        p.log_lambda = np.array([np.log(2.0)])
        assert np.isclose(
            fr.penalized_joint_nll(p) - (-fr.loglik(p)), 4.0, atol=1e-9
        )

    def test_zero_beta_no_penalty(self):
        fr = self._spline_frame()
        p = fr.init.copy()
        p.log_lambda = np.array([3.0])
        assert np.isclose(fr.penalized_joint_nll(p), -fr.loglik(p), rtol=1e-12)

    def test_inner_gradient_matches_finite_differences(self):
        """The smoothing objective's analytic beta-gradient agrees with
        central finite differences of the objective itself."""
        import jax.numpy as jnp

        fr = self._spline_frame()
        rng = np.random.default_rng(10)
        psi_free = fr.free_of(fr.outer_full(fr.init)) + 0.1 * rng.normal(
            size=fr.p_free
        )
        beta = 0.5 * rng.normal(size=fr.p_beta)
        f = lambda b: float(
            fr.core["inner_obj"](jnp.asarray(b), jnp.asarray(psi_free), fr.jdata)
        )
        g = np.asarray(
            fr.core["inner_grad"](jnp.asarray(beta), jnp.asarray(psi_free), fr.jdata)
        )
        h = 1e-6
        fd = np.zeros_like(g)
        for i in range(len(beta)):
            e = np.zeros_like(beta)
            e[i] = h
            fd[i] = (f(beta + e) - f(beta - e)) / (2 * h)
        assert np.allclose(g, fd, rtol=1e-4, atol=1e-8)

    def test_hessian_symmetric(self):
        import jax.numpy as jnp

        fr = self._spline_frame()
        psi_free = fr.free_of(fr.outer_full(fr.init))
        beta = np.zeros(fr.p_beta)
        H = np.asarray(
            fr.core["inner_hess"](jnp.asarray(beta), jnp.asarray(psi_free), fr.jdata)
        )
        assert H.shape == (fr.p_beta, fr.p_beta)
        assert np.allclose(H, H.T, atol=1e-8)


class TestSequences:
    def test_shapes_and_normalization(self):
        spec = _norm_spec(initial="estimated")
        y = np.random.default_rng(11).normal(size=12)
        fr = ModelFrame(spec, _dataset(y, ids=["a"] * 5 + ["b"] * 7))
        lg, lf, ld = fr.sequences(fr.init)
        assert lg.shape == (12, 2, 2)
        assert lf.shape == (12, 2)
        assert ld.shape == (2, 2)
        assert np.allclose(np.exp(lg).sum(axis=2), 1.0, atol=1e-12)
        assert np.allclose(np.exp(ld).sum(axis=1), 1.0, atol=1e-12)

    def test_forward_detail_sums_to_loglik(self):
        spec = _norm_spec(initial="estimated")
        y = np.random.default_rng(12).normal(size=9)
        fr = ModelFrame(spec, _dataset(y))
        cs, las = fr.forward_detail(fr.init)
        assert np.isclose(cs.sum(), fr.loglik(fr.init), rtol=1e-12)
        assert np.allclose(np.exp(las).sum(axis=1), 1.0, atol=1e-10)

    def test_obs_omega_links(self):
        spec = make_spec(
            n_states=2,
            observations=[
                {"name": "y", "dist": "gamma2", "par": {"mean": {"init": [0.5, 3.0]}}}
            ],
        )
        y = np.abs(np.random.default_rng(13).normal(size=6)) + 0.1
        fr = ModelFrame(spec, _dataset(y))
        om = fr.obs_omega(fr.init)
        assert set(om) == {"y"}
        assert np.allclose(om["y"]["mean"][:, 0], 0.5)
        assert np.allclose(om["y"]["mean"][:, 1], 3.0)
