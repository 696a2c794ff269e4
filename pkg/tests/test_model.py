"""Tests for the model-definition layer: term DSL, programmatic constructors, YAML."""

import math

import numpy as np
import pytest

from flexhmm.design import Term, cyclic, intercept, linear, poly, random_intercept, spline
from flexhmm.model import (
    FitOptions,
    ModelSpec,
    make_obs_spec,
    make_spec,
    parse_term,
    parse_terms,
    spec_from_dict,
    spec_from_yaml,
    spec_to_dict,
    spec_to_yaml,
    term_to_string,
    terms_to_string,
    with_options,
)


# --------------------------------------------------------------------------
# term DSL


class TestParseTerm:
    def test_intercept_forms(self):
        assert parse_term("intercept") == intercept()
        assert parse_term("1") == intercept()

    def test_bare_name_is_linear(self):
        assert parse_term("temp") == linear("temp")
        assert parse_term("linear(temp)") == linear("temp")

    def test_poly(self):
        assert parse_term("poly(x, 3)") == poly("x", 3)
        assert parse_term("poly(x, degree=2)") == poly("x", 2)

    def test_spline_default_k(self):
        assert parse_term("spline(x)") == spline("x", 10)
        assert parse_term("spline(x, k=7)") == spline("x", 7)
        assert parse_term("spline(x, 12)") == spline("x", 12)

    def test_cyclic(self):
        t = parse_term("cyclic(hour, k=8, period=24)")
        assert t == cyclic("hour", 8, 24.0)
        t2 = parse_term("cyclic(angle)")
        assert t2.k == 10 and abs(t2.period - 2 * math.pi) < 1e-15

    def test_re(self):
        assert parse_term("re(ID)") == random_intercept("ID")

    def test_unknown_term_names_valid_ones(self):
        with pytest.raises(ValueError, match="spline"):
            parse_term("wiggle(x)")

    def test_garbage_rejected(self):
        with pytest.raises(ValueError):
            parse_term("x + + y")
        with pytest.raises(ValueError):
            parse_term("poly(x)")  # degree required

    def test_parse_terms_plus_and_empty(self):
        ts = parse_terms("intercept + x + spline(y, k=5)")
        assert ts == (intercept(), linear("x"), spline("y", 5))
        assert parse_terms(".") == ()
        assert parse_terms("") == ()
        assert parse_terms(None) == ()

    def test_round_trip_fixed_point(self):
        cases = [
            "intercept",
            "x",
            "poly(x, 3)",
            "spline(x, k=10)",
            "cyclic(hour, k=8, period=24.0)",
            "re(ID)",
            "intercept + x + spline(d, k=6) + re(ID)",
            ".",
        ]
        for s in cases:
            once = terms_to_string(parse_terms(s))
            twice = terms_to_string(parse_terms(once))
            assert once == twice
            assert parse_terms(once) == parse_terms(s)

    def test_default_cyclic_period_survives_round_trip(self):
        t = parse_term("cyclic(a)")
        assert parse_term(term_to_string(t)) == t


# --------------------------------------------------------------------------
# constructors


def _movement_spec():
    """Three states, step length + turning angle, structural zeros 1<->3,
    angle means fixed at their initial values, random intercept by animal
    plus a spline on a covariate in one transition."""
    return make_spec(
        n_states=3,
        observations=[
            {
                "name": "step",
                "dist": "gamma2",
                "par": {
                    "mean": {"terms": "intercept", "init": [0.5, 2.0, 6.0]},
                    "sd": {"init": [0.5, 1.5, 4.0]},
                },
            },
            {
                "name": "angle",
                "dist": "wrpcauchy",
                "par": {
                    "mu": {"init": [math.pi, 0.0, 0.0]},
                    "rho": {"init": [0.2, 0.5, 0.8]},
                },
            },
        ],
        hidden_terms=[
            [".", "intercept + spline(d2c, k=8)", "."],
            ["intercept", ".", "intercept"],
            [".", "intercept + re(ID)", "."],
        ],
        structural_zeros=[(1, 3), (3, 1)],
        initial="stationary",
        fixed=(
            "angle.mu.state1.(Intercept)",
            "angle.mu.state2.(Intercept)",
            "angle.mu.state3.(Intercept)",
        ),
    )


class TestMakeSpec:
    def test_movement_spec_shape(self):
        spec = _movement_spec()
        assert spec.K == 3
        assert spec.response_names == ("step", "angle")
        assert spec.covariate_names == ("d2c",)
        assert spec.chain.structural_zeros == frozenset({(0, 2), (2, 0)})
        # grid rows renormalize the default tpm over allowed entries
        g = np.asarray(spec.tpm_init)
        assert np.allclose(g.sum(axis=1), 1.0)
        assert g[0, 2] == 0.0 and g[2, 0] == 0.0

    def test_target_enumeration_order(self):
        spec = _movement_spec()
        hidden = [pref for _, pref, _ in spec.hidden_targets()]
        assert hidden == ["S1>S2", "S2>S1", "S2>S3", "S3>S2"]
        obs = [pref for _, pref, _ in spec.obs_targets()]
        assert obs[:3] == ["step.mean.state1", "step.mean.state2", "step.mean.state3"]
        assert obs[3:6] == ["step.sd.state1", "step.sd.state2", "step.sd.state3"]
        assert obs[6] == "angle.mu.state1"

    def test_grid_cell_on_zero_rejected(self):
        with pytest.raises(ValueError, match=r"\(1,3\)"):
            make_spec(
                n_states=3,
                observations=[{"name": "y", "dist": "norm"}],
                hidden_terms=[
                    [".", "intercept", "intercept"],
                    ["intercept", ".", "intercept"],
                    [".", "intercept", "."],
                ],
                structural_zeros=[(1, 3)],
            )

    def test_grid_wrong_shape_rejected(self):
        with pytest.raises(ValueError, match="K x K"):
            make_spec(
                n_states=2,
                observations=[{"name": "y", "dist": "norm"}],
                hidden_terms=[[".", "intercept"]],
            )

    def test_bad_dist_name_lists_options(self):
        with pytest.raises(ValueError, match="norm"):
            make_spec(n_states=2, observations=[{"name": "y", "dist": "gauss"}])

    def test_default_hidden_terms_intercept_everywhere(self):
        spec = make_spec(n_states=2, observations=[{"name": "y", "dist": "norm"}])
        assert spec.chain.tp_terms == {(0, 1): (intercept(),), (1, 0): (intercept(),)}

    def test_estimated_per_series(self):
        spec = make_spec(
            n_states=2,
            observations=[{"name": "y", "dist": "norm"}],
            initial="estimated_per_series",
        )
        assert spec.chain.initial_mode == "estimated"
        assert spec.delta_per_series

    def test_fixed_initial_states(self):
        spec = make_spec(
            n_states=2, observations=[{"name": "y", "dist": "norm"}], initial=[2]
        )
        assert spec.chain.initial_mode == (2,)

    def test_per_state_terms_string_list(self):
        obs = make_obs_spec(
            "y", "norm", {"mean": ["intercept", "intercept + x"]}, K=2
        )
        assert obs.terms["mean"][0] == (intercept(),)
        assert obs.terms["mean"][1] == (intercept(), linear("x"))
        # sd falls back to intercept-only in both states
        assert obs.terms["sd"] == ((intercept(),), (intercept(),))

    def test_init_broadcast_and_per_state(self):
        obs = make_obs_spec("y", "norm", {}, {"mean": 3.0, "sd": [1.0, 2.0]}, K=2)
        assert obs.init["mean"] == (3.0, 3.0)
        assert obs.init["sd"] == (1.0, 2.0)

    def test_init_wrong_length(self):
        with pytest.raises(ValueError, match="init"):
            make_obs_spec("y", "norm", {}, {"mean": [1.0, 2.0, 3.0]}, K=2)

    def test_re_factor_must_be_id_or_categorical(self):
        with pytest.raises(ValueError, match="categorical"):
            make_spec(
                n_states=2,
                observations=[
                    {"name": "y", "dist": "norm", "par": {"mean": {"terms": "intercept + re(site)"}}}
                ],
            )
        # declaring it categorical fixes it
        spec = make_spec(
            n_states=2,
            observations=[
                {"name": "y", "dist": "norm", "par": {"mean": {"terms": "intercept + re(site)"}}}
            ],
            categorical=["site"],
        )
        assert spec.categorical == ("site",)

    def test_tpm_init_zeroed_and_renormalized(self):
        spec = make_spec(
            n_states=3,
            observations=[{"name": "y", "dist": "norm"}],
            tpm_init=[[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]],
            structural_zeros=[(1, 3), (3, 1)],
        )
        g = np.asarray(spec.tpm_init)
        assert g[0, 2] == 0.0
        assert np.allclose(g.sum(axis=1), 1.0)
        assert np.isclose(g[0, 0], 0.8 / 0.9)

    def test_k_disagreement_rejected(self):
        from flexhmm.hidden import ChainSpec

        chain = ChainSpec(K=3, tp_terms={}, initial_mode="stationary", structural_zeros=frozenset())
        obs = make_obs_spec("y", "norm", {}, K=2)
        with pytest.raises(ValueError, match="disagree"):
            ModelSpec(K=2, observations=(obs,), chain=chain, tpm_init=((0.9, 0.1), (0.1, 0.9)))

    def test_with_options(self):
        spec = make_spec(n_states=2, observations=[{"name": "y", "dist": "norm"}])
        spec2 = with_options(spec, max_iter=50, method="quasi-newton")
        assert spec2.options.max_iter == 50
        assert spec2.options.method == "quasi-newton"
        assert spec.options.max_iter == 1000

    def test_bad_method_rejected(self):
        with pytest.raises(ValueError, match="nelder-mead"):
            FitOptions(method="newton")


# --------------------------------------------------------------------------
# YAML round trips


class TestYaml:
    def test_round_trip_movement_spec(self):
        spec = _movement_spec()
        text = spec_to_yaml(spec)
        back = spec_from_yaml(text)
        assert back == spec

    def test_round_trip_simple(self):
        spec = make_spec(
            n_states=2,
            observations=[
                {
                    "name": "y",
                    "dist": "norm",
                    "par": {"mean": {"terms": ["intercept", "intercept + spline(x, k=6)"]}},
                }
            ],
            hidden_terms="intercept + cyclic(hour, k=8, period=24)",
            initial="estimated",
        )
        assert spec_from_yaml(spec_to_yaml(spec)) == spec

    def test_round_trip_per_series_delta(self):
        spec = make_spec(
            n_states=2,
            observations=[{"name": "y", "dist": "norm"}],
            initial="estimated_per_series",
        )
        back = spec_from_yaml(spec_to_yaml(spec))
        assert back.delta_per_series
        assert back == spec

    def test_yaml_example_document(self):
        text = """
n_states: 2
observation:
  - name: count
    dist: pois
    par:
      rate:
        terms: intercept + x
        init: [1.0, 5.0]
hidden:
  terms:
    - [".", "intercept"]
    - ["intercept", "."]
  tpm_init: [[0.95, 0.05], [0.05, 0.95]]
  initial: stationary
options:
  max_iter: 200
  seed: 42
"""
        spec = spec_from_yaml(text)
        assert spec.K == 2
        assert spec.observations[0].family.name == "pois"
        assert spec.observations[0].init["rate"] == (1.0, 5.0)
        assert spec.options.max_iter == 200
        assert spec.options.seed == 42
        assert spec.tpm_init == ((0.95, 0.05), (0.05, 0.95))

    def test_missing_n_states(self):
        with pytest.raises(ValueError, match="n_states"):
            spec_from_dict({"observation": [{"name": "y", "dist": "norm"}]})

    def test_missing_observation(self):
        with pytest.raises(ValueError, match="observation"):
            spec_from_dict({"n_states": 2})

    def test_unknown_option_rejected_naming_valid(self):
        with pytest.raises(ValueError, match="max_iter"):
            spec_from_dict(
                {
                    "n_states": 2,
                    "observation": [{"name": "y", "dist": "norm"}],
                    "options": {"max_iters": 5},
                }
            )

    def test_non_mapping_rejected(self):
        with pytest.raises(ValueError, match="mapping"):
            spec_from_yaml("- just\n- a list\n")

    def test_to_dict_grid_marks_diagonal_and_zeros(self):
        spec = _movement_spec()
        doc = spec_to_dict(spec)
        grid = doc["hidden"]["terms"]
        assert grid[0][0] == "." and grid[1][1] == "." and grid[2][2] == "."
        assert grid[0][2] == "." and grid[2][0] == "."
        assert "spline(d2c, k=8)" in grid[0][1]
        assert doc["hidden"]["structural_zeros"] == [[1, 3], [3, 1]]
