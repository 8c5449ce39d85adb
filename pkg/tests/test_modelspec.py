import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abcpmcmc.modelspec import BUNDLED_MODELS, ModelSyntaxError, bundled_model, parse_model, render_model, stoichiometry
from abcpmcmc.priors import log_prior_density


LV_S = [[1, -1, 0], [0, 1, -1]]
APHID_S = [[1, -1], [1, 0]]
GENE_S = [[1, -1, 0, 0], [0, 0, 1, -1]]


@pytest.mark.parametrize("name, expected", [("lv", LV_S), ("aphid", APHID_S), ("gene", GENE_S)])
def test_bundled_stoichiometry(name, expected):
    m = bundled_model(name)
    assert np.array_equal(m.stoich, np.array(expected))
    assert m.stoich.dtype.kind == "i"


def test_lv_shapes(lv):
    assert lv.species_names == ("X", "Y")
    assert lv.pre.shape == (3, 2)
    assert lv.param_names == ("th1", "th2", "th3")


@pytest.mark.parametrize("name", BUNDLED_MODELS)
def test_render_round_trip(name):
    m = bundled_model(name)
    again = parse_model(render_model(m))
    assert again == m
    assert render_model(again) == render_model(m)


def test_stoichiometry_examples():
    assert np.array_equal(stoichiometry([[1, 2]], [[1, 2]]), np.zeros((2, 1)))
    assert np.array_equal(stoichiometry([[1, 1]], [[0, 2]]), [[-1], [1]])
    with pytest.raises(ValueError):
        stoichiometry([[1, 1]], [[1, 1, 1]])


counts = st.lists(st.lists(st.integers(0, 5), min_size=3, max_size=3), min_size=2, max_size=2)


@given(counts, counts, counts)
@settings(max_examples=50, deadline=None)
def test_stoichiometry_linear(P, Q1, Q2):
    P, Q1, Q2 = (np.array(a) for a in (P, Q1, Q2))
    lhs = stoichiometry(P, Q1 + Q2)
    rhs = stoichiometry(P, Q1) + stoichiometry(np.zeros_like(P), Q2)
    assert np.array_equal(lhs, rhs)


def test_unknown_species_named():
    src = "species X = 1\nparam k\nreaction r: X + Z -> X @ mass_action(k)\n"
    with pytest.raises(ModelSyntaxError, match="Z") as info:
        parse_model(src)
    assert info.value.line == 3


def test_duplicate_reaction():
    src = "species X\nparam k\nreaction r: X -> 0 @ mass_action(k)\nreaction r: 0 -> X @ mass_action(k)\n"
    with pytest.raises(ModelSyntaxError, match="duplicate reaction"):
        parse_model(src)


def test_undeclared_parameter():
    src = "species X\nparam k\nreaction r: X -> 0 @ mass_action(q)\n"
    with pytest.raises(ModelSyntaxError, match="'q'"):
        parse_model(src)


def test_undeclared_symbol_in_expression():
    src = "species X\nparam k\nreaction r: 0 -> X @ expr(k * exp(-c * t))\n"
    with pytest.raises(ModelSyntaxError, match="'c'"):
        parse_model(src)


def test_syntax_error_has_position():
    with pytest.raises(ModelSyntaxError) as info:
        parse_model("species X\nparam k\nreaction r X -> 0 @ mass_action(k)\n")
    assert info.value.line == 3
    assert info.value.column == 1


def test_empty_source():
    with pytest.raises(ModelSyntaxError):
        parse_model("   \n# only a comment\n")


def test_expression_hazard_parsed(gene):
    assert gene.hazards[0].kind == "expression"
    assert "exp" in gene.hazards[0].source
    assert gene.hazards[1].kind == "mass_action"


def test_log_prior_density_examples(lv):
    lp = log_prior_density(lv.prior, [0.0, -5.30, -0.51])
    assert lp == pytest.approx(-3 * math.log(16), abs=1e-12)
    assert round(lp, 4) == -8.3178
    assert log_prior_density(lv.prior, [9.0, 0.0, 0.0]) == -math.inf
    with pytest.raises(ValueError):
        log_prior_density(lv.prior, [0.0, 0.0])


def test_exponential_prior_value(gene):
    # kappa_P ~ exponential(0.01) evaluated at 100
    idx = gene.param_names.index("kappa_P")
    assert gene.prior.params[idx].dist.logpdf(100.0) == pytest.approx(math.log(0.01) - 1.0)
    assert round(math.log(0.01) - 1.0, 4) == -5.6052


def test_sampling_scale_recorded(lv, gene):
    assert lv.prior.log_mask.all()
    assert not gene.prior.log_mask.any()
    assert lv.prior.coordinate_names() == ["log_th1", "log_th2", "log_th3"]
