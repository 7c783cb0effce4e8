"""Formula mini-language: parsing, printing, evaluation, sampling, grids."""

import numpy as np
import pytest

from multitreat import ValidationError
from multitreat.formulas import (
    eval_formula,
    expand_grid,
    is_dist_call,
    is_seq_call,
    parse_expr,
    print_expr,
    sample_dist,
)
from multitreat.validation import rng_from


def test_eval_linear_predictor_at_points():
    x = np.array([[1.0, 1.0, 1.0], [2.0, 1.0, 1.0]])
    got = eval_formula(".2*x1 + .3*x2 - .1*x3", x)
    np.testing.assert_allclose(got, [0.4, 0.6])


def test_eval_interaction_and_square():
    x = np.array([[2.0, 1.0, 1.0], [1.0, 1.0, 1.0]])
    got = eval_formula(".7*x1*x1 - .1*x2*x3", x)
    np.testing.assert_allclose(got, [2.7, 0.6])


def test_eval_precedence_and_unary_minus():
    x = np.array([[3.0, 2.0]])
    assert eval_formula("1 + 2*x1", x)[0] == 7.0
    assert eval_formula("(1 + 2)*x1", x)[0] == 9.0
    assert eval_formula("-x1*x2", x)[0] == -6.0
    assert eval_formula("2 - 3 - 1", x)[0] == -2.0


def test_eval_constant_formula_broadcasts():
    x = np.zeros((4, 2))
    np.testing.assert_allclose(eval_formula("0.5", x), [0.5] * 4)


def test_variable_index_out_of_range():
    x = np.zeros((3, 2))
    with pytest.raises(ValidationError, match="x3"):
        eval_formula("x3 + 1", x)


@pytest.mark.parametrize("bad", ["x1 +", "2 ** 3", "x0", "rnorm(0, 1", "foo(1)"])
def test_parse_rejects_malformed_input(bad):
    with pytest.raises(ValidationError):
        parse_expr(bad)


def test_parse_print_parse_round_trip():
    texts = [
        ".2*x1 + .3*x2 - .1*x3 - .1*x4 - .2*x5",
        "-.5*x1*x4 - .1*x2*x5",
        "rnorm(300, 0, 0.5)",
        "seq(-0.6, 0, by = 0.15)",
        "2 - (3 - 1)",
    ]
    for text in texts:
        once = print_expr(parse_expr(text))
        assert print_expr(parse_expr(once)) == once


def test_sample_rbinom_degenerate_probability():
    draws = sample_dist(parse_expr("rbinom(100, 1, 0)"), 100, rng_from((1,)))
    assert np.all(draws == 0)


def test_sample_runif_mean():
    draws = sample_dist(parse_expr("runif(0, 0.5)"), 200_000, rng_from((5,)))
    assert draws.min() >= 0 and draws.max() <= 0.5
    assert abs(draws.mean() - 0.25) < 0.005


def test_sample_rweibull_shape_one_is_exponential():
    draws = sample_dist(parse_expr("rweibull(1, 2)"), 400_000, rng_from((9,)))
    assert abs(draws.mean() - 2.0) < 0.05


def test_sample_rnorm_moments():
    draws = sample_dist(parse_expr("rnorm(10, 0, 0.5)"), 400_000, rng_from((3,)))
    assert abs(draws.mean()) < 0.01
    assert abs(draws.std() - 0.5) < 0.01


def test_sample_rbeta_mean():
    draws = sample_dist(parse_expr("rbeta(2, .4)"), 400_000, rng_from((4,)))
    assert abs(draws.mean() - 2 / 2.4) < 0.01


def test_sample_size_argument_is_ignored():
    a = sample_dist(parse_expr("rnorm(300, 0, 1)"), 50, rng_from((7,)))
    b = sample_dist(parse_expr("rnorm(0, 1)"), 50, rng_from((7,)))
    assert a.shape == (50,)
    np.testing.assert_array_equal(a, b)


def test_sample_reproducible_under_same_seed():
    e = parse_expr("rbeta(2, .4)")
    np.testing.assert_array_equal(
        sample_dist(e, 64, rng_from((11, 2))), sample_dist(e, 64, rng_from((11, 2))))


def test_seq_inclusive_grid():
    np.testing.assert_allclose(
        expand_grid(parse_expr("seq(-0.6, 0, by = 0.15)")),
        [-0.6, -0.45, -0.3, -0.15, 0.0])


def test_seq_degenerate_grid_is_single_point():
    np.testing.assert_allclose(expand_grid(parse_expr("seq(0, 0, by = 0.1)")), [0.0])


def test_call_classifiers():
    assert is_dist_call("rnorm(0, 1)")
    assert not is_dist_call("x1 + 1")
    assert is_seq_call("seq(0, 1, by = 0.5)")
    assert not is_seq_call("rnorm(0, 1)")


def test_dist_call_cannot_appear_inside_arithmetic():
    with pytest.raises(ValidationError):
        eval_formula("rnorm(0, 1) + x1", np.zeros((2, 1)))


def test_negative_constant_arguments_allowed():
    draws = sample_dist(parse_expr("rnorm(-2, 0.001)"), 1000, rng_from((2,)))
    assert abs(draws.mean() + 2.0) < 0.01
