"""Basis construction and bridge evaluation semantics."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from longbridge.bridges import (
    BasisSpec,
    LinearOutcomeBridge,
    LoglinearSelectionBridge,
    TableOutcomeBridge,
    TableSelectionBridge,
    build_basis,
    constant_outcome_bridge,
    constant_selection_bridge,
    infer_levels,
)


def test_basis_spec_rejects_unknown_kind():
    with pytest.raises(ValueError, match="unknown basis kind"):
        BasisSpec(kind="cubic")


def test_linear_basis_block_order_and_intercept_last():
    b1 = np.array([[1.0, 2.0], [3.0, 4.0]])
    b2 = np.array([[5.0], [6.0]])
    feats = build_basis((b1, b2), BasisSpec(kind="linear"))
    assert_array_equal(feats, [[1.0, 2.0, 5.0, 1.0], [3.0, 4.0, 6.0, 1.0]])
    no_int = build_basis((b1, b2), BasisSpec(kind="linear", include_intercept=False))
    assert_array_equal(no_int, [[1.0, 2.0, 5.0], [3.0, 4.0, 6.0]])


def test_linear_basis_promotes_1d_blocks():
    feats = build_basis((np.array([1.0, 2.0]), np.array([3.0, 4.0])),
                        BasisSpec(include_intercept=False))
    assert_array_equal(feats, [[1.0, 3.0], [2.0, 4.0]])


def test_basis_rejects_mismatched_row_counts():
    with pytest.raises(ValueError, match="share their row count"):
        build_basis((np.ones((3, 1)), np.ones((2, 1))), BasisSpec())


def test_interactions_are_cross_block_only():
    b1 = np.array([[2.0, 3.0]])
    b2 = np.array([[5.0]])
    feats = build_basis((b1, b2), BasisSpec(kind="linear_with_interactions"))
    # raw (2, 3, 5), cross products (2*5, 3*5), intercept; no 2*3 within-block term
    assert_array_equal(feats, [[2.0, 3.0, 5.0, 10.0, 15.0, 1.0]])


def test_interactions_three_blocks():
    b1 = np.array([[2.0]])
    b2 = np.array([[3.0]])
    b3 = np.array([[5.0]])
    feats = build_basis((b1, b2, b3), BasisSpec(kind="linear_with_interactions",
                                                include_intercept=False))
    assert_array_equal(feats, [[2.0, 3.0, 5.0, 6.0, 10.0, 15.0]])


def test_indicator_basis_one_hot_joint_cells():
    b1 = np.array([[0.0], [1.0], [2.0]])
    b2 = np.array([[1.0], [0.0], [1.0]])
    feats = build_basis((b1, b2), BasisSpec(kind="indicator"))
    assert feats.shape == (3, 6)
    assert_array_equal(np.argmax(feats, axis=1), [1, 2, 5])
    assert_array_equal(feats.sum(axis=1), [1.0, 1.0, 1.0])


def test_indicator_basis_with_declared_levels():
    b = np.array([[0.0], [1.0]])
    feats = build_basis((b,), BasisSpec(kind="indicator"), levels=(4,))
    assert feats.shape == (2, 4)
    with pytest.raises(ValueError, match="level outside declared range"):
        build_basis((np.array([[3.0]]),), BasisSpec(kind="indicator"), levels=(3,))


def test_indicator_basis_rejects_non_integer_levels():
    with pytest.raises(ValueError, match="integer levels"):
        infer_levels((np.array([[0.5]]),))
    with pytest.raises(ValueError, match="scalar blocks"):
        infer_levels((np.ones((2, 2)),))


def test_infer_levels():
    assert infer_levels((np.array([[0.0], [2.0]]), np.array([[1.0], [1.0]]))) == (3, 2)


def test_linear_outcome_bridge_evaluates_per_arm():
    theta = np.array([[1.0, 0.0, 2.0, 10.0],
                      [0.0, 1.0, -1.0, 20.0]])
    bridge = LinearOutcomeBridge(theta=theta)
    s3 = np.array([[1.0], [1.0]])
    s2 = np.array([[2.0], [2.0]])
    x = np.array([[3.0], [3.0]])
    got = bridge.evaluate(s3, s2, np.array([0, 1]), x)
    assert_allclose(got, [1.0 + 6.0 + 10.0, 2.0 - 3.0 + 20.0])
    # scalar arm broadcasts
    assert_allclose(bridge.evaluate(s3, s2, 0, x), [17.0, 17.0])


def test_linear_outcome_bridge_checks_feature_count():
    bridge = LinearOutcomeBridge(theta=np.zeros((2, 3)))
    with pytest.raises(ValueError, match="coefficients"):
        bridge.evaluate(np.ones((1, 1)), np.ones((1, 1)), 0, np.ones((1, 1)))


def test_linear_outcome_bridge_rejects_indicator_basis():
    with pytest.raises(ValueError, match="tabular"):
        LinearOutcomeBridge(theta=np.zeros((2, 4)), basis=BasisSpec(kind="indicator"))


def test_linear_outcome_bridge_with_interaction_basis():
    spec = BasisSpec(kind="linear_with_interactions")
    # features for scalar blocks: s3, s2, x, s3*s2, s3*x, s2*x, 1
    theta = np.array([[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
                      [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]])
    bridge = LinearOutcomeBridge(theta=theta, basis=spec)
    got = bridge.evaluate(np.array([[2.0]]), np.array([[3.0]]), 1, np.array([[7.0]]))
    assert_allclose(got, [6.0])


def test_table_outcome_bridge_lookup_and_default():
    table = np.arange(2 * 3 * 2 * 2, dtype=np.float64).reshape(2, 3, 2, 2)
    bridge = TableOutcomeBridge(table=table)
    s3 = np.array([1.0, 0.0, 5.0, 0.5])
    s2 = np.array([2.0, 0.0, 0.0, 0.0])
    x = np.array([1.0, 0.0, 0.0, 0.0])
    got = bridge.evaluate(s3, s2, np.array([1, 0, 0, 0]), x)
    assert_allclose(got, [table[1, 2, 1, 1], table[0, 0, 0, 0], 0.0, 0.0])


def test_table_outcome_bridge_requires_two_arm_axis():
    with pytest.raises(ValueError, match="two arms"):
        TableOutcomeBridge(table=np.zeros((2, 2, 3, 2)))


def test_loglinear_selection_bridge_evaluate():
    beta = np.array([[0.5, 0.0, 0.0], [0.0, 0.25, 0.0]])
    gamma = np.array([0.1, -0.2])
    c0 = np.array([0.0, 0.3])
    bridge = LoglinearSelectionBridge(beta=beta, gamma=gamma, c0=c0)
    s2 = np.array([[2.0], [2.0]])
    s1 = np.array([[4.0], [4.0]])
    x = np.array([[1.0], [1.0]])
    got = bridge.evaluate(s2, s1, np.array([0, 1]), x)
    assert_allclose(got, [np.exp(0.1 + 1.0), np.exp(-0.2 + 1.0) + 0.3])


def test_loglinear_selection_bridge_overflow_guard():
    bridge = LoglinearSelectionBridge(beta=np.array([[200.0], [200.0]]),
                                      gamma=np.zeros(2))
    ones = np.ones((1, 0))
    with pytest.raises(OverflowError, match="exceeds 300"):
        bridge.evaluate(np.array([[2.0]]), ones, 1, ones)


def test_loglinear_selection_bridge_shape_validation():
    with pytest.raises(ValueError, match="per arm"):
        LoglinearSelectionBridge(beta=np.zeros((3, 2)), gamma=np.zeros(2))
    with pytest.raises(ValueError, match="per arm"):
        LoglinearSelectionBridge(beta=np.zeros((2, 2)), gamma=np.zeros(3))


def test_table_selection_bridge_axis_order():
    # axes (s1, s2, a, x); evaluate takes (s2, s1, a, x)
    table = np.zeros((3, 2, 2, 1))
    table[2, 1, 0, 0] = 7.0
    bridge = TableSelectionBridge(table=table)
    got = bridge.evaluate(np.array([1.0]), np.array([2.0]), 0, np.array([0.0]))
    assert_allclose(got, [7.0])
    # out-of-range defaults to the neutral weight
    assert_allclose(bridge.evaluate(np.array([5.0]), np.array([0.0]), 0,
                                    np.array([0.0])), [1.0])


def test_constant_outcome_bridge():
    bridge = constant_outcome_bridge(3.5, d3=2, d2=1, dx=1)
    got = bridge.evaluate(np.ones((4, 2)), np.zeros((4, 1)),
                          np.array([0, 1, 0, 1]), np.full((4, 1), 9.0))
    assert_array_equal(got, np.full(4, 3.5))


@pytest.mark.parametrize("value", [2.0, 1.0, 0.0, -1.5])
def test_constant_selection_bridge(value):
    bridge = constant_selection_bridge(value, d2=1, d1=2, dx=1)
    got = bridge.evaluate(np.ones((3, 1)), np.ones((3, 2)),
                          np.array([0, 1, 1]), np.ones((3, 1)))
    assert_array_equal(got, np.full(3, value))


def test_to_dict_roundtrip_fields():
    lin = LinearOutcomeBridge(theta=np.array([[1.0, 2.0], [3.0, 4.0]]),
                              basis=BasisSpec(include_intercept=False))
    d = lin.to_dict()
    assert d["form"] == "linear"
    assert d["theta"] == [[1.0, 2.0], [3.0, 4.0]]
    assert d["basis"]["include_intercept"] is False

    logl = LoglinearSelectionBridge(beta=np.zeros((2, 1)), gamma=np.ones(2),
                                    diagnostics={"n_rows": 5})
    d = logl.to_dict()
    assert d["form"] == "loglinear"
    assert d["diagnostics"] == {"n_rows": 5}

    tab = TableSelectionBridge(table=np.ones((1, 1, 2, 1)))
    d = tab.to_dict()
    assert d["form"] == "table"
    assert d["axes"] == ["s1", "s2", "a", "x"]
