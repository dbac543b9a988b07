import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from metareflect import hierarchy as h, quasipotential as qp
from metareflect.errors import AtBreakpoint, InconsistentMatrix, NonGenericTie, TooLarge


def random_matrix(seed, l, integer=False):
    rng = np.random.default_rng(seed)
    v = rng.integers(1, 20, size=(l, l)).astype(float) if integer else rng.uniform(0.1, 10.0, size=(l, l))
    np.fill_diagonal(v, 0.0)
    return qp.QuasipotentialMatrix(v, qp.AVOIDING, list(range(1, l + 1)), "user_supplied")


def brute_min(V, sinks):
    return min(g.weight(V) for g in h.iter_wgraphs(V.size, sinks, V.labels))


@pytest.fixture(scope="module")
def example():
    V = qp.example_matrix()
    return V, h.build_cycle_tree(V)


def test_example_tree(example):
    V, tree = example
    assert tree.is_root and tree.members == {1, 3, 5}
    pair = tree.child_of(1)
    assert pair.members == {1, 3}
    assert (pair.A, pair.C, pair.exit_target, pair.bottom) == (5.0, 4.0, 5, 3)
    one, three = pair.children
    assert (one.exit_target, one.A) == (3, 1.0)
    assert (three.exit_target, three.A) == (1, 2.0)
    five = tree.child_of(5)
    assert (five.exit_target, five.A, five.C) == (3, 3.0, 3.0)


def test_example_w_values(example):
    V, _ = example
    assert h.w_values(V) == {1: 5.0, 3: 4.0, 5: 5.0}
    for i in V.labels:
        assert h.w_value(V, i) == h.w_value_bruteforce(V, i) == brute_min(V, [i])


def test_example_metastable_profile(example):
    V, tree = example
    for lam in (0.01, 0.5, 0.999):
        assert h.metastable_state(tree, V, 1, lam) == 1
    for lam in (1.0, 2.5, 4.0, 100.0):
        assert h.metastable_state(tree, V, 1, lam) == 3
    prof = h.metastable_profile(tree, V, 1)
    assert prof.thresholds == [1.0] and prof.states == [1, 3]
    assert prof.state_at(0.5) == 1 and prof.state_at(1.0) == 3
    with pytest.raises(AtBreakpoint):
        h.metastable_state(tree, V, 1, 1.0, strict=True)
    with pytest.raises(ValueError):
        h.metastable_state(tree, V, 1, 0.0)
    with pytest.raises(KeyError):
        h.metastable_state(tree, V, 2, 1.0)


def test_example_from_other_starts(example):
    V, tree = example
    # from O_5 the first exit (scale 3) leads to O_3, whose cycle lasts until scale 4
    assert h.metastable_state(tree, V, 5, 2.0) == 5
    assert h.metastable_state(tree, V, 5, 3.5) == 3
    assert h.metastable_state(tree, V, 3, 1.5) == 3


@pytest.mark.parametrize("l,k", [(3, 1), (3, 2), (4, 1), (4, 2), (5, 1), (5, 3), (6, 2)])
def test_wgraph_count_matches_forest_formula(l, k):
    # rooted forests on l labelled vertices with k given roots: k * l^(l-k-1)
    assert len(h.enumerate_wgraphs(l, range(1, k + 1))) == k * l ** (l - k - 1)


def test_wgraph_structure():
    for g in h.enumerate_wgraphs(4, [2]):
        arrows = g.as_dict()
        assert set(arrows) == {1, 3, 4}
        for s in arrows:
            assert g.chain(s)[-1] == 2


def test_enumeration_limits():
    with pytest.raises(TooLarge):
        next(h.iter_wgraphs(13, [1]))
    with pytest.raises(ValueError):
        next(h.iter_wgraphs(3, []))
    with pytest.raises(ValueError):
        next(h.iter_wgraphs(3, [1], labels=[1, 2]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 6), st.booleans())
def test_edmonds_equals_brute_force(seed, l, integer):
    V = random_matrix(seed, l, integer)
    for i in V.labels:
        assert h.w_value(V, i) == h.w_value_bruteforce(V, i)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(3, 6), st.integers(1, 2))
def test_min_forest_with_several_sinks(seed, l, k):
    V = random_matrix(seed, l)
    sinks = V.labels[:k]
    arrows = h.min_forest(V, V.labels, sinks)
    assert set(arrows) == set(V.labels[k:])
    assert math.fsum(V.get(a, b) for a, b in arrows.items()) == pytest.approx(brute_min(V, sinks), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 6))
def test_hierarchy_invariants(seed, l):
    V = random_matrix(seed, l)
    try:
        tree = h.build_cycle_tree(V)
    except NonGenericTie:
        assume(False)
    # members of the children partition the parent
    for node in tree.walk():
        if node.children:
            assert frozenset().union(*(c.members for c in node.children)) == node.members
            assert sum(len(c.members) for c in node.children) == len(node.members)
        if not node.is_root:
            assert node.exit_target not in node.members
            assert node.C <= node.A + 1e-12
    # leaves are singletons with C = A = min outgoing entry
    for node in tree.walk():
        if not node.children and not node.is_root:
            (i,) = node.members
            out = min(V.get(i, j) for j in V.labels if j != i)
            assert node.A == pytest.approx(out) and node.C == pytest.approx(out)
    wv = h.w_values(V)
    best = min(wv, key=wv.get)
    for s in V.labels:
        prof = h.metastable_profile(tree, V, s)
        assert prof.states[0] == s
        assert prof.states[-1] == best
        assert all(a < b for a, b in zip(prof.thresholds, prof.thresholds[1:]))


def test_symmetric_tie_detected_and_broken():
    V = qp.QuasipotentialMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), qp.AVOIDING, [1, 2], "user_supplied")
    with pytest.raises(NonGenericTie):
        h.build_cycle_tree(V)
    tree = h.build_cycle_tree(V, break_ties=h.LOWEST)
    assert tree.bottom == 1


def test_stability_partition_maps_unstable_states():
    # state 2 drains into 3 at zero cost
    v = np.array([[0.0, 2.0, 3.0], [1.0, 0.0, 0.0], [4.0, 1.5, 0.0]])
    V = qp.QuasipotentialMatrix(v, qp.PLAIN, [1, 2, 3], "user_supplied")
    stable, umap = h.stability_partition(V)
    assert stable == {1, 3} and umap == {2: 3}
    core = h.restrict(V, stable)
    assert core.labels == [1, 3]
    np.testing.assert_array_equal(core.values, [[0.0, 3.0], [4.0, 0.0]])


def test_stability_partition_rejects_stuck_state():
    v = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    V = qp.QuasipotentialMatrix(v, qp.PLAIN, [1, 2, 3], "user_supplied")
    with pytest.raises(InconsistentMatrix):
        h.stability_partition(V)


def test_w_of_x_and_restricted_w(example):
    V, _ = example
    assert h.w_of_x(V, {1: 0.5, 3: 3.0, 5: 0.0}) == 5.0
    assert h.restricted_w(V, [1, 3]) == {1: 2.0, 3: 1.0}
    assert h.cycle_exit_constant(V, [1, 3], 5.0) == 4.0
    assert h.next_cycle_target(V, [1, 3]) == (5.0, 5)
    assert h.cycle_bottom(V, [1, 3]) == (3, 1.0)


def test_report_and_narrative(example):
    V, tree = example
    rep = h.hierarchy_report(V, [1])
    assert rep["argmin_W"] == 3
    assert rep["profiles"] == [{"start": 1, "thresholds": [1.0], "states": [1, 3]}]
    text = h.narrative(tree, V, 1)
    assert "cycle {1,3} exits to O_5 with A=5, C=4" in text
    assert "start O_1: O_1 for 0<lambda<1; O_3 for 1<=lambda<inf" in text


def test_single_state():
    V = qp.QuasipotentialMatrix(np.zeros((1, 1)), qp.AVOIDING, [7], "user_supplied")
    tree = h.build_cycle_tree(V)
    assert tree.members == {7} and tree.bottom == 7
    assert h.metastable_state(tree, V, 7, 3.0) == 7
    assert h.w_value(V, 7) == 0.0
