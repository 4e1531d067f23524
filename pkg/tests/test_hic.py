import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from chromoforge.exceptions import InvalidInputError
from chromoforge.geometry import Conformation, Ensemble, apply_rotation, center, \
    sample_uniform_rotation, scale_normalize
from chromoforge.hic import (HiCMap, aggregate_ensemble, circular_distance,
                             contacts_from_structure, format_hic, parse_hic, ps_curve,
                             rescale_threshold)
from conftest import random_conformation


def test_circular_distance_examples():
    # ring of 928 bins: the last bin neighbours the first
    assert circular_distance(0, 927, 928) == 1
    assert circular_distance(3, 3, 64) == 0
    assert circular_distance(0, 464, 928) == 464
    with pytest.raises(InvalidInputError):
        circular_distance(0, 64, 64)


def test_coincident_and_distant_bins():
    x = np.zeros((3, 1, 3))
    x[2, 0] = [15.0, 0, 0]
    M = contacts_from_structure(Conformation.parental_only(x), 1.5)
    assert M[0, 1] == 1 and M[0, 2] == 0 and M[1, 2] == 0
    assert np.all(np.diag(M) == 1)


@pytest.mark.parametrize("seed", range(10))
def test_contacts_match_bead_scan(seed):
    rng = np.random.default_rng(seed)
    c = random_conformation(rng, bins=8, spread=1.5)
    np.testing.assert_array_equal(contacts_from_structure(c, 1.5), oracles.contacts(c, 1.5))


def test_aggregate_single_and_doubled(rng):
    c = random_conformation(rng, bins=8, spread=1.5)
    one = aggregate_ensemble(Ensemble([c]), 1.5)
    np.testing.assert_array_equal(one.counts, contacts_from_structure(c, 1.5))
    two = aggregate_ensemble(Ensemble([c, c]), 1.5)
    np.testing.assert_array_equal(two.counts, 2 * one.counts)
    assert two.contact_threshold == 1.5


def test_aggregate_16_members_matches_summation(rng):
    members = [random_conformation(rng, bins=8, spread=1.5) for _ in range(16)]
    expect = sum(oracles.contacts(m, 1.2) for m in members)
    hic = aggregate_ensemble(Ensemble(members), 1.2)
    np.testing.assert_array_equal(hic.counts, expect)
    assert hic.is_symmetric()
    assert np.array_equal(hic.counts, np.round(hic.counts))


def test_aggregate_rejects_empty():
    with pytest.raises(InvalidInputError):
        aggregate_ensemble(Ensemble([]), 1.0)


def test_rescale_threshold():
    assert rescale_threshold(1.5, 1.0) == 1.5
    assert rescale_threshold(1.5, 2.0) == 0.75
    with pytest.raises(InvalidInputError):
        rescale_threshold(1.5, 0.0)


def test_dual_space_aggregation(rng):
    # aggregating the normalized copy with the rescaled cutoff reproduces the
    # original-space contacts; one common scale keeps the equivalence exact
    members = [center(random_conformation(rng, bins=16, spread=2.0)) for _ in range(8)]
    s = float(np.mean([scale_normalize(m).scale for m in members]))
    normed = [m.with_positions(m.positions / s) for m in members]
    a = aggregate_ensemble(Ensemble(members), 1.5).counts
    b = aggregate_ensemble(Ensemble(normed), rescale_threshold(1.5, s)).counts
    assert (a == b).mean() >= 0.99


def test_ps_trivial_maps():
    assert np.all(ps_curve(HiCMap(np.ones((8, 8)))).values == 1)
    p = ps_curve(HiCMap(np.eye(8))).values
    assert p[0] == 1 and np.all(p[1:] == 0)
    assert len(p) == 5


@pytest.mark.parametrize("seed", range(5))
def test_ps_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    A = rng.random((16, 16))
    A = A + A.T
    np.testing.assert_allclose(ps_curve(HiCMap(A)).values, oracles.ps(A), rtol=0, atol=1e-12)


def test_hic_text_round_trip(rng):
    A = rng.random((6, 6))
    hic = HiCMap(A + A.T, 0.37, "cid")
    back = parse_hic(format_hic(hic))
    assert np.array_equal(back.counts, hic.counts)
    assert back.contact_threshold == 0.37 and back.condition_id == "cid"


seeds = st.integers(0, 2 ** 32 - 1)


@given(seeds)
def test_contacts_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    c = random_conformation(rng, bins=8, spread=1.5)
    moved = apply_rotation(c, sample_uniform_rotation(rng))
    moved = moved.with_positions(moved.positions + rng.standard_normal(3))
    # beads exactly on the cutoff may flip by rounding, which has probability ~0
    np.testing.assert_array_equal(contacts_from_structure(moved, 1.5),
                                  contacts_from_structure(c, 1.5))


@given(seeds)
def test_ps_of_transpose(seed):
    A = np.random.default_rng(seed).random((9, 9))
    np.testing.assert_allclose(ps_curve(HiCMap(A)).values, ps_curve(HiCMap(A.T)).values,
                               rtol=1e-14)
