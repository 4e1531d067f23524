import numpy as np
import pytest
from hypothesis import given, strategies as st

from chromoforge.exceptions import InvalidInputError
from chromoforge.geometry import (Conformation, Ensemble, apply_rotation, center,
                                  check_rotation, format_structure, pack_rows, parse_structure,
                                  quaternion_to_matrix, read_ensemble, rotate_tokens,
                                  sample_uniform_rotation, scale_normalize, unpack_rows,
                                  write_ensemble)
from conftest import random_conformation


def pdist(conf):
    x = conf.valid_coords()
    return np.linalg.norm(x[:, None] - x[None], axis=-1)


def test_center_two_beads():
    c = Conformation.parental_only(np.array([[[2.0, 0, 0]], [[0.0, 0, 0]]]))
    out = center(c)
    np.testing.assert_array_equal(out.coords_parental[:, 0], [[1, 0, 0], [-1, 0, 0]])


def test_center_already_centered_is_identity():
    x = np.array([[[1.0, 2, 3]], [[-1.0, -2, -3]], [[0.5, 0, 0]], [[-0.5, 0, 0]]])
    c = Conformation.parental_only(x)
    assert np.array_equal(center(c).positions, c.positions)


def test_center_64_random_beads(rng):
    c = center(Conformation.parental_only(rng.standard_normal((32, 2, 3)) * 5 + 7))
    assert np.linalg.norm(c.valid_coords().mean(axis=0)) < 1e-12


def test_center_ignores_masked_out_beads():
    par = np.array([[[1.0, 0, 0]], [[-1.0, 0, 0]]])
    rep = np.array([[[100.0, 100, 100]], [[0.0, 0, 0]]])
    c = Conformation(par, rep, np.ones((2, 1)), np.zeros((2, 1)))
    assert np.array_equal(center(c).coords_parental, par)


def test_scale_normalize_trivial():
    x = np.array([[[2.0, 0, 0]], [[-2.0, 0, 0]], [[0, 2.0, 0]], [[0, -2.0, 0]]])
    out = scale_normalize(Conformation.parental_only(x))
    assert out.scale == 2.0
    np.testing.assert_allclose(np.linalg.norm(out.valid_coords(), axis=1), 1.0)


def test_scale_normalize_unit_mean_norm_unchanged():
    x = np.array([[[1.0, 0, 0]], [[-1.0, 0, 0]]])
    out = scale_normalize(Conformation.parental_only(x))
    assert out.scale == 1.0 and np.array_equal(out.coords_parental, x)


def test_scale_normalize_random(rng):
    out = scale_normalize(center(random_conformation(rng, bins=16)))
    assert abs(np.linalg.norm(out.valid_coords(), axis=1).mean() - 1) < 1e-12


def test_degenerate_inputs_rejected():
    with pytest.raises(InvalidInputError):
        scale_normalize(Conformation.parental_only(np.zeros((3, 2, 3))))
    with pytest.raises(InvalidInputError):
        Conformation(np.zeros((2, 1, 3)), np.zeros((2, 1, 3)), np.zeros((2, 1)), np.zeros((2, 1)))


def test_quaternion_identity_and_pi_about_z():
    np.testing.assert_array_equal(quaternion_to_matrix([1, 0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(quaternion_to_matrix([0, 0, 0, 1]), np.diag([-1, -1, 1]),
                               atol=1e-15)


def test_rotation_sampler_uniformity():
    # the mean of N uniform unit vectors has norm ~ 1/sqrt(N) ~ 0.003 at N = 1e5
    rng = np.random.default_rng(0)
    v = np.array([sample_uniform_rotation(rng)[:, 0] for _ in range(100_000)])
    assert np.linalg.norm(v.mean(axis=0)) < 0.02


def test_apply_rotation_identity(rng):
    c = random_conformation(rng)
    assert np.array_equal(apply_rotation(c, np.eye(3)).positions, c.positions)


def test_rotation_round_trip(rng):
    c = random_conformation(rng, bins=16)
    R = sample_uniform_rotation(rng)
    back = apply_rotation(apply_rotation(c, R), R.T)
    assert back.allclose(c, atol=1e-9)


def test_non_orthonormal_rotation_rejected(rng):
    with pytest.raises(InvalidInputError):
        apply_rotation(random_conformation(rng), np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(InvalidInputError):
        check_rotation(np.diag([1.0, 1.0, -1.0]))


def test_rotate_tokens_matches_apply_rotation(rng):
    c = random_conformation(rng)
    R = sample_uniform_rotation(rng)
    np.testing.assert_allclose(rotate_tokens(c.to_tokens(), R),
                               apply_rotation(c, R).to_tokens(), atol=1e-12)


def test_pack_single_bin_round_trip():
    c = Conformation(np.arange(6.0).reshape(1, 2, 3), np.ones((1, 2, 3)),
                     np.ones((1, 2)), np.array([[1, 0]]))
    rows = pack_rows(c)
    assert rows.shape == (1, 16)
    np.testing.assert_array_equal(rows[0, :8], [0, 1, 2, 1, 1, 1, 1, 1])
    assert np.array_equal(unpack_rows(rows).to_tokens(), c.to_tokens())


def test_mask_half_rejected():
    rows = np.zeros((1, 8))
    rows[0, 3] = 1
    rows[0, 7] = 0.5
    with pytest.raises(InvalidInputError):
        unpack_rows(rows)
    with pytest.raises(InvalidInputError):
        unpack_rows(np.zeros((2, 7)))


def test_text_round_trip_is_exact(rng):
    c = random_conformation(rng, bins=64)
    back = parse_structure(format_structure(c))
    assert np.abs(back.to_tokens() - c.to_tokens()).max() == 0.0


def test_ensemble_directory_round_trip(tmp_path, rng):
    ens = Ensemble([random_conformation(rng) for _ in range(3)], "c7")
    write_ensemble(tmp_path / "e", ens)
    back = read_ensemble(tmp_path / "e")
    assert back.condition_id == "c7" and len(back) == 3
    for a, b in zip(ens, back):
        assert np.array_equal(a.to_tokens(), b.to_tokens())


seeds = st.integers(0, 2 ** 32 - 1)


@given(seeds)
def test_center_idempotent(seed):
    c = center(random_conformation(np.random.default_rng(seed)))
    np.testing.assert_allclose(center(c).positions, c.positions, atol=1e-12)


@given(seeds)
def test_scale_normalize_idempotent(seed):
    c = scale_normalize(center(random_conformation(np.random.default_rng(seed))))
    again = scale_normalize(c)
    np.testing.assert_allclose(again.positions, c.positions, atol=1e-12)
    assert again.scale == pytest.approx(c.scale, rel=1e-12)


@given(seeds)
def test_rotation_preserves_distances(seed):
    rng = np.random.default_rng(seed)
    c = random_conformation(rng)
    R = sample_uniform_rotation(rng)
    check_rotation(R)
    np.testing.assert_allclose(pdist(apply_rotation(c, R)), pdist(c), atol=1e-9)
    assert np.array_equal(apply_rotation(c, R).masks, c.masks)


@given(seeds)
def test_pack_unpack_bijection(seed):
    c = random_conformation(np.random.default_rng(seed), bins=5)
    assert np.array_equal(unpack_rows(pack_rows(c)).to_tokens(), c.to_tokens())
