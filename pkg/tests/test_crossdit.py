import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chromoforge.crossdit import (PRESETS, CrossDiT, CrossDiTGenerator, DitBlock, DitConfig,
                                  flow_matching_loss, generate_ensemble, guided_velocity,
                                  interpolate, preprocess_maps, sample_latents)
from chromoforge.exceptions import InvalidInputError
from chromoforge.hic import HiCMap, aggregate_ensemble
from chromoforge.metrics import drmsd
from chromoforge.tensorcore import Tensor, backward, no_grad
from chromoforge.tensorcore import ops as E


def tiny(bins=8, hidden=16, depth=2, seed=0, perturb=False, channels=4, **kw):
    cfg = DitConfig(bins=bins, latent_channels=channels, depth=depth, hidden=hidden, heads=2,
                    encoder_depth=1, time_features=8, **kw)
    model = CrossDiT(cfg, np.random.default_rng(seed))
    if perturb:
        rng = np.random.default_rng(seed + 1)
        for p in model.parameters():
            p.data = p.data + 0.05 * rng.standard_normal(p.shape)
    return cfg, model


def random_maps(n, bins, seed=0):
    rng = np.random.default_rng(seed)
    M = rng.poisson(3.0, (n, bins, bins)).astype(float)
    return M + M.transpose(0, 2, 1)


def test_config_validation_and_presets():
    with pytest.raises(InvalidInputError):
        DitConfig(hidden=10, heads=4)
    for p in PRESETS.values():
        DitConfig(**p)
    assert PRESETS["S"] == dict(depth=12, hidden=384, heads=6)
    assert PRESETS["L"] == dict(depth=24, hidden=1024, heads=16)


def test_preprocess_is_log1p_standardised():
    M = random_maps(2, 6)
    P = preprocess_maps(M)
    L = np.log1p(M)
    np.testing.assert_allclose(P[0], (L[0] - L[0].mean()) / L[0].std(), rtol=1e-12)
    assert np.all(preprocess_maps(np.zeros((1, 4, 4))) == 0)


def test_backbone_is_identity_at_init():
    cfg, model = tiny(depth=3)
    rng = np.random.default_rng(3)
    h = Tensor(rng.standard_normal((2, 8, 16)))
    z_c, pooled = model.condition_tokens(preprocess_maps(random_maps(2, 8)))
    c = model.t_embed(np.array([0.2, 0.9])) + pooled
    out = model.backbone(h, z_c, c)
    assert np.abs(out.data - h.data).max() < 1e-12
    # the zero-initialised head predicts zero velocity
    v = model(rng.standard_normal((2, 8, 4)), np.array([0.2, 0.9]), z_c, pooled)
    assert np.abs(v.data).max() == 0.0


def test_condition_tokens_unchanged_through_blocks():
    cfg, model = tiny(perturb=True)
    z_c, pooled = model.condition_tokens(preprocess_maps(random_maps(2, 8)))
    before = z_c.data.copy()
    h = Tensor(np.random.default_rng(1).standard_normal((2, 8, 16)))
    c = model.t_embed(np.array([0.3, 0.6])) + pooled
    for blk in model.blocks:
        h = blk(h, z_c, c)
        assert np.array_equal(z_c.data, before)
    model(np.zeros((2, 8, 4)), np.array([0.3, 0.6]), z_c, pooled)
    assert np.array_equal(z_c.data, before)


def test_cross_attention_is_only_route_for_tokens():
    cfg, model = tiny(perturb=True)
    blk = model.blocks[0]
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 8, 16)))
    c = Tensor(rng.standard_normal((1, 16)))
    z1, z2 = Tensor(rng.standard_normal((1, 8, 16))), Tensor(np.zeros((1, 8, 16)))
    assert np.abs(blk(x, z1, c).data - blk(x, z2, c).data).max() > 1e-6
    blk.cross.proj.weight.data[:] = 0.0
    blk.cross.proj.bias.data[:] = 0.0
    assert np.array_equal(blk(x, z1, c).data, blk(x, z2, c).data)


@pytest.mark.parametrize("bins", [3, 8, 11])
def test_sequence_lengths_agree(bins):
    cfg, model = tiny(bins=bins)
    z_c, pooled = model.condition_tokens(preprocess_maps(random_maps(2, bins)))
    assert z_c.shape == (2, bins, 16) and pooled.shape == (2, 16)
    v = model(np.zeros((2, bins, 4)), np.array([0.5, 0.5]), z_c, pooled)
    assert v.shape == (2, bins, 4)
    with pytest.raises(InvalidInputError):
        model(np.zeros((2, bins + 1, 4)), np.array([0.5, 0.5]), z_c, pooled)


def test_encoder_is_not_permutation_invariant():
    cfg, model = tiny(perturb=True)
    M = random_maps(1, 8)
    R = np.roll(np.roll(M, 3, 1), 3, 2)
    a = model.encoder(preprocess_maps(M)).data
    b = model.encoder(preprocess_maps(R)).data
    assert np.abs(a - np.roll(b, -3, 1)).max() > 1e-6


def test_timestep_embedding():
    cfg, model = tiny()
    e0, e1 = model.t_embed(np.array([0.0])).data[0], model.t_embed(np.array([1.0])).data[0]
    cos = e0 @ e1 / np.linalg.norm(e0) / np.linalg.norm(e1)
    assert 1 - cos > 0.01
    assert np.array_equal(model.t_embed(np.array([0.37])).data,
                          model.t_embed(np.array([0.37])).data)
    for t in (0.1, 0.5, 0.9):
        a = model.t_embed(np.array([t])).data
        d1 = np.linalg.norm(model.t_embed(np.array([t + 1e-4])).data - a)
        d2 = np.linalg.norm(model.t_embed(np.array([t + 5e-5])).data - a)
        assert d1 < 0.1 * np.linalg.norm(a)
        # first-order behaviour: halving the step halves the change
        assert 1.9 < d1 / d2 < 2.1


def test_interpolant_endpoints():
    rng = np.random.default_rng(0)
    z0, eps = rng.standard_normal((2, 2, 5, 3))
    out = interpolate(z0, eps, np.array([0.0, 1.0]))
    assert np.array_equal(out[0], z0[0]) and np.array_equal(out[1], eps[1])


class OracleVelocity:
    """Stands in for the network: predicts the exact target ``eps - z0``."""

    def __init__(self, z0, eps, hidden=4):
        self.target = eps - z0
        self.null_tokens = Tensor(np.zeros((z0.shape[1], hidden)))
        self.hidden = hidden

    def condition_tokens(self, prepped, drop=None):
        z = Tensor(np.zeros((len(prepped), prepped.shape[1], self.hidden)))
        return z, E.mean(z, axis=1)

    def __call__(self, z_t, t, z_c, pooled):
        return Tensor(self.target)


def test_oracle_predictor_has_zero_loss():
    rng = np.random.default_rng(1)
    z0, eps = rng.standard_normal((2, 3, 6, 4))
    loss = flow_matching_loss(OracleVelocity(z0, eps), z0, preprocess_maps(random_maps(3, 6)),
                              rng.uniform(size=3), eps)
    assert loss.item() == 0.0


def test_training_loss_gradient_finite_differences():
    cfg, model = tiny(perturb=True)
    rng = np.random.default_rng(5)
    z0 = rng.standard_normal((3, 8, 4))
    eps = rng.standard_normal((3, 8, 4))
    t = rng.uniform(size=3)
    prepped = preprocess_maps(random_maps(2, 8))
    drop = np.array([False, True, False])
    idx = np.array([0, 1, 1])

    def loss():
        return flow_matching_loss(model, z0, prepped, t, eps, drop, idx)

    backward(loss())
    h = 1e-5
    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = loss().item()
                flat[i] = orig - h
                fm = loss().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = p.grad.reshape(-1)[i]
            assert abs(ana - num) <= 1e-4 * max(abs(num), abs(ana), 1e-7), name


def test_guided_velocity_identities():
    rng = np.random.default_rng(0)
    vc, vu = rng.standard_normal((2, 4, 3))
    assert np.array_equal(guided_velocity(vc, vu, 1.0), vc)
    assert np.array_equal(guided_velocity(vc, vu, 0.0), vu)
    np.testing.assert_allclose(guided_velocity(vc, vu, 2.5), vu + 2.5 * (vc - vu), rtol=1e-12)


def test_cfg_one_bitwise_equals_conditional_only():
    cfg, model = tiny(perturb=True)
    prepped = preprocess_maps(random_maps(1, 8))
    noise = np.random.default_rng(7).standard_normal((3, 8, 4))
    a = sample_latents(model, prepped, noise, steps=10, cfg_scale=1.0)
    b = sample_latents(model, prepped, noise, steps=10, conditional_only=True)
    assert np.array_equal(a, b)
    c = sample_latents(model, prepped, noise, steps=10, cfg_scale=2.0)
    assert not np.array_equal(a, c)


def test_cfg_zero_is_unconditional_trajectory():
    cfg, model = tiny(perturb=True)
    prepped = preprocess_maps(random_maps(1, 8))
    noise = np.random.default_rng(8).standard_normal((2, 8, 4))
    got = sample_latents(model, prepped, noise, steps=5, cfg_scale=0.0)
    z = noise.copy()
    with no_grad():
        z_u, p_u = model.null_condition(2)
        for i in range(5):
            z = z - 0.2 * model(z, np.full(2, 1.0 - i * 0.2), z_u, p_u).data
    assert np.array_equal(got, z)


def test_two_gaussian_flow_matching_toy():
    # two equal-weight Gaussians at (+-2, 0) with sd 0.3; no conditioning signal
    rng = np.random.default_rng(0)
    n = 2048
    sign = rng.choice([-1.0, 1.0], n)
    Z = np.stack([2.0 * sign, np.zeros(n)], 1)[:, None, :] + 0.3 * rng.standard_normal((n, 1, 2))
    maps = np.zeros((n, 1, 1))
    gen = CrossDiTGenerator(depth=2, hidden=32, heads=2, encoder_depth=0, cond_dropout_prob=0.0,
                            learning_rate=3e-3, epochs=30, batch_size=128, lr_schedule="cosine",
                            random_state=0).fit(Z, maps)
    s = gen.sample(np.zeros((1, 1)), 1000, rng=1, steps=50)[:, 0, :]
    for side in (-1, 1):
        pts = s[np.sign(s[:, 0]) == side]
        assert len(pts) > 300
        assert np.linalg.norm(pts.mean(0) - [2.0 * side, 0.0]) < 0.1


@pytest.fixture(scope="module")
def fitted():
    from chromoforge.vae import ConformationVAE
    from test_vae import toy_structures
    confs = toy_structures(16, bins=8, seed=3)
    vae = ConformationVAE(latent_channels=16, n_res_blocks=1, hidden=8, epochs=0,
                          random_state=0).fit(confs)
    Z = vae.transform(confs)
    maps = np.repeat(random_maps(2, 8), 8, axis=0)
    gen = CrossDiTGenerator(depth=2, hidden=16, heads=2, encoder_depth=1, epochs=2,
                            batch_size=8, learning_rate=1e-3, random_state=0).fit(Z, maps)
    return gen, vae, Z, maps


def test_generate_ensemble(fitted):
    gen, vae, _, maps = fitted
    hic = HiCMap(maps[0], 0.5, "c0")
    one = generate_ensemble(gen, vae, hic, 1, rng=0, steps=4)
    assert len(one) == 1 and one.condition_id == "c0"
    a = generate_ensemble(gen, vae, hic, 1, rng=1, steps=4)[0]
    b = generate_ensemble(gen, vae, hic, 1, rng=2, steps=4)[0]
    assert drmsd(a, b) > 0
    ens = generate_ensemble(gen, vae, hic, 5, rng=3, steps=4, batch_size=2)
    agg = aggregate_ensemble(ens, 0.5)
    assert agg.is_symmetric() and agg.bins == 8


def test_save_load_same_loss(tmp_path, fitted):
    gen, _, Z, maps = fitted
    rng = np.random.default_rng(0)
    t, eps = rng.uniform(size=len(Z)), rng.standard_normal(Z.shape)
    gen.save(tmp_path / "dit")
    again = CrossDiTGenerator.load(tmp_path / "dit")
    assert again.loss(Z, maps, t, eps).item() == gen.loss(Z, maps, t, eps).item()
    assert again.get_params() == gen.get_params()


def test_history_and_nonfinite_guard(fitted):
    gen = fitted[0]
    assert [r["epoch"] for r in gen.history_] == [0, 1]
    with pytest.raises(InvalidInputError):
        sample_latents(gen.model_, preprocess_maps(random_maps(1, 8)), np.zeros((1, 8, 16)), 0)


@settings(max_examples=10)
@given(st.integers(2, 9), st.integers(0, 1000))
def test_identity_at_init_any_bins(bins, seed):
    cfg, model = tiny(bins=bins, seed=seed)
    h = Tensor(np.random.default_rng(seed).standard_normal((1, bins, 16)))
    z_c, pooled = model.condition_tokens(preprocess_maps(random_maps(1, bins, seed)))
    out = model.backbone(h, z_c, model.t_embed(np.array([0.5])) + pooled)
    assert np.abs(out.data - h.data).max() < 1e-12
