"""Hi-C conditioned latent diffusion transformer trained by flow matching.

Conventions used by both the loss and the sampler: noise sits at ``t = 1``,
``z_t = (1 - t) z0 + t eps`` and the network predicts the velocity
``eps - z0``.  Sampling integrates from ``t = 1`` down to ``t = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidInputError, NumericalFault
from .geometry import Ensemble
from .hic import HiCMap
from .tensorcore import Adam, LayerNorm, Linear, Mlp, Module, MultiHeadAttention, Parameter, \
    Tensor, load_checkpoint, no_grad, save_checkpoint, scheduled_lr
from .tensorcore import ops as E
from .validation import check_latents, check_maps

log = logging.getLogger(__name__)

TIME_SCALE = 1000.0


@dataclass(frozen=True)
class DitConfig:
    bins: int = 64
    latent_channels: int = 16
    depth: int = 4
    hidden: int = 64
    heads: int = 4
    encoder_depth: int = 2
    mlp_ratio: float = 4.0
    cond_dropout_prob: float = 0.1
    time_features: int = 64

    def __post_init__(self):
        if self.hidden % self.heads:
            raise InvalidInputError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if min(self.bins, self.latent_channels, self.depth, self.hidden, self.heads) < 1:
            raise InvalidInputError("bins, channels, depth, hidden and heads must be positive")
        if self.encoder_depth < 0:
            raise InvalidInputError("encoder_depth must be >= 0")
        if not 0.0 <= self.cond_dropout_prob <= 1.0:
            raise InvalidInputError("cond_dropout_prob must lie in [0, 1]")

    @property
    def mlp_hidden(self):
        return int(round(self.hidden * self.mlp_ratio))


# reference sizes of the published family; representable but never trained here
PRESETS = {"S": dict(depth=12, hidden=384, heads=6), "L": dict(depth=24, hidden=1024, heads=16)}


def preprocess_maps(maps) -> np.ndarray:
    """log1p then per-map standardisation."""
    M = np.log1p(check_maps(maps))
    mu = M.mean(axis=(1, 2), keepdims=True)
    sd = M.std(axis=(1, 2), keepdims=True)
    return (M - mu) / np.where(sd > 0, sd, 1.0)


def _modulate(x, shift, scale):
    # shift/scale are (N, hidden); broadcast over tokens
    return x * (E.reshape(scale, (scale.shape[0], 1, -1)) + 1.0) \
        + E.reshape(shift, (shift.shape[0], 1, -1))


def _gated(gate, y):
    return E.reshape(gate, (gate.shape[0], 1, -1)) * y


class EncoderBlock(Module):
    """Pre-LN transformer block for the Hi-C row tokens."""

    def __init__(self, cfg: DitConfig, rng):
        self.norm1 = LayerNorm(cfg.hidden)
        self.attn = MultiHeadAttention(cfg.hidden, cfg.heads, rng)
        self.norm2 = LayerNorm(cfg.hidden)
        self.mlp = Mlp(cfg.hidden, cfg.mlp_hidden, rng)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class HicEncoder(Module):
    """Rows of the map become tokens; columns are their features."""

    def __init__(self, cfg: DitConfig, rng):
        self.proj = Linear(cfg.bins, cfg.hidden, rng)
        self.pos = Parameter(0.02 * rng.standard_normal((cfg.bins, cfg.hidden)))
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.encoder_depth)]
        self.norm = LayerNorm(cfg.hidden)

    def forward(self, prepped):
        h = self.proj(Tensor(prepped)) + self.pos
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h)


class TimestepEmbedder(Module):
    def __init__(self, cfg: DitConfig, rng):
        self.n_features = cfg.time_features
        self.mlp = Mlp(cfg.time_features, cfg.hidden, rng, out=cfg.hidden, act="silu")

    def forward(self, t):
        t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64))
        return self.mlp(E.sinusoidal_position_features(E.scale(t, TIME_SCALE), self.n_features))


class DitBlock(Module):
    """AdaLN-Zero self-attention, cross-attention to condition tokens, feed-forward.

    All three residual branches are gated by zero-initialised modulation, so a
    fresh block returns its input unchanged.  The condition tokens are only
    read (keys and values), never written.
    """

    def __init__(self, cfg: DitConfig, rng):
        H = cfg.hidden
        self.norm1 = LayerNorm(H, affine=False)
        self.attn = MultiHeadAttention(H, cfg.heads, rng)
        self.norm2 = LayerNorm(H, affine=False)
        self.cross = MultiHeadAttention(H, cfg.heads, rng)
        self.norm3 = LayerNorm(H, affine=False)
        self.mlp = Mlp(H, cfg.mlp_hidden, rng)
        self.ada = Linear(H, 9 * H, rng, zero=True)
        self.hidden = H

    def forward(self, x, z_c, c):
        H = self.hidden
        m = self.ada(E.silu(c))
        s1, k1, g1, s2, k2, g2, s3, k3, g3 = (m[:, i * H:(i + 1) * H] for i in range(9))
        x = x + _gated(g1, self.attn(_modulate(self.norm1(x), s1, k1)))
        x = x + _gated(g2, self.cross(_modulate(self.norm2(x), s2, k2), z_c))
        return x + _gated(g3, self.mlp(_modulate(self.norm3(x), s3, k3)))


class FinalLayer(Module):
    def __init__(self, cfg: DitConfig, rng):
        self.norm = LayerNorm(cfg.hidden, affine=False)
        self.ada = Linear(cfg.hidden, 2 * cfg.hidden, rng, zero=True)
        self.out = Linear(cfg.hidden, cfg.latent_channels, rng, zero=True)
        self.hidden = cfg.hidden

    def forward(self, x, c):
        m = self.ada(E.silu(c))
        return self.out(_modulate(self.norm(x), m[:, :self.hidden], m[:, self.hidden:]))


class CrossDiT(Module):
    def __init__(self, cfg: DitConfig, rng):
        self.cfg = cfg
        self.encoder = HicEncoder(cfg, rng)
        self.null_tokens = Parameter(0.02 * rng.standard_normal((cfg.bins, cfg.hidden)))
        self.t_embed = TimestepEmbedder(cfg, rng)
        self.x_embed = Linear(cfg.latent_channels, cfg.hidden, rng)
        self.x_pos = Parameter(0.02 * rng.standard_normal((cfg.bins, cfg.hidden)))
        self.blocks = [DitBlock(cfg, rng) for _ in range(cfg.depth)]
        self.final = FinalLayer(cfg, rng)

    def condition_tokens(self, prepped, drop=None):
        """``(z_c, pooled)`` for preprocessed maps; ``drop`` marks samples given the null condition."""
        z = self.encoder(prepped)
        if drop is not None:
            d = np.asarray(drop, dtype=np.float64).reshape(-1, 1, 1)
            if d.any():
                z = z * (1.0 - d) + E.expand(self.null_tokens, z.shape) * d
        return z, E.mean(z, axis=1)

    def null_condition(self, n):
        z = E.expand(self.null_tokens, (n,) + self.null_tokens.shape)
        return z, E.mean(z, axis=1)

    def backbone(self, h, z_c, c):
        for blk in self.blocks:
            h = blk(h, z_c, c)
        return h

    def forward(self, z_t, t, z_c, pooled):
        """Velocity for latents ``z_t`` ``(N, B, C)`` at times ``t`` ``(N,)``."""
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        if z_t.shape[1] != z_c.shape[1]:
            raise InvalidInputError(
                f"latent length {z_t.shape[1]} != condition length {z_c.shape[1]}")
        c = self.t_embed(t) + pooled
        h = self.x_embed(z_t) + self.x_pos
        return self.final(self.backbone(h, z_c, c), c)


def interpolate(z0, eps, t):
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1)
    return (1.0 - t) * z0 + t * eps


def flow_matching_loss(model: CrossDiT, z0, prepped, t, eps, drop=None, map_index=None):
    """Mean squared velocity error.

    ``prepped`` holds preprocessed maps; with ``map_index`` each sample
    picks its map from that array, so shared maps are encoded once.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z_t = interpolate(z0, eps, t)
    target = eps - z0
    if map_index is None:
        z_c, _ = model.condition_tokens(prepped)
    else:
        z_c, _ = model.condition_tokens(prepped)
        z_c = z_c[np.asarray(map_index)]
    if drop is not None and np.any(drop):
        d = np.asarray(drop, dtype=np.float64).reshape(-1, 1, 1)
        z_c = z_c * (1.0 - d) + E.expand(model.null_tokens, z_c.shape) * d
    pooled = E.mean(z_c, axis=1)
    v = model(z_t, t, z_c, pooled)
    diff = v - target
    return E.mean(diff * diff)


def guided_velocity(v_cond, v_uncond, cfg_scale):
    # written so that cfg_scale = 1 reproduces v_cond exactly
    return cfg_scale * v_cond + (1.0 - cfg_scale) * v_uncond


def sample_latents(model: CrossDiT, prepped, noise, steps=50, cfg_scale=1.0,
                   conditional_only=False):
    """Euler integration of the guided velocity field from ``t = 1`` to ``t = 0``.

    ``prepped`` is one preprocessed map per sample ``(N, B, B)``; ``noise``
    is the starting point ``(N, B, C)``.  Returns scaled latents.
    """
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    z = np.array(noise, dtype=np.float64)
    n = z.shape[0]
    dt = 1.0 / steps
    with no_grad():
        z_c, pooled = model.condition_tokens(prepped)
        if z_c.shape[0] == 1 and n > 1:
            z_c, pooled = E.expand(z_c, (n,) + z_c.shape[1:]), E.expand(pooled, (n, pooled.shape[1]))
        z_u, pooled_u = model.null_condition(n)
        for i in range(steps):
            t = np.full(n, 1.0 - i * dt)
            v = model(z, t, z_c, pooled).data
            if not conditional_only:
                v_u = model(z, t, z_u, pooled_u).data
                v = guided_velocity(v, v_u, cfg_scale)
            z = z - dt * v
            if not np.all(np.isfinite(z)):
                raise NumericalFault("non-finite latent during sampling", i)
    return z


class CrossDiTGenerator(BaseEstimator):
    """Conditional generator of scaled VAE latents given Hi-C maps.

    ``fit(Z, maps)`` takes one latent sequence and one map per sample; maps
    may repeat (every member of an ensemble shares its map).
    """

    def __init__(self, depth=4, hidden=64, heads=4, encoder_depth=2, mlp_ratio=4.0,
                 cond_dropout_prob=0.1, learning_rate=1e-4, epochs=100, batch_size=8,
                 grad_clip=1.0, lr_schedule="constant", sampling_steps=50, cfg_scale=1.0,
                 random_state=None):
        self.depth = depth
        self.hidden = hidden
        self.heads = heads
        self.encoder_depth = encoder_depth
        self.mlp_ratio = mlp_ratio
        self.cond_dropout_prob = cond_dropout_prob
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.lr_schedule = lr_schedule
        self.sampling_steps = sampling_steps
        self.cfg_scale = cfg_scale
        self.random_state = random_state

    def _init_model(self, bins, channels, rng):
        self.config_ = DitConfig(bins, channels, self.depth, self.hidden, self.heads,
                                 self.encoder_depth, self.mlp_ratio, self.cond_dropout_prob)
        self.model_ = CrossDiT(self.config_, rng)

    def fit(self, Z, maps, callback=None):
        Z = check_latents(Z)
        M = check_maps(maps, Z.shape[1])
        if len(M) != len(Z):
            raise InvalidInputError(f"{len(Z)} latents but {len(M)} maps")
        uniq, index = np.unique(M.reshape(len(M), -1), axis=0, return_inverse=True)
        prepped = preprocess_maps(uniq.reshape(-1, M.shape[1], M.shape[2]))
        index = index.ravel()
        rng = check_random_state(self.random_state)
        gen = np.random.default_rng(rng.randint(2 ** 31))
        self._init_model(Z.shape[1], Z.shape[2], gen)
        opt = Adam(self.model_.parameters(), lr=self.learning_rate)
        self.history_ = []
        n = len(Z)
        total_steps = self.epochs * -(-n // self.batch_size)
        step = 0
        for epoch in range(self.epochs):
            order = gen.permutation(n)
            tot, nb = 0.0, 0
            for s in range(0, n, self.batch_size):
                idx = order[s:s + self.batch_size]
                z0 = Z[idx]
                t = gen.uniform(0.0, 1.0, len(idx))
                eps = gen.standard_normal(z0.shape)
                drop = gen.uniform(size=len(idx)) < self.cond_dropout_prob
                used, local = np.unique(index[idx], return_inverse=True)
                loss = flow_matching_loss(self.model_, z0, prepped[used], t, eps, drop,
                                          local.ravel())
                if not np.isfinite(loss.item()):
                    raise NumericalFault("flow-matching loss diverged", epoch)
                opt.zero_grad()
                loss.backward()
                opt.clip_grad_norm(self.grad_clip)
                opt.lr = scheduled_lr(self.learning_rate, step, total_steps, self.lr_schedule)
                opt.step()
                step += 1
                tot += loss.item()
                nb += 1
            row = {"epoch": epoch, "loss": tot / nb}
            self.history_.append(row)
            if callback is not None:
                callback(row)
            log.info("dit epoch %d loss %.6f", epoch, row["loss"])
        return self

    def loss(self, Z, maps, t, eps, drop=None):
        """Flow-matching loss at explicit ``t``/``eps``/``drop`` (graph retained)."""
        check_is_fitted(self, "model_")
        return flow_matching_loss(self.model_, check_latents(Z), preprocess_maps(maps), t, eps,
                                  drop)

    def sample(self, hic, count, rng=None, steps=None, cfg_scale=None, conditional_only=False):
        """``count`` scaled latents for one map."""
        check_is_fitted(self, "model_")
        counts = hic.counts if isinstance(hic, HiCMap) else hic
        prepped = preprocess_maps(check_maps(counts, self.config_.bins))
        gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        noise = gen.standard_normal((count, self.config_.bins, self.config_.latent_channels))
        return sample_latents(self.model_, prepped, noise,
                              self.sampling_steps if steps is None else steps,
                              self.cfg_scale if cfg_scale is None else cfg_scale,
                              conditional_only)

    def save(self, directory, extra=None):
        check_is_fitted(self, "model_")
        meta = {"params": self.get_params(), "history": getattr(self, "history_", [])}
        meta.update(extra or {})
        return save_checkpoint(directory, self.model_.state_dict(), asdict(self.config_), meta)

    @classmethod
    def load(cls, directory):
        state, config, extra = load_checkpoint(directory)
        est = cls(**extra["params"])
        est.config_ = DitConfig(**config)
        est.model_ = CrossDiT(est.config_, np.random.default_rng(0))
        est.model_.load_state_dict(state)
        est.history_ = extra.get("history", [])
        return est


def generate_ensemble(generator: CrossDiTGenerator, vae, hic: HiCMap, count: int, rng=None,
                      steps=None, cfg_scale=None, batch_size=64) -> Ensemble:
    """Sample, decode and threshold ``count`` structures for one map."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    members = []
    for s in range(0, count, batch_size):
        z = generator.sample(hic, min(batch_size, count - s), gen, steps, cfg_scale)
        members.extend(vae.inverse_transform(z))
    cid = hic.condition_id if isinstance(hic, HiCMap) else ""
    return Ensemble(members, cid, {"generated": True})
