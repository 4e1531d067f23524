"""Length-preserving residual 1-D convolutional VAE over per-bin structure tokens.

Every bin is one token in and one latent token out; there is no
down-sampling, so latent token ``i`` stays aligned with Hi-C bin ``i``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted, check_random_state

from .exceptions import InvalidInputError, NumericalFault
from .geometry import ROW_FIELDS, Conformation, coordinate_activity, rotate_tokens, \
    sample_uniform_rotation, token_channel_masks
from .tensorcore import Adam, Conv1d, LayerNorm, Linear, Module, Tensor, no_grad, scheduled_lr
from .tensorcore import ops as E
from .tensorcore.checkpoint import load_checkpoint, save_checkpoint
from .validation import check_latents, check_normalized, check_tokens

log = logging.getLogger(__name__)

# value obtained on the full-size E. coli data; kept for reference only
REFERENCE_LATENT_SCALE = 1.335256


@dataclass(frozen=True)
class VaeConfig:
    in_channels: int = 16
    hidden: int = 64
    latent_channels: int = 16
    n_res_blocks: int = 4
    kernel_size: int = 3
    lambda_mask: float = 1.0
    lambda_kl: float = 5e-3
    logvar_init: float = 0.0

    def __post_init__(self):
        for k in ("in_channels", "hidden", "latent_channels", "n_res_blocks"):
            if getattr(self, k) < 1:
                raise InvalidInputError(f"{k} must be >= 1")
        if self.lambda_mask < 0 or self.lambda_kl < 0:
            raise InvalidInputError("loss weights must be >= 0")
        if self.in_channels % ROW_FIELDS:
            raise InvalidInputError(f"in_channels must be a multiple of {ROW_FIELDS}")


class ResBlock1d(Module):
    def __init__(self, dim, rng, kernel_size=3):
        self.norm1 = LayerNorm(dim)
        self.conv1 = Conv1d(dim, dim, rng, kernel_size)
        self.norm2 = LayerNorm(dim)
        self.conv2 = Conv1d(dim, dim, rng, kernel_size)

    def forward(self, x):
        h = self.conv1(E.gelu(self.norm1(x)))
        h = self.conv2(E.gelu(self.norm2(h)))
        return x + h


class VaeNet(Module):
    def __init__(self, cfg: VaeConfig, rng):
        H, k = cfg.hidden, cfg.kernel_size
        self.cfg = cfg
        self.enc_in = Conv1d(cfg.in_channels, H, rng, k)
        self.enc_blocks = [ResBlock1d(H, rng, k) for _ in range(cfg.n_res_blocks)]
        self.enc_norm = LayerNorm(H)
        self.enc_out = Conv1d(H, 2 * cfg.latent_channels, rng, k)
        self.enc_skip = Linear(cfg.in_channels, cfg.latent_channels, rng)
        # conv branches start silent and the shortcuts start as the identity
        # when widths match, so training begins from exact reconstruction
        self.enc_out.weight.data[..., :cfg.latent_channels] = 0.0
        self.enc_out.bias.data[cfg.latent_channels:] = cfg.logvar_init
        self.dec_in = Conv1d(cfg.latent_channels, H, rng, k)
        self.dec_blocks = [ResBlock1d(H, rng, k) for _ in range(cfg.n_res_blocks)]
        self.dec_norm = LayerNorm(H)
        self.dec_out = Conv1d(H, cfg.in_channels, rng, k, zero=True)
        self.dec_skip = Linear(cfg.latent_channels, cfg.in_channels, rng)
        if cfg.latent_channels == cfg.in_channels:
            self.enc_skip.weight.data = np.eye(cfg.in_channels)
            self.dec_skip.weight.data = np.eye(cfg.in_channels)


def _input_keep(tokens):
    # absent beads contribute nothing: their coordinates are zeroed before encoding
    keep = coordinate_activity(tokens)
    _, mask_ch = token_channel_masks(tokens.shape[-1] // ROW_FIELDS)
    keep[..., mask_ch] = 1.0
    return keep


def encode(net: VaeNet, tokens):
    """Per-bin posterior ``(mean, logvar)``, each ``(N, B, latent_channels)``."""
    t = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens, dtype=np.float64))
    x = t * _input_keep(t.data)
    h = net.enc_in(x)
    for blk in net.enc_blocks:
        h = blk(h)
    h = net.enc_out(E.gelu(net.enc_norm(h)))
    L = net.cfg.latent_channels
    return h[..., :L] + net.enc_skip(x), h[..., L:]


def reparameterize(mean, logvar, noise):
    """``mean + exp(logvar / 2) * noise`` with externally drawn standard normal noise."""
    return mean + E.exp(E.scale(logvar, 0.5)) * noise


def decode(net: VaeNet, z):
    """Decoded ``(N, B, in_channels)`` tensor in token layout.

    Coordinate channels are unbounded; mask channels hold logits.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.shape[-1] != net.cfg.latent_channels:
        raise InvalidInputError(
            f"latent width {z.shape[-1]} != {net.cfg.latent_channels}")
    h = net.dec_in(z)
    for blk in net.dec_blocks:
        h = blk(h)
    return net.dec_out(E.gelu(net.dec_norm(h))) + net.dec_skip(z)


def vae_loss(tokens, decoded, mean, logvar, cfg: VaeConfig):
    """Masked coordinate MSE + weighted mask BCE + weighted KL.

    The coordinate term averages squared errors over coordinates of present
    beads only, per structure, then over the batch.  The mask term covers
    every position of both chains.  The KL term is summed over latent
    channels and averaged over tokens.
    Returns ``(total, parts)`` where ``parts`` holds float values.
    """
    tokens = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens)
    act = coordinate_activity(tokens)
    n_act = act.reshape(act.shape[0], -1).sum(axis=1)
    if np.any(n_act == 0):
        raise InvalidInputError("structure with no active coordinates")
    coord_ch, mask_ch = token_channel_masks(tokens.shape[-1] // ROW_FIELDS)
    weights = act / n_act[:, None, None] / tokens.shape[0]
    diff = decoded - np.where(act > 0, tokens, 0.0)
    l_coord = E.sum_(diff * diff * weights)
    l_mask = E.bce_with_logits(decoded[..., mask_ch], tokens[..., mask_ch])
    kl_elem = E.scale(mean * mean + E.exp(logvar) - 1.0 - logvar, 0.5)
    l_kl = E.mean(E.sum_(kl_elem, axis=-1))
    total = l_coord + E.scale(l_mask, cfg.lambda_mask) + E.scale(l_kl, cfg.lambda_kl)
    parts = {"total": total.item(), "coord": l_coord.item(), "mask": l_mask.item(),
             "kl": l_kl.item()}
    return total, parts


def calibrate_latent_scale(latent_means) -> float:
    """Reciprocal standard deviation of every latent-mean component."""
    z = np.asarray(latent_means, dtype=np.float64)
    sd = z.std()
    if not sd > 0:
        raise InvalidInputError("latents have zero spread; cannot calibrate scale")
    return float(1.0 / sd)


def tokens_to_conformations(decoded: np.ndarray, beads_per_bin: int):
    """Threshold mask logits at probability 0.5 and build conformations."""
    out = []
    _, mask_ch = token_channel_masks(beads_per_bin)
    for t in np.asarray(decoded):
        t = t.copy()
        mk = (t[:, mask_ch] > 0).astype(np.float64)
        t[:, mask_ch] = mk
        t[:, 3::ROW_FIELDS] = 1.0  # parental chain is always present
        c = Conformation.from_tokens(t, beads_per_bin)
        out.append(c)
    return out


class ConformationVAE(TransformerMixin, BaseEstimator):
    """Fit a VAE on normalised conformations and map them to scaled latents.

    ``transform`` returns latent means multiplied by the calibrated
    ``latent_scale_``; ``inverse_transform`` undoes the scaling and decodes.
    """

    def __init__(self, hidden=64, latent_channels=16, n_res_blocks=4, kernel_size=3,
                 lambda_mask=1.0, lambda_kl=5e-3, learning_rate=1e-4, epochs=50,
                 batch_size=32, rotate=True, grad_clip=1.0, logvar_init=0.0, lr_schedule="constant",
                 random_state=None):
        self.hidden = hidden
        self.latent_channels = latent_channels
        self.n_res_blocks = n_res_blocks
        self.kernel_size = kernel_size
        self.lambda_mask = lambda_mask
        self.lambda_kl = lambda_kl
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.rotate = rotate
        self.grad_clip = grad_clip
        self.logvar_init = logvar_init
        self.lr_schedule = lr_schedule
        self.random_state = random_state

    def _config(self, in_channels):
        return VaeConfig(in_channels, self.hidden, self.latent_channels, self.n_res_blocks,
                         self.kernel_size, self.lambda_mask, self.lambda_kl, self.logvar_init)

    def _init_model(self, in_channels, rng):
        self.config_ = self._config(in_channels)
        self.model_ = VaeNet(self.config_, rng)
        self.beads_per_bin_ = in_channels // ROW_FIELDS

    def fit(self, X, y=None, X_val=None, callback=None):
        X = check_tokens(X)
        check_normalized(X)
        rng = check_random_state(self.random_state)
        gen = np.random.default_rng(rng.randint(2 ** 31))
        self._init_model(X.shape[2], gen)
        X_val = None if X_val is None else check_tokens(X_val, self.beads_per_bin_)
        opt = Adam(self.model_.parameters(), lr=self.learning_rate)
        self.history_ = []
        n = X.shape[0]
        total_steps = self.epochs * -(-n // self.batch_size)
        step = 0
        for epoch in range(self.epochs):
            order = gen.permutation(n)
            sums = {"total": 0.0, "coord": 0.0, "mask": 0.0, "kl": 0.0}
            n_batches = 0
            for start in range(0, n, self.batch_size):
                batch = X[order[start:start + self.batch_size]]
                if self.rotate:
                    batch = np.stack([rotate_tokens(t, sample_uniform_rotation(gen)) for t in batch])
                noise = gen.standard_normal(batch.shape[:2] + (self.latent_channels,))
                total, parts = self._loss(batch, noise)
                if not np.isfinite(parts["total"]):
                    raise NumericalFault("VAE loss diverged", epoch)
                opt.zero_grad()
                total.backward()
                opt.clip_grad_norm(self.grad_clip)
                opt.lr = scheduled_lr(self.learning_rate, step, total_steps, self.lr_schedule)
                opt.step()
                step += 1
                for k in sums:
                    sums[k] += parts[k]
                n_batches += 1
            row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
            if X_val is not None:
                row["val_coord"] = self.reconstruction_error(X_val)
            self.history_.append(row)
            if callback is not None:
                callback(row)
            log.info("vae epoch %d %s", epoch, row)
        self.latent_scale_ = calibrate_latent_scale(self.encode_mean(X))
        return self

    def _loss(self, batch, noise):
        mean, logvar = encode(self.model_, batch)
        z = reparameterize(mean, logvar, noise)
        dec = decode(self.model_, z)
        return vae_loss(batch, dec, mean, logvar, self.config_)

    def loss(self, X, noise=None, rng=None):
        """Loss on a batch (graph retained, for gradient checks)."""
        check_is_fitted(self, "model_")
        X = check_tokens(X, self.beads_per_bin_)
        if noise is None:
            noise = np.random.default_rng(rng).standard_normal(X.shape[:2] + (self.latent_channels,))
        return self._loss(X, noise)

    def encode_mean(self, X, batch_size=128):
        check_is_fitted(self, "model_")
        X = check_tokens(X, self.beads_per_bin_)
        out = []
        with no_grad():
            for s in range(0, len(X), batch_size):
                out.append(encode(self.model_, X[s:s + batch_size])[0].data)
        return np.concatenate(out)

    def decode_latents(self, Z, batch_size=128):
        """Raw (unscaled) latents to decoded token arrays."""
        check_is_fitted(self, "model_")
        Z = check_latents(Z, self.latent_channels)
        out = []
        with no_grad():
            for s in range(0, len(Z), batch_size):
                out.append(decode(self.model_, Z[s:s + batch_size]).data)
        return np.concatenate(out)

    def transform(self, X):
        check_is_fitted(self, "latent_scale_")
        return self.encode_mean(X) * self.latent_scale_

    def inverse_transform(self, Z):
        check_is_fitted(self, "latent_scale_")
        dec = self.decode_latents(np.asarray(Z) / self.latent_scale_)
        return tokens_to_conformations(dec, self.beads_per_bin_)

    def reconstruction_error(self, X):
        """Masked coordinate MSE of ``decode(encode_mean(X))``."""
        X = check_tokens(X, self.beads_per_bin_)
        dec = self.decode_latents(self.encode_mean(X))
        act = coordinate_activity(X)
        per = ((dec - X) ** 2 * act).reshape(len(X), -1).sum(1) / act.reshape(len(X), -1).sum(1)
        return float(per.mean())

    def save(self, directory, extra=None):
        check_is_fitted(self, "latent_scale_")
        meta = {"latent_scale": self.latent_scale_, "beads_per_bin": self.beads_per_bin_,
                "params": self.get_params(), "history": self.history_}
        meta.update(extra or {})
        return save_checkpoint(directory, self.model_.state_dict(), asdict(self.config_), meta)

    @classmethod
    def load(cls, directory):
        state, config, extra = load_checkpoint(directory)
        est = cls(**extra["params"])
        est._init_model(config["in_channels"], np.random.default_rng(0))
        est.model_.load_state_dict(state)
        est.latent_scale_ = float(extra["latent_scale"])
        est.history_ = extra.get("history", [])
        return est
