"""Input validation shared by the estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import InvalidInputError
from .geometry import ROW_FIELDS, Conformation, stack_tokens
from .hic import HiCMap


def check_tokens(X, beads_per_bin=None) -> np.ndarray:
    """Coerce conformations or a token array into a float ``(N, B, 8K)`` array."""
    if isinstance(X, Conformation):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], Conformation):
        X = stack_tokens(X)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] % ROW_FIELDS:
        raise InvalidInputError(
            f"expected (n_samples, bins, {ROW_FIELDS}*beads_per_bin) tokens, got {X.shape}")
    if beads_per_bin is not None and X.shape[2] != ROW_FIELDS * beads_per_bin:
        raise InvalidInputError(
            f"token width {X.shape[2]} does not match beads_per_bin={beads_per_bin}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("tokens contain NaN or inf")
    return X


def check_latents(Z, channels=None) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 2:
        Z = Z[None]
    if Z.ndim != 3:
        raise InvalidInputError(f"latents must be (n_samples, bins, channels), got {Z.shape}")
    if channels is not None and Z.shape[2] != channels:
        raise InvalidInputError(f"latent width {Z.shape[2]} != {channels}")
    if not np.all(np.isfinite(Z)):
        raise InvalidInputError("latents contain NaN or inf")
    return Z


def check_maps(maps, bins=None) -> np.ndarray:
    """Coerce HiCMaps or arrays into a float ``(N, B, B)`` array."""
    if isinstance(maps, HiCMap):
        maps = [maps]
    if isinstance(maps, (list, tuple)):
        maps = [m.counts if isinstance(m, HiCMap) else m for m in maps]
    M = np.asarray(maps, dtype=np.float64)
    if M.ndim == 2:
        M = M[None]
    if M.ndim != 3 or M.shape[1] != M.shape[2]:
        raise InvalidInputError(f"contact maps must be (n, B, B), got {M.shape}")
    if bins is not None and M.shape[1] != bins:
        raise InvalidInputError(f"map has {M.shape[1]} bins, model expects {bins}")
    if np.any(M < 0) or not np.all(np.isfinite(M)):
        raise InvalidInputError("contact maps must be finite and nonnegative")
    return M


def check_normalized(X, tol=1e-3) -> None:
    """Reject token batches whose structures are not centred and unit mean-norm."""
    B, C = X.shape[1], X.shape[2]
    t = X.reshape(X.shape[0], B, C // ROW_FIELDS, ROW_FIELDS)
    pos = np.concatenate([t[..., 0:3], t[..., 4:7]], axis=2).reshape(X.shape[0], -1, 3)
    m = np.concatenate([t[..., 3], t[..., 7]], axis=2).reshape(X.shape[0], -1).astype(bool)
    for p, mk in zip(pos, m):
        v = p[mk]
        if not v.size:
            raise InvalidInputError("structure without valid beads")
        if np.linalg.norm(v.mean(axis=0)) > tol or abs(np.linalg.norm(v, axis=1).mean() - 1) > tol:
            raise InvalidInputError("structures must be centred and scale-normalised first")
