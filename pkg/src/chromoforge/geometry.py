"""Conformation containers, preprocessing transforms and the structure file format.

A conformation holds two chains of ``B x K`` beads (``K`` beads per Hi-C bin):
the parental chain, which is always present, and the replicated chain whose
beads exist only where ``mask_replicated`` is 1.  The per-bin tabular layout
interleaves both chains bead by bead::

    [x_p, y_p, z_p, m_p, x_r, y_r, z_r, m_r] * K

so a bin is a token of ``8 * K`` channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import InvalidInputError, MissingInputError

ROW_FIELDS = 8


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Conformation:
    coords_parental: np.ndarray
    coords_replicated: np.ndarray
    mask_parental: np.ndarray
    mask_replicated: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        cp = _frozen(self.coords_parental)
        cr = _frozen(self.coords_replicated)
        mp = _frozen(self.mask_parental, np.int8)
        mr = _frozen(self.mask_replicated, np.int8)
        if cp.ndim != 3 or cp.shape[2] != 3:
            raise InvalidInputError(f"coords_parental must be (B, K, 3), got {cp.shape}")
        if cr.shape != cp.shape:
            raise InvalidInputError(
                f"coords_replicated shape {cr.shape} != coords_parental shape {cp.shape}")
        if mp.shape != cp.shape[:2] or mr.shape != cp.shape[:2]:
            raise InvalidInputError(
                f"mask shapes {mp.shape}, {mr.shape} must equal {cp.shape[:2]}")
        if not np.all(mp == 1):
            raise InvalidInputError("mask_parental must be all ones")
        if not np.all((mr == 0) | (mr == 1)):
            raise InvalidInputError("mask_replicated must be binary")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidInputError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "coords_parental", cp)
        object.__setattr__(self, "coords_replicated", cr)
        object.__setattr__(self, "mask_parental", mp)
        object.__setattr__(self, "mask_replicated", mr)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def from_arrays(cls, positions, masks, scale=1.0):
        """Build from stacked ``(2, B, K, 3)`` positions and ``(2, B, K)`` masks."""
        positions = np.asarray(positions, dtype=np.float64)
        masks = np.asarray(masks)
        return cls(positions[0], positions[1], masks[0], masks[1], scale)

    @classmethod
    def parental_only(cls, coords, scale=1.0):
        coords = np.asarray(coords, dtype=np.float64)
        shape = coords.shape[:2]
        return cls(coords, np.zeros_like(coords), np.ones(shape), np.zeros(shape), scale)

    @property
    def bins(self) -> int:
        return self.coords_parental.shape[0]

    @property
    def beads_per_bin(self) -> int:
        return self.coords_parental.shape[1]

    @property
    def positions(self) -> np.ndarray:
        """Stacked ``(2, B, K, 3)`` coordinates, parental first."""
        return np.stack([self.coords_parental, self.coords_replicated])

    @property
    def masks(self) -> np.ndarray:
        return np.stack([self.mask_parental, self.mask_replicated]).astype(bool)

    @property
    def n_valid(self) -> int:
        return int(self.masks.sum())

    def valid_coords(self) -> np.ndarray:
        """``(n_valid, 3)`` coordinates of present beads, parental chain first."""
        return self.positions[self.masks]

    def with_positions(self, positions, scale=None) -> "Conformation":
        positions = np.asarray(positions, dtype=np.float64)
        return replace(self, coords_parental=positions[0], coords_replicated=positions[1],
                       scale=self.scale if scale is None else scale)

    def to_tokens(self) -> np.ndarray:
        """The ``(B, 8K)`` per-bin row layout."""
        B, K = self.bins, self.beads_per_bin
        out = np.empty((B, K, ROW_FIELDS))
        out[..., 0:3] = self.coords_parental
        out[..., 3] = self.mask_parental
        out[..., 4:7] = self.coords_replicated
        out[..., 7] = self.mask_replicated
        return out.reshape(B, K * ROW_FIELDS)

    @classmethod
    def from_tokens(cls, tokens, beads_per_bin=2, scale=1.0) -> "Conformation":
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[1] != ROW_FIELDS * beads_per_bin:
            raise InvalidInputError(
                f"expected rows of {ROW_FIELDS * beads_per_bin} values, got shape {tokens.shape}")
        t = tokens.reshape(tokens.shape[0], beads_per_bin, ROW_FIELDS)
        return cls(t[..., 0:3], t[..., 4:7], t[..., 3], t[..., 7], scale)

    def allclose(self, other, atol=0.0) -> bool:
        return (self.positions.shape == other.positions.shape
                and np.array_equal(self.masks, other.masks)
                and np.allclose(self.positions[self.masks], other.positions[other.masks],
                                rtol=0, atol=atol))


@dataclass
class Ensemble:
    members: list
    condition_id: str = "cond"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.members = list(self.members)
        if self.members:
            shapes = {(m.bins, m.beads_per_bin) for m in self.members}
            if len(shapes) > 1:
                raise InvalidInputError(f"ensemble members have mixed layouts: {sorted(shapes)}")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    @property
    def bins(self) -> int:
        return self.members[0].bins

    def validate(self, min_members=2):
        if len(self.members) < min_members:
            raise InvalidInputError(
                f"ensemble {self.condition_id!r} has {len(self.members)} members, "
                f"need at least {min_members}")
        return self


# --------------------------------------------------------------------------
# preprocessing

def center(conf: Conformation) -> Conformation:
    """Translate so the centroid of valid beads sits at the origin."""
    masks = conf.masks
    if not masks.any():
        raise InvalidInputError("conformation has no valid beads")
    pos = conf.positions
    centroid = pos[masks].mean(axis=0)
    return conf.with_positions(pos - centroid)


def scale_normalize(conf: Conformation) -> Conformation:
    """Divide coordinates by the mean norm of valid beads.

    The divisor is multiplied into ``scale`` so the original size can be
    recovered (``scale`` of a raw conformation is 1).
    """
    pos = conf.positions
    norms = np.linalg.norm(pos[conf.masks], axis=1)
    s = norms.mean() if norms.size else 0.0
    if not s > 0:
        raise InvalidInputError("cannot scale-normalize a conformation with all beads at the origin")
    return conf.with_positions(pos / s, scale=conf.scale * s)


def normalize(conf: Conformation) -> Conformation:
    return scale_normalize(center(conf))


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix of the unit quaternion ``(w, x, y, z)``."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise InvalidInputError("zero quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sample_uniform_rotation(rng: np.random.Generator) -> np.ndarray:
    # an isotropic Gaussian 4-vector normalised is uniform on S^3, hence Haar on SO(3)
    while True:
        q = rng.standard_normal(4)
        if np.linalg.norm(q) > 1e-12:
            return quaternion_to_matrix(q)


def check_rotation(R, tol=1e-9) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidInputError(f"rotation must be 3x3, got {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1) > tol:
        raise InvalidInputError("matrix is not a proper rotation")
    return R


def apply_rotation(conf: Conformation, R) -> Conformation:
    R = check_rotation(R)
    return conf.with_positions(conf.positions @ R.T)


def random_rotate(conf: Conformation, rng: np.random.Generator) -> Conformation:
    """Training-time augmentation only."""
    return apply_rotation(conf, sample_uniform_rotation(rng))


# --------------------------------------------------------------------------
# tabular I/O

def pack_rows(conf: Conformation) -> np.ndarray:
    return conf.to_tokens()


def unpack_rows(table, beads_per_bin=None, scale=1.0) -> Conformation:
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] % ROW_FIELDS:
        raise InvalidInputError(f"row width must be a multiple of {ROW_FIELDS}, got shape {table.shape}")
    K = table.shape[1] // ROW_FIELDS if beads_per_bin is None else beads_per_bin
    masks = table.reshape(table.shape[0], -1, ROW_FIELDS)[..., [3, 7]]
    if not np.all((masks == 0) | (masks == 1)):
        raise InvalidInputError("mask columns must hold 0 or 1")
    return Conformation.from_tokens(table, K, scale)


def _fmt(v: float) -> str:
    # repr is the shortest string that round-trips the double exactly
    return repr(float(v))


def format_structure(conf: Conformation, extra: dict | None = None) -> str:
    header = {"bins": conf.bins, "beads_per_bin": conf.beads_per_bin, "scale": _fmt(conf.scale)}
    header.update(extra or {})
    lines = [" ".join(f"{k}={v}" for k, v in header.items())]
    rows = pack_rows(conf)
    for row in rows:
        vals = row.reshape(-1, ROW_FIELDS)
        parts = []
        for bead in vals:
            parts += [_fmt(bead[0]), _fmt(bead[1]), _fmt(bead[2]), str(int(bead[3])),
                      _fmt(bead[4]), _fmt(bead[5]), _fmt(bead[6]), str(int(bead[7]))]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_header(line: str) -> dict:
    out = {}
    for tok in line.split():
        if "=" not in tok:
            raise InvalidInputError(f"malformed header token {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def parse_structure(text: str) -> Conformation:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidInputError("empty structure file")
    header = parse_header(lines[0])
    try:
        B = int(header["bins"])
        K = int(header["beads_per_bin"])
    except KeyError as exc:
        raise InvalidInputError(f"structure header missing {exc}") from None
    scale = float(header.get("scale", 1.0))
    rows = lines[1:]
    if len(rows) != B:
        raise InvalidInputError(f"header says {B} bins but file has {len(rows)} rows")
    table = []
    for n, ln in enumerate(rows, start=2):
        vals = ln.split()
        if len(vals) != ROW_FIELDS * K:
            raise InvalidInputError(f"line {n}: expected {ROW_FIELDS * K} values, got {len(vals)}")
        table.append([float(v) for v in vals])
    return unpack_rows(np.array(table), K, scale)


def write_structure(path, conf: Conformation, extra: dict | None = None) -> None:
    Path(path).write_text(format_structure(conf, extra))


def read_structure(path) -> Conformation:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"structure file not found: {path}")
    return parse_structure(path.read_text())


def write_ensemble(directory, ens: Ensemble, extra: dict | None = None) -> Path:
    """Write members as ``member_XXXX.txt`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, m in enumerate(ens.members):
        name = f"member_{i:04d}.txt"
        write_structure(directory / name, m, extra)
        names.append(name)
    manifest = {"condition_id": ens.condition_id, "members": names,
                "metadata": ens.metadata}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def read_ensemble(directory) -> Ensemble:
    directory = Path(directory)
    mf = directory / "manifest.json"
    if not mf.exists():
        raise MissingInputError(f"ensemble manifest not found: {mf}")
    manifest = json.loads(mf.read_text())
    members = [read_structure(directory / p) for p in manifest["members"]]
    return Ensemble(members, manifest["condition_id"], manifest.get("metadata", {}))


def stack_tokens(confs: Sequence[Conformation]) -> np.ndarray:
    return np.stack([c.to_tokens() for c in confs])




def token_channel_masks(beads_per_bin: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of coordinate channels and of mask channels in a token row."""
    idx = np.arange(ROW_FIELDS * beads_per_bin).reshape(beads_per_bin, ROW_FIELDS)
    coord = np.concatenate([idx[:, 0:3], idx[:, 4:7]], axis=1).ravel()
    mask = idx[:, [3, 7]].ravel()
    return np.sort(coord), np.sort(mask)


def coordinate_activity(tokens) -> np.ndarray:
    """1 on coordinate channels of present beads, 0 on absent beads and mask channels."""
    t = np.asarray(tokens, dtype=np.float64)
    shape = t.shape
    r = t.reshape(shape[:-1] + (shape[-1] // ROW_FIELDS, ROW_FIELDS))
    act = np.zeros_like(r)
    act[..., 0:3] = (r[..., 3:4] > 0.5)
    act[..., 4:7] = (r[..., 7:8] > 0.5)
    return act.reshape(shape)


def rotate_tokens(tokens, R) -> np.ndarray:
    """Rotate every bead coordinate of a token array; masks pass through."""
    R = check_rotation(R)
    t = np.array(tokens, dtype=np.float64)
    shape = t.shape
    r = t.reshape(shape[:-1] + (shape[-1] // ROW_FIELDS, ROW_FIELDS))
    r[..., 0:3] = r[..., 0:3] @ R.T
    r[..., 4:7] = r[..., 4:7] @ R.T
    return r.reshape(shape)
