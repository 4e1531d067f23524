"""Contact maps aggregated from conformation ensembles, and the P(s) decay curve."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import InvalidInputError, MissingInputError
from .geometry import Conformation, Ensemble, parse_header

DEFAULT_THRESHOLD = 1.5  # in units of the bond rest length


@dataclass(eq=False)
class HiCMap:
    counts: np.ndarray
    contact_threshold: float = DEFAULT_THRESHOLD
    condition_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise InvalidInputError(f"contact matrix must be square, got {c.shape}")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise InvalidInputError("contact counts must be finite and nonnegative")
        self.counts = c

    @property
    def bins(self) -> int:
        return self.counts.shape[0]

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.counts, self.counts.T))


@dataclass
class PsCurve:
    separations: np.ndarray
    values: np.ndarray


def circular_distance(i, j, B):
    """Genomic separation on a ring of ``B`` bins; works elementwise on arrays."""
    i = np.asarray(i)
    j = np.asarray(j)
    if np.any(i < 0) or np.any(j < 0) or np.any(i >= B) or np.any(j >= B):
        raise InvalidInputError(f"bin index out of range for B={B}")
    d = np.abs(i - j)
    out = np.minimum(d, B - d)
    return int(out) if out.ndim == 0 else out


def separation_matrix(B: int) -> np.ndarray:
    idx = np.arange(B)
    return circular_distance(idx[:, None], idx[None, :], B)


def contacts_from_structure(conf: Conformation, threshold: float) -> np.ndarray:
    """Binary bin-bin contact matrix of one structure.

    Bins ``i`` and ``j`` touch when any present bead of ``i`` (either chain)
    lies closer than ``threshold`` to any present bead of ``j``.  Replicated
    copies are folded onto the bin index of their parental counterpart.
    """
    if not threshold > 0:
        raise InvalidInputError(f"threshold must be positive, got {threshold}")
    masks = conf.masks
    xyz = conf.positions[masks]
    bin_of = np.broadcast_to(np.arange(conf.bins)[None, :, None], masks.shape)[masks]
    close = cdist(xyz, xyz) < threshold
    onehot = np.zeros((len(xyz), conf.bins))
    onehot[np.arange(len(xyz)), bin_of] = 1.0
    out = (onehot.T @ close @ onehot > 0).astype(np.float64)
    np.fill_diagonal(out, 1.0)
    return out


def aggregate_ensemble(ens: Ensemble, threshold: float) -> HiCMap:
    if len(ens) == 0:
        raise InvalidInputError("cannot aggregate an empty ensemble")
    B = ens.members[0].bins
    counts = np.zeros((B, B))
    # sequential reduction in member order keeps the sum reproducible
    for m in ens.members:
        if m.bins != B:
            raise InvalidInputError(f"mixed bin counts in ensemble: {B} vs {m.bins}")
        counts += contacts_from_structure(m, threshold)
    return HiCMap(counts, threshold, ens.condition_id)


def aggregate_normalized(ens: Ensemble, base_threshold: float) -> HiCMap:
    """Aggregate scale-normalised members, each at ``base_threshold / member.scale``.

    Equal to aggregating the unnormalised structures at ``base_threshold``.
    """
    if len(ens) == 0:
        raise InvalidInputError("cannot aggregate an empty ensemble")
    B = ens.members[0].bins
    counts = np.zeros((B, B))
    for m in ens.members:
        if m.bins != B:
            raise InvalidInputError(f"mixed bin counts in ensemble: {B} vs {m.bins}")
        counts += contacts_from_structure(m, rescale_threshold(base_threshold, m.scale))
    return HiCMap(counts, base_threshold, ens.condition_id)


def rescale_threshold(base_threshold: float, mean_scale: float) -> float:
    """Map a contact cutoff from simulation units into scale-normalised space."""
    if not (base_threshold > 0 and mean_scale > 0):
        raise InvalidInputError("threshold and scale must both be positive")
    return base_threshold / mean_scale


def ps_curve(hic: HiCMap) -> PsCurve:
    B = hic.bins
    sep = separation_matrix(B)
    n = np.bincount(sep.ravel(), minlength=B // 2 + 1)
    tot = np.bincount(sep.ravel(), weights=hic.counts.ravel(), minlength=B // 2 + 1)
    return PsCurve(np.arange(B // 2 + 1), tot / n)


# --------------------------------------------------------------------------
# file formats

def format_hic(hic: HiCMap, extra: dict | None = None) -> str:
    header = {"bins": hic.bins, "threshold": repr(float(hic.contact_threshold))}
    if hic.condition_id:
        header["condition_id"] = hic.condition_id
    header.update(extra or {})
    lines = [" ".join(f"{k}={v}" for k, v in header.items())]
    lines += [" ".join(repr(float(v)) for v in row) for row in hic.counts]
    return "\n".join(lines) + "\n"


def parse_hic(text: str) -> HiCMap:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidInputError("empty Hi-C file")
    header = parse_header(lines[0])
    try:
        B = int(header["bins"])
        t = float(header["threshold"])
    except KeyError as exc:
        raise InvalidInputError(f"Hi-C header missing {exc}") from None
    if len(lines) - 1 != B:
        raise InvalidInputError(f"header says {B} bins but file has {len(lines) - 1} rows")
    rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
    if any(len(r) != B for r in rows):
        raise InvalidInputError(f"every Hi-C row must have {B} values")
    meta = {k: v for k, v in header.items() if k not in ("bins", "threshold", "condition_id")}
    return HiCMap(np.array(rows), t, header.get("condition_id", ""), meta)


def write_hic(path, hic: HiCMap, extra: dict | None = None) -> None:
    Path(path).write_text(format_hic(hic, extra))


def read_hic(path) -> HiCMap:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Hi-C file not found: {path}")
    return parse_hic(path.read_text())


def format_ps_csv(curve: PsCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["s", "value"])
    for s, v in zip(curve.separations, curve.values):
        w.writerow([int(s), repr(float(v))])
    return buf.getvalue()
