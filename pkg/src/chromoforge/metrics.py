"""Map similarity (SCC, full-matrix PCC) and ensemble diversity (dRMSD) metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .exceptions import InvalidInputError
from .geometry import Conformation, Ensemble
from .hic import HiCMap, separation_matrix


@dataclass(frozen=True)
class SccConfig:
    smoothing_radius: int = 1
    max_stratum: int | None = None
    min_stratum: int = 1

    def strata(self, B):
        hi = B // 2 if self.max_stratum is None else self.max_stratum
        if self.smoothing_radius < 0:
            raise InvalidInputError("smoothing radius must be >= 0")
        if not 0 <= self.min_stratum <= hi <= B // 2:
            raise InvalidInputError(
                f"need 0 <= min_stratum <= max_stratum <= {B // 2}, got "
                f"{self.min_stratum}, {hi}")
        return range(self.min_stratum, hi + 1)


@dataclass(frozen=True)
class DiversityReport:
    mean_pairwise_drmsd: float
    mean_bond_length: float

    @property
    def ratio(self) -> float:
        return self.mean_pairwise_drmsd / self.mean_bond_length


def _counts(m):
    return m.counts if isinstance(m, HiCMap) else np.asarray(m, dtype=np.float64)


def smooth_map(hic, h: int):
    """Mean over a ``(2h+1)^2`` window with wrap-around indexing on both axes."""
    if h < 0:
        raise InvalidInputError("smoothing radius must be >= 0")
    c = _counts(hic)
    out = c.copy() if h == 0 else uniform_filter(c, size=2 * h + 1, mode="wrap")
    if isinstance(hic, HiCMap):
        return HiCMap(out, hic.contact_threshold, hic.condition_id, dict(hic.metadata))
    return out


def scc(a, b, cfg: SccConfig = SccConfig()) -> float:
    """Stratum-adjusted correlation of two maps on a circular genome.

    Strata are sets of unordered bin pairs with equal circular separation.
    Each stratum contributes its Pearson correlation weighted by
    ``n_s * sd_a * sd_b``; strata where either map is constant are skipped.
    """
    A = smooth_map(_counts(a), cfg.smoothing_radius)
    Bm = smooth_map(_counts(b), cfg.smoothing_radius)
    if A.shape != Bm.shape:
        raise InvalidInputError(f"map shapes differ: {A.shape} vs {Bm.shape}")
    n_bins = A.shape[0]
    sep = separation_matrix(n_bins)
    iu = np.triu_indices(n_bins, k=0)
    sep_u, av, bv = sep[iu], A[iu], Bm[iu]
    num = den = 0.0
    for s in cfg.strata(n_bins):
        sel = sep_u == s
        x, y = av[sel], bv[sel]
        n = x.size
        dx, dy = x - x.mean(), y - y.mean()
        sx, sy = np.sqrt(np.mean(dx * dx)), np.sqrt(np.mean(dy * dy))
        if n < 2 or sx == 0 or sy == 0:
            continue
        rho = np.mean(dx * dy) / (sx * sy)
        w = n * sx * sy
        num += w * rho
        den += w
    if den == 0:
        raise InvalidInputError("SCC undefined: every stratum has zero variance")
    return float(np.clip(num / den, -1.0, 1.0))


def pcc_full(a, b) -> float:
    """Plain Pearson correlation over all off-diagonal entries."""
    A, Bm = _counts(a), _counts(b)
    if A.shape != Bm.shape:
        raise InvalidInputError(f"map shapes differ: {A.shape} vs {Bm.shape}")
    iu = np.triu_indices(A.shape[0], k=1)
    x, y = A[iu], Bm[iu]
    dx, dy = x - x.mean(), y - y.mean()
    den = np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    if den == 0:
        raise InvalidInputError("PCC undefined for a constant map")
    return float(np.sum(dx * dy) / den)


def _drmsd_prefactor(L, convention):
    if convention == "printed":
        return 2.0 / (L * (L - 2))
    if convention == "pairs":
        return 2.0 / (L * (L - 1))
    raise ValueError(f"unknown dRMSD convention {convention!r}")


def drmsd(a: Conformation, b: Conformation, convention: str = "printed") -> float:
    """Distance RMSD over beads present in both conformations.

    ``convention="printed"`` uses the ``2 / (L (L - 2))`` normalisation;
    ``"pairs"`` divides by the number of unordered pairs instead.
    """
    if a.positions.shape != b.positions.shape:
        raise InvalidInputError("conformations have different bead layouts")
    both = a.masks & b.masks
    L = int(both.sum())
    if L < 3:
        raise InvalidInputError(f"dRMSD needs at least 3 shared beads, got {L}")
    xa, xb = a.positions[both], b.positions[both]
    iu = np.triu_indices(L, k=1)
    da = np.linalg.norm(xa[:, None] - xa[None], axis=-1)[iu]
    db = np.linalg.norm(xb[:, None] - xb[None], axis=-1)[iu]
    return float(np.sqrt(_drmsd_prefactor(L, convention) * np.sum((da - db) ** 2)))


def mean_pairwise_drmsd(ens, convention: str = "printed") -> float:
    members = list(ens)
    n = len(members)
    if n < 2:
        raise InvalidInputError("mean pairwise dRMSD needs at least two members")
    masks = np.stack([m.masks.ravel() for m in members])
    xyz = np.stack([m.positions.reshape(-1, 3) for m in members])
    D = np.linalg.norm(xyz[:, :, None] - xyz[:, None, :], axis=-1)
    if np.all(masks == masks[0]):
        # common layout: flatten upper-triangle distance vectors once
        L = int(masks[0].sum())
        if L < 3:
            raise InvalidInputError(f"dRMSD needs at least 3 shared beads, got {L}")
        idx = np.flatnonzero(masks[0])
        iu = np.triu_indices(L, k=1)
        V = D[:, idx][:, :, idx][:, iu[0], iu[1]]
        pref = _drmsd_prefactor(L, convention)
        total = 0.0
        for i in range(n - 1):
            diff = V[i + 1:] - V[i]
            total += np.sqrt(pref * np.einsum("ij,ij->i", diff, diff)).sum()
        return float(total / (n * (n - 1) / 2))
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += drmsd(members[i], members[j], convention)
    return float(total / (n * (n - 1) / 2))


def chain_bond_lengths(conf: Conformation) -> np.ndarray:
    """Lengths of bonds between consecutive present beads of each chain.

    The ring-closing bond is included only for a chain with every bead present.
    """
    out = []
    for pos, mask in zip(conf.positions, conf.masks):
        p = pos.reshape(-1, 3)
        m = mask.ravel()
        if m.all():
            out.append(np.linalg.norm(p - np.roll(p, -1, axis=0), axis=1))
        else:
            ok = m[:-1] & m[1:]
            out.append(np.linalg.norm(p[1:] - p[:-1], axis=1)[ok])
    return np.concatenate(out)


def mean_bond_length(ens) -> float:
    members = [ens] if isinstance(ens, Conformation) else list(ens)
    if not members:
        raise InvalidInputError("empty ensemble")
    return float(np.mean([chain_bond_lengths(m).mean() for m in members]))


def perturbation_baseline(conf: Conformation, sigma: float, count: int,
                          rng: np.random.Generator, convention: str = "printed") -> DiversityReport:
    """Diversity of ``count`` Gaussian-jittered copies of one structure."""
    if not sigma > 0 or count < 2:
        raise InvalidInputError("need sigma > 0 and count >= 2")
    masks = conf.masks
    members = []
    for _ in range(count):
        pos = conf.positions.copy()
        pos[masks] += sigma * rng.standard_normal(pos[masks].shape)
        members.append(conf.with_positions(pos))
    d = mean_pairwise_drmsd(Ensemble(members, "baseline"), convention)
    return DiversityReport(d, mean_bond_length(conf))
