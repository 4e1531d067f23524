"""Overdamped Langevin dynamics of a confined ring polymer with a replication branch.

Energy terms (all pairs over present beads):

* harmonic bonds ``k_b (r - r0)^2`` along the parental ring, between
  consecutive replicated beads and at the two replication-fork junctions;
* WCA repulsion ``4 eps [(s/r)^12 - (s/r)^6] + eps`` for ``r < 2^(1/6) s``;
* a harmonic wall ``k_w max(0, |x_a| - h_a)^2`` per axis;
* restraints ``w k (|c_i - c_j| - d)^2`` between parental bin centroids,
  scaled by the annealing weight ``w``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numba
import numpy as np

from .exceptions import ConfigError, InvalidInputError, NumericalFault
from .geometry import Conformation, Ensemble, center
from .hic import HiCMap, circular_distance

log = logging.getLogger(__name__)

WCA_CUTOFF = 2.0 ** (1.0 / 6.0)


@dataclass(frozen=True)
class SimConfig:
    n_bins: int = 64
    beads_per_bin: int = 2
    replication_fraction: float = 0.0
    box_half_extents: tuple = (22.0, 22.0, 49.0)
    bond_rest_length: float = 1.0
    bond_stiffness: float = 100.0
    wca_sigma: float = 1.0
    wca_epsilon: float = 1.0
    wall_stiffness: float = 10.0
    friction: float = 1.0
    temperature: float = 1.0
    dt: float = 2e-4
    steps: int = 50_000
    sample_every: int = 500
    restraint_anneal_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "box_half_extents",
                           tuple(float(v) for v in self.box_half_extents))
        self.validate()

    def validate(self):
        if self.n_bins < 2 or self.beads_per_bin < 1:
            raise ConfigError("need n_bins >= 2 and beads_per_bin >= 1")
        if not 0.0 <= self.replication_fraction <= 1.0:
            raise ConfigError("replication_fraction must lie in [0, 1]")
        if len(self.box_half_extents) != 3 or min(self.box_half_extents) <= 0:
            raise ConfigError("box_half_extents must be three positive numbers")
        for name in ("bond_rest_length", "bond_stiffness", "wca_sigma", "wca_epsilon",
                     "wall_stiffness", "friction", "dt"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.dt * self.friction >= 0.5:
            raise ConfigError("dt * friction must be < 0.5")
        if self.bond_rest_length >= 2 * WCA_CUTOFF * self.wca_sigma:
            raise ConfigError("bond_rest_length too long relative to wca_sigma")
        if self.sample_every < 1 or self.sample_every > max(self.steps, 1) or self.steps < 0:
            raise ConfigError("need 1 <= sample_every <= steps")
        if self.restraint_anneal_steps < 0:
            raise ConfigError("restraint_anneal_steps must be >= 0")

    @property
    def n_beads(self):
        return self.n_bins * self.beads_per_bin

    @property
    def n_replicated(self):
        return math.ceil(self.replication_fraction * self.n_beads - 1e-9)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "SimConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        items = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        pairs = [ln.split("=", 1) for ln in items if ln]
        pairs += [(k, str(v)) for k, v in overrides.items()]
        for pair in pairs:
            if len(pair) != 2:
                raise ConfigError(f"malformed config line {'='.join(pair)!r}")
            k, v = pair[0].strip(), pair[1].strip()
            if k not in kinds:
                raise ConfigError(f"unknown SimConfig key {k!r}")
            values[k] = _coerce(k, v)
        return cls(**values)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


_INT_KEYS = {"n_bins", "beads_per_bin", "steps", "sample_every", "restraint_anneal_steps", "seed"}


def _coerce(key, value: str):
    if key == "box_half_extents":
        return tuple(float(x) for x in value.split(","))
    try:
        return int(float(value)) if key in _INT_KEYS else float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


@dataclass
class RestraintSet:
    pairs: list = field(default_factory=list)  # (bin_i, bin_j, target_distance, stiffness)

    def __post_init__(self):
        for i, j, d, k in self.pairs:
            if i == j:
                raise InvalidInputError("restraint endpoints must differ")
            if k < 0:
                raise InvalidInputError("restraint stiffness must be >= 0")

    def __len__(self):
        return len(self.pairs)

    def arrays(self):
        if not self.pairs:
            return (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0))
        i, j, d, k = zip(*self.pairs)
        return (np.array(i, np.int64), np.array(j, np.int64),
                np.array(d, np.float64), np.array(k, np.float64))


# --------------------------------------------------------------------------
# topology

@dataclass(frozen=True)
class Topology:
    """Flattened bead layout: parental beads ``0..n-1`` then replicated ``n..2n-1``."""

    n: int
    valid: np.ndarray
    bonds: np.ndarray

    @classmethod
    def build(cls, n_beads: int, mask_replicated: np.ndarray) -> "Topology":
        n = n_beads
        rep = np.asarray(mask_replicated, bool).ravel()
        valid = np.concatenate([np.ones(n, bool), rep])
        bonds = [(a, (a + 1) % n) for a in range(n)]
        m = int(rep.sum())
        if m == n:
            bonds += [(n + a, n + (a + 1) % n) for a in range(n)]
        elif m > 0:
            idx = np.flatnonzero(rep)
            if not np.array_equal(idx, np.arange(idx[0], idx[0] + m)):
                raise InvalidInputError("replicated beads must form one contiguous arc")
            start, stop = idx[0], idx[-1]
            bonds += [(n + a, n + a + 1) for a in range(start, stop)]
            # fork junctions tie the branch ends to the parental ring
            bonds += [((start - 1) % n, n + start), (n + stop, (stop + 1) % n)]
        return cls(n, valid, np.array(bonds, dtype=np.int64).reshape(-1, 2))

    @classmethod
    def of(cls, conf: Conformation) -> "Topology":
        return cls.build(conf.bins * conf.beads_per_bin, conf.mask_replicated)


def _flat(conf: Conformation) -> np.ndarray:
    return np.ascontiguousarray(conf.positions.reshape(-1, 3))


def _unflat(conf: Conformation, x: np.ndarray) -> np.ndarray:
    return x.reshape(conf.positions.shape)


# --------------------------------------------------------------------------
# energy (reference implementation) and forces (compiled kernel)

def total_energy(conf: Conformation, cfg: SimConfig, restraints: RestraintSet | None = None,
                 anneal_weight: float = 0.0) -> float:
    """Plain numpy energy; independent of the force kernel."""
    top = Topology.of(conf)
    x = _flat(conf)
    e = 0.0
    b = x[top.bonds[:, 0]] - x[top.bonds[:, 1]]
    e += cfg.bond_stiffness * np.sum((np.linalg.norm(b, axis=1) - cfg.bond_rest_length) ** 2)
    xv = x[top.valid]
    iu = np.triu_indices(len(xv), k=1)
    r = np.linalg.norm(xv[iu[0]] - xv[iu[1]], axis=1)
    r = r[r < WCA_CUTOFF * cfg.wca_sigma]
    sr6 = (cfg.wca_sigma / r) ** 6
    e += np.sum(4 * cfg.wca_epsilon * (sr6 * sr6 - sr6) + cfg.wca_epsilon)
    h = np.array(cfg.box_half_extents)
    e += cfg.wall_stiffness * np.sum(np.maximum(0.0, np.abs(xv) - h) ** 2)
    if restraints and anneal_weight:
        cen = conf.coords_parental.mean(axis=1)
        for i, j, d, k in restraints.pairs:
            e += anneal_weight * k * (np.linalg.norm(cen[i] - cen[j]) - d) ** 2
    return float(e)


@numba.njit(cache=True)
def _forces_kernel(x, valid, bonds, r0, kb, sigma, eps, box, kw,
                   ri, rj, rd, rk, w, K):
    n_tot = x.shape[0]
    f = np.zeros_like(x)
    for b in range(bonds.shape[0]):
        a, c = bonds[b, 0], bonds[b, 1]
        dx = x[a, 0] - x[c, 0]
        dy = x[a, 1] - x[c, 1]
        dz = x[a, 2] - x[c, 2]
        r = math.sqrt(dx * dx + dy * dy + dz * dz)
        if r > 0.0:
            s = -2.0 * kb * (r - r0) / r
            f[a, 0] += s * dx
            f[a, 1] += s * dy
            f[a, 2] += s * dz
            f[c, 0] -= s * dx
            f[c, 1] -= s * dy
            f[c, 2] -= s * dz
    rc2 = (2.0 ** (1.0 / 6.0) * sigma) ** 2
    s2 = sigma * sigma
    for a in range(n_tot):
        if not valid[a]:
            continue
        for c in range(a + 1, n_tot):
            if not valid[c]:
                continue
            dx = x[a, 0] - x[c, 0]
            dy = x[a, 1] - x[c, 1]
            dz = x[a, 2] - x[c, 2]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 < rc2:
                sr2 = s2 / r2
                sr6 = sr2 * sr2 * sr2
                s = 24.0 * eps * (2.0 * sr6 * sr6 - sr6) / r2
                f[a, 0] += s * dx
                f[a, 1] += s * dy
                f[a, 2] += s * dz
                f[c, 0] -= s * dx
                f[c, 1] -= s * dy
                f[c, 2] -= s * dz
    for a in range(n_tot):
        if not valid[a]:
            continue
        for d in range(3):
            over = abs(x[a, d]) - box[d]
            if over > 0.0:
                f[a, d] -= 2.0 * kw * over * (1.0 if x[a, d] > 0 else -1.0)
    if w != 0.0:
        for q in range(ri.shape[0]):
            ci = np.zeros(3)
            cj = np.zeros(3)
            for m in range(K):
                for d in range(3):
                    ci[d] += x[ri[q] * K + m, d] / K
                    cj[d] += x[rj[q] * K + m, d] / K
            dx = ci[0] - cj[0]
            dy = ci[1] - cj[1]
            dz = ci[2] - cj[2]
            r = math.sqrt(dx * dx + dy * dy + dz * dz)
            if r > 0.0:
                s = -2.0 * w * rk[q] * (r - rd[q]) / (r * K)
                for m in range(K):
                    f[ri[q] * K + m, 0] += s * dx
                    f[ri[q] * K + m, 1] += s * dy
                    f[ri[q] * K + m, 2] += s * dz
                    f[rj[q] * K + m, 0] -= s * dx
                    f[rj[q] * K + m, 1] -= s * dy
                    f[rj[q] * K + m, 2] -= s * dz
    return f


class _ForceField:
    """Binds topology, parameters and restraints for repeated force calls."""

    def __init__(self, top: Topology, cfg: SimConfig, restraints: RestraintSet | None, K: int):
        self.top = top
        self.cfg = cfg
        self.K = K
        self.r = (restraints or RestraintSet()).arrays()
        self.box = np.array(cfg.box_half_extents)

    def __call__(self, x, anneal_weight=0.0):
        c = self.cfg
        ri, rj, rd, rk = self.r
        return _forces_kernel(x, self.top.valid, self.top.bonds, c.bond_rest_length,
                              c.bond_stiffness, c.wca_sigma, c.wca_epsilon, self.box,
                              c.wall_stiffness, ri, rj, rd, rk, float(anneal_weight), self.K)


def compute_forces(conf: Conformation, cfg: SimConfig, restraints: RestraintSet | None = None,
                   anneal_weight: float = 0.0, step: int | None = None) -> np.ndarray:
    """Negative energy gradient, shaped like ``conf.positions``; zero on absent beads."""
    if not 0.0 <= anneal_weight <= 1.0:
        raise InvalidInputError("anneal_weight must lie in [0, 1]")
    x = _flat(conf)
    if not np.all(np.isfinite(x[Topology.of(conf).valid])):
        raise NumericalFault("non-finite coordinates", step)
    ff = _ForceField(Topology.of(conf), cfg, restraints, conf.beads_per_bin)
    return _unflat(conf, ff(x, anneal_weight))


def _euler_maruyama(x, valid, forces, cfg: SimConfig, rng, step=None):
    mob = cfg.dt / cfg.friction
    disp = mob * forces
    if cfg.temperature > 0:
        disp = disp + math.sqrt(2.0 * cfg.temperature * mob) * rng.standard_normal(x.shape)
    disp[~valid] = 0.0
    worst = np.sqrt((disp * disp).sum(axis=1)).max()
    if not np.isfinite(worst):
        raise NumericalFault("non-finite displacement", step)
    if worst > cfg.wca_sigma:
        raise NumericalFault(f"bead moved {worst:.3g} > sigma in one step; reduce dt", step)
    return x + disp


def langevin_step(conf: Conformation, cfg: SimConfig, forces, rng: np.random.Generator,
                  step: int | None = None) -> Conformation:
    """``x <- x + (dt/gamma) F + sqrt(2 kT dt / gamma) xi`` on present beads."""
    x = _flat(conf)
    valid = conf.masks.reshape(-1)
    f = np.asarray(forces, dtype=np.float64).reshape(-1, 3)
    return conf.with_positions(_unflat(conf, _euler_maruyama(x, valid, f, cfg, rng, step)))


# --------------------------------------------------------------------------
# initialisation and trajectories

def init_conformation(cfg: SimConfig, rng: np.random.Generator | None = None) -> Conformation:
    """Parental ring on a circle; replicated arc from bin 0 displaced out of plane."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n, K = cfg.n_beads, cfg.beads_per_bin
    radius = n * cfg.bond_rest_length / (2 * math.pi)
    h = np.array(cfg.box_half_extents)
    order = np.argsort(h)  # ring spans the two longest axes
    normal, u, v = order[0], order[1], order[2]
    if radius + cfg.wca_sigma > h[u] or 2 * cfg.wca_sigma > h[normal]:
        raise ConfigError(
            f"ring of radius {radius:.3g} does not fit the box {tuple(h)}")
    ang = 2 * np.pi * np.arange(n) / n
    par = np.zeros((n, 3))
    par[:, u] = radius * np.cos(ang)
    par[:, v] = radius * np.sin(ang)
    m = cfg.n_replicated
    rep_mask = np.zeros(n, np.int8)
    rep_mask[:m] = 1
    rep = par.copy()
    rep[:, normal] += 1.15 * cfg.wca_sigma
    rep += 0.01 * cfg.wca_sigma * rng.standard_normal(rep.shape)
    rep[m:] = 0.0
    return Conformation(par.reshape(cfg.n_bins, K, 3), rep.reshape(cfg.n_bins, K, 3),
                        np.ones((cfg.n_bins, K)), rep_mask.reshape(cfg.n_bins, K))


def build_restraints(hic: HiCMap, top_k: int, stiffness: float,
                     target_distance: float = 1.0) -> RestraintSet:
    """Turn the ``top_k`` strongest long-range contacts into harmonic restraints.

    Only pairs with circular separation above 2 bins and a nonzero count are
    eligible; ties are broken by ``(i, j)`` order.
    """
    c = hic.counts
    if not np.array_equal(c, c.T):
        raise InvalidInputError("restraints need a symmetric contact map")
    B = hic.bins
    i, j = np.triu_indices(B, k=1)
    keep = (circular_distance(i, j, B) > 2) & (c[i, j] > 0)
    i, j, val = i[keep], j[keep], c[i, j][keep]
    if top_k > len(val):
        if top_k > 0 and len(val):
            log.warning("top_k=%d exceeds %d eligible pairs; clamping", top_k, len(val))
        top_k = len(val)
    order = np.lexsort((j, i, -val))[:top_k]
    return RestraintSet([(int(i[o]), int(j[o]), float(target_distance), float(stiffness))
                         for o in order])


def run_trajectory(cfg: SimConfig, restraints: RestraintSet | None = None,
                   condition_id: str = "traj", start: Conformation | None = None) -> Ensemble:
    """Anneal restraints linearly from full weight to zero, then sample unbiased dynamics.

    Snapshots (centred, not scale-normalised) are taken every
    ``sample_every`` production steps.  A :class:`NumericalFault` raised
    mid-run carries the snapshots collected so far in ``exc.partial``.
    """
    rng = np.random.default_rng(cfg.seed)
    conf = init_conformation(cfg, rng) if start is None else start
    top = Topology.of(conf)
    ff = _ForceField(top, cfg, restraints, conf.beads_per_bin)
    x = _flat(conf)
    valid = top.valid
    members, taken = [], []
    n_anneal = cfg.restraint_anneal_steps
    total = n_anneal + cfg.steps
    try:
        for step in range(1, total + 1):
            w = max(0.0, 1.0 - (step - 1) / n_anneal) if n_anneal and step <= n_anneal else 0.0
            f = ff(x, w)
            x = _euler_maruyama(x, valid, f, cfg, rng, step)
            prod = step - n_anneal
            if prod > 0 and prod % cfg.sample_every == 0:
                members.append(center(conf.with_positions(_unflat(conf, x))))
                taken.append(step)
    except NumericalFault as exc:
        exc.partial = Ensemble(members, condition_id,
                               {"seed": cfg.seed, "snapshot_steps": taken, "partial": True})
        raise
    meta = {"seed": cfg.seed, "config_hash": cfg.config_hash(), "snapshot_steps": taken,
            "n_restraints": len(restraints or [])}
    return Ensemble(members, condition_id, meta)


def write_run_manifest(path, ens: Ensemble, cfg: SimConfig) -> None:
    info = dict(ens.metadata)
    info.update(condition_id=ens.condition_id, config=cfg.to_text())
    Path(path).write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
