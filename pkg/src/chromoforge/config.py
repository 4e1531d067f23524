"""Flat ``key = value`` run configuration shared by every pipeline stage.

One file drives the whole pipeline.  Keys outside :data:`DEFAULTS` are
rejected; each stage hashes only the keys it reads, plus the seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError, MissingInputError

STAGES = ("simulate", "build-dataset", "train-vae", "train-dit", "generate", "evaluate", "report")

DEFAULTS: dict[str, object] = {
    "workdir": "run",
    # simulate
    "n_bins": 64,
    "beads_per_bin": 2,
    "n_sources": 10,
    "replication_fractions": "",
    "trajectories_per_source": 1,
    "sim_steps": 32000,
    "sim_sample_every": 500,
    "sim_anneal_steps": 80000,
    "sim_dt": 1e-4,
    "domain_min": 6,
    "domain_max": 16,
    "restraint_top_k": 128,
    "restraint_stiffness": 3.0,
    # build-dataset
    "n_test": 2,
    "ensemble_size": 64,
    "contact_threshold": 1.5,
    "mix": False,
    # train-vae
    "vae_hidden": 64,
    "vae_latent_channels": 16,
    "vae_res_blocks": 4,
    "vae_lambda_mask": 1.0,
    "vae_lambda_kl": 1e-6,
    "vae_logvar_init": -8.0,
    "vae_epochs": 3,
    "vae_lr": 1e-3,
    "vae_batch": 8,
    "vae_rotate": True,
    # train-dit
    "dit_depth": 4,
    "dit_hidden": 64,
    "dit_heads": 4,
    "dit_encoder_depth": 2,
    "dit_cond_dropout": 0.1,
    "dit_epochs": 100,
    "dit_lr": 1e-3,
    "dit_batch": 16,
    "dit_lr_schedule": "cosine",
    # generate
    "gen_count": 64,
    "gen_steps": 50,
    "cfg_scale": 1.0,
    "shuffled_control": True,
    # evaluate
    "perturbation_sigma": 0.01,
    "perturbation_count": 16,
    "scc_smoothing": 1,
}

STAGE_KEYS = {
    "simulate": ["n_bins", "beads_per_bin", "n_sources", "replication_fractions",
                 "trajectories_per_source", "sim_steps", "sim_sample_every", "sim_anneal_steps",
                 "sim_dt", "domain_min", "domain_max", "restraint_top_k", "restraint_stiffness"],
    "build-dataset": ["n_test", "ensemble_size", "contact_threshold", "mix"],
    "train-vae": ["vae_hidden", "vae_latent_channels", "vae_res_blocks", "vae_lambda_mask",
                  "vae_lambda_kl", "vae_logvar_init", "vae_epochs", "vae_lr", "vae_batch",
                  "vae_rotate"],
    "train-dit": ["dit_depth", "dit_hidden", "dit_heads", "dit_encoder_depth",
                  "dit_cond_dropout", "dit_epochs", "dit_lr", "dit_batch", "dit_lr_schedule"],
    "generate": ["gen_count", "gen_steps", "cfg_scale", "shuffled_control"],
    "evaluate": ["perturbation_sigma", "perturbation_count", "scc_smoothing", "contact_threshold"],
    "report": [],
}


def _coerce(key: str, raw: str):
    proto = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(proto, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(proto).__name__}") from None
    return raw


def parse_pairs(lines, source="config") -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    seed: int = 0

    @classmethod
    def load(cls, path=None, overrides=(), seed=None) -> "RunConfig":
        vals = dict(DEFAULTS)
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise MissingInputError(f"config file not found: {p}")
            vals.update(parse_pairs(p.read_text().splitlines(), str(p)))
        vals.update(parse_pairs(overrides, "overrides"))
        cfg = cls(vals, 0 if seed is None else int(seed))
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    @property
    def workdir(self) -> Path:
        return Path(self.values["workdir"])

    def validate(self):
        v = self.values
        positive = ["n_bins", "beads_per_bin", "n_sources", "trajectories_per_source", "sim_steps",
                    "sim_sample_every", "ensemble_size", "vae_epochs", "vae_batch", "dit_epochs",
                    "dit_batch", "gen_count", "gen_steps", "perturbation_count", "dit_heads",
                    "dit_hidden", "dit_depth", "vae_hidden", "vae_latent_channels"]
        for k in positive:
            if v[k] < 1:
                raise ConfigError(f"{k} must be >= 1, got {v[k]}")
        for k in ("sim_dt", "contact_threshold", "vae_lr", "dit_lr", "perturbation_sigma"):
            if not v[k] > 0:
                raise ConfigError(f"{k} must be > 0, got {v[k]}")
        if not 0 < v["n_test"] < v["n_sources"]:
            raise ConfigError("n_test must leave at least one training source")
        if v["domain_min"] < 1 or v["domain_max"] < v["domain_min"]:
            raise ConfigError("need 1 <= domain_min <= domain_max")
        if v["dit_hidden"] % v["dit_heads"]:
            raise ConfigError("dit_hidden must be divisible by dit_heads")
        if v["dit_lr_schedule"] not in ("constant", "cosine"):
            raise ConfigError("dit_lr_schedule must be constant or cosine")
        self.replication_fractions()

    def replication_fractions(self) -> list[float]:
        """One replicated-arc fraction per source trajectory group."""
        raw = str(self.values["replication_fractions"]).strip()
        n = self.values["n_sources"]
        if not raw:
            return [round(k / (n - 1), 6) if n > 1 else 0.0 for k in range(n)]
        try:
            g = [float(x) for x in raw.split(",")]
        except ValueError:
            raise ConfigError(f"replication_fractions: bad list {raw!r}") from None
        if len(g) != n:
            raise ConfigError(f"replication_fractions has {len(g)} entries, n_sources={n}")
        if any(not 0.0 <= x <= 1.0 for x in g):
            raise ConfigError("replication fractions must lie in [0, 1]")
        return g

    def stage_values(self, stage: str) -> dict:
        if stage not in STAGE_KEYS:
            raise ConfigError(f"unknown stage {stage!r}")
        return {k: self.values[k] for k in STAGE_KEYS[stage]}

    def stage_hash(self, stage: str) -> str:
        blob = json.dumps({"stage": stage, "seed": self.seed, **self.stage_values(stage)},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def provenance(self, stage: str) -> dict:
        return {"stage": stage, "seed": self.seed, "config_hash": self.stage_hash(stage)}

    def to_text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in DEFAULTS)
