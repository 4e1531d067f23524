"""Pipeline stages: simulate, build-dataset, train-vae, train-dit, generate, evaluate, report.

Stages talk only through files under ``workdir``::

    sim/source_XXX/           raw trajectories (centred, original units)
    dataset/{train,test}/...  normalised ensembles + map.hic, one dir per condition
    vae/, dit/                checkpoints and CSV loss logs
    generated/<cond>/{matched,shuffled}/
    eval/                     metrics.csv, ps.csv, one SVG per condition
    report/                   summary.csv, ps_overlay.svg

Every JSON, CSV header comment or SVG carries the producing stage's config
hash and seed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig
from .crossdit import CrossDiTGenerator, generate_ensemble
from .exceptions import ConfigError, InvalidInputError, MissingInputError
from .geometry import Ensemble, normalize, read_ensemble, stack_tokens, write_ensemble
from .hic import (HiCMap, aggregate_ensemble, aggregate_normalized, ps_curve, read_hic,
                  write_hic)
from .metrics import SccConfig, mean_bond_length, mean_pairwise_drmsd, pcc_full, \
    perturbation_baseline, scc
from .simulation import SimConfig, build_restraints, run_trajectory, write_run_manifest
from .vae import ConformationVAE

log = logging.getLogger(__name__)


def worker_count() -> int:
    raw = os.environ.get("CHROMOFORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CHROMOFORGE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("CHROMOFORGE_THREADS must be >= 1")
    return n


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"required input not found: {path}")
    return json.loads(path.read_text())


def _write_csv(path, header, rows, provenance: dict):
    buf = io.StringIO()
    buf.write(f"# config_hash={provenance['config_hash']} seed={provenance['seed']}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    """Rows of a pipeline CSV (leading ``#`` provenance lines skipped)."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"CSV not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    if not lines:
        raise InvalidInputError(f"{path}: no header row")
    return list(csv.DictReader(lines))


# --------------------------------------------------------------------------
# simulate

def synthetic_bias_map(B: int, rng: np.random.Generator, domain_min=6, domain_max=16) -> HiCMap:
    """Random domain-structured map used to seed restraints for one source.

    Bins are cut into contiguous domains with sizes in ``[domain_min,
    domain_max]``; pairs inside a domain get uniform random weights, pairs
    across domains 5% of that.  Stands in for the measured map that biases
    initial structures in the full-size setting.
    """
    cuts = [0]
    while True:
        nxt = cuts[-1] + int(rng.integers(domain_min, domain_max + 1))
        if nxt >= B - domain_min // 2:
            break
        cuts.append(nxt)
    label = np.searchsorted(np.array(cuts), np.arange(B), side="right") - 1
    W = np.triu(rng.uniform(0.0, 1.0, (B, B)), 1)
    W = W + W.T
    W[label[:, None] != label[None, :]] *= 0.05
    return HiCMap(W, condition_id="bias", metadata={"domain_starts": ",".join(map(str, cuts))})


def _simulate_source(args):
    cfg, k, g, outdir = args
    rng = np.random.default_rng([cfg.seed, 7, k])
    B = cfg["n_bins"]
    bias = synthetic_bias_map(B, rng, cfg["domain_min"], cfg["domain_max"])
    restraints = build_restraints(bias, cfg["restraint_top_k"], cfg["restraint_stiffness"])
    members, runs = [], []
    outdir.mkdir(parents=True, exist_ok=True)
    for r in range(cfg["trajectories_per_source"]):
        sim = SimConfig(n_bins=B, beads_per_bin=cfg["beads_per_bin"], replication_fraction=g,
                        dt=cfg["sim_dt"], steps=cfg["sim_steps"],
                        sample_every=cfg["sim_sample_every"],
                        restraint_anneal_steps=cfg["sim_anneal_steps"],
                        seed=int(rng.integers(2 ** 31)))
        ens = run_trajectory(sim, restraints, f"source_{k:03d}")
        members.extend(ens.members)
        runs.append({"seed": sim.seed, "config_hash": sim.config_hash(),
                     "snapshot_steps": ens.metadata["snapshot_steps"]})
        write_run_manifest(outdir / f"run_{r:02d}.json", ens, sim)
    prov = cfg.provenance("simulate")
    ens = Ensemble(members, f"source_{k:03d}",
                   {"replication_fraction": g, "runs": runs, **prov})
    write_ensemble(outdir, ens, prov)
    write_hic(outdir / "bias.hic", bias, prov)
    return outdir


def simulate(cfg: RunConfig) -> list[Path]:
    """One group of trajectories per source, each with its own bias map and replication fraction."""
    root = cfg.workdir / "sim"
    fractions = cfg.replication_fractions()
    jobs = [(cfg, k, g, root / f"source_{k:03d}") for k, g in enumerate(fractions)]
    n = min(worker_count(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(n) as pool:
            out = list(pool.map(_simulate_source, jobs))
    else:
        out = [_simulate_source(j) for j in jobs]
    _write_json(root / "manifest.json", {
        "sources": [p.name for p in out], "replication_fractions": fractions,
        **cfg.provenance("simulate")})
    return out


# --------------------------------------------------------------------------
# build-dataset

def partition_pool(sources: list[list], n_test: int, N: int, rng: np.random.Generator,
                   mix: bool = False):
    """Split source groups into train/test conditions of ``N`` structure indices each.

    ``sources[k]`` lists the pool entries of source ``k``.  Whole sources are
    held out for test.  Without ``mix`` each condition is drawn from one
    source; with ``mix`` the entries of a split are pooled and dealt into
    random groups.  Returns ``(train, test)`` lists of ``(source_ids, entries)``.
    """
    order = rng.permutation(len(sources))
    test_ids = sorted(order[:n_test].tolist())
    train_ids = sorted(order[n_test:].tolist())

    def groups(ids):
        if not mix:
            out = []
            for k in ids:
                if len(sources[k]) < N:
                    raise InvalidInputError(
                        f"source {k} has {len(sources[k])} structures, need {N}")
                pick = np.sort(rng.choice(len(sources[k]), N, replace=False))
                out.append(([k], [sources[k][i] for i in pick]))
            return out
        pool = [(k, e) for k in ids for e in sources[k]]
        n_groups = len(ids)
        if len(pool) < n_groups * N:
            raise InvalidInputError(f"pool of {len(pool)} cannot fill {n_groups} x {N}")
        perm = rng.permutation(len(pool))
        out = []
        for g in range(n_groups):
            sel = sorted(perm[g * N:(g + 1) * N].tolist())
            out.append((sorted({pool[i][0] for i in sel}), [pool[i][1] for i in sel]))
        return out

    return groups(train_ids), groups(test_ids)


def build_dataset(cfg: RunConfig) -> dict:
    sim_root = cfg.workdir / "sim"
    sim_manifest = _read_json(sim_root / "manifest.json")
    ensembles = [read_ensemble(sim_root / s) for s in sim_manifest["sources"]]
    sources = [[(k, i) for i in range(len(e))] for k, e in enumerate(ensembles)]
    rng = np.random.default_rng([cfg.seed, 11])
    train, test = partition_pool(sources, cfg["n_test"], cfg["ensemble_size"], rng, cfg["mix"])
    prov = cfg.provenance("build-dataset")
    root = cfg.workdir / "dataset"
    manifests = {}
    for split, groups in (("train", train), ("test", test)):
        entries = []
        for c, (src, picks) in enumerate(groups):
            cid = f"{split}_{c:03d}"
            raw = Ensemble([ensembles[k].members[i] for k, i in picks], cid)
            hic = aggregate_ensemble(raw, cfg["contact_threshold"])
            hic.condition_id = cid
            norm = Ensemble([normalize(m) for m in raw], cid,
                            {"sources": [sim_manifest["sources"][k] for k in src]})
            d = root / split / cid
            write_ensemble(d, norm, prov)
            write_hic(d / "map.hic", hic, prov)
            entries.append({"condition_id": cid, "hic": f"{split}/{cid}/map.hic",
                            "members": [f"{split}/{cid}/member_{i:04d}.txt"
                                        for i in range(len(norm))],
                            "sources": norm.metadata["sources"],
                            "mean_scale": float(np.mean([m.scale for m in norm]))})
        manifest = {"split": split, "ensemble_size": cfg["ensemble_size"], "ensembles": entries,
                    "preprocessing": {"center": True, "scale_normalize": True,
                                      "rotation": "training-time only", "mix": cfg["mix"]},
                    "contact_threshold": cfg["contact_threshold"], **prov}
        _write_json(root / f"{split}_manifest.json", manifest)
        manifests[split] = manifest
    check_disjoint(manifests["train"], manifests["test"])
    return manifests


def check_disjoint(train: dict, test: dict) -> None:
    a = {e["condition_id"] for e in train["ensembles"]}
    b = {e["condition_id"] for e in test["ensembles"]}
    sa = {s for e in train["ensembles"] for s in e["sources"]}
    sb = {s for e in test["ensembles"] for s in e["sources"]}
    if a & b or sa & sb:
        raise InvalidInputError("train and test conditions overlap")


def load_split(cfg: RunConfig, split: str):
    """``(manifest, [(condition_id, HiCMap, Ensemble)])`` for one split."""
    root = cfg.workdir / "dataset"
    manifest = _read_json(root / f"{split}_manifest.json")
    out = []
    for e in manifest["ensembles"]:
        d = root / split / e["condition_id"]
        out.append((e["condition_id"], read_hic(root / e["hic"]), read_ensemble(d)))
    return manifest, out


# --------------------------------------------------------------------------
# training

def _train_arrays(cfg):
    _, items = load_split(cfg, "train")
    X = stack_tokens([m for _, _, ens in items for m in ens])
    maps = np.stack([hic.counts for _, hic, ens in items for _ in ens])
    return X, maps


def train_vae(cfg: RunConfig) -> ConformationVAE:
    X, _ = _train_arrays(cfg)
    prov = cfg.provenance("train-vae")
    vae = ConformationVAE(hidden=cfg["vae_hidden"], latent_channels=cfg["vae_latent_channels"],
                          n_res_blocks=cfg["vae_res_blocks"], lambda_mask=cfg["vae_lambda_mask"],
                          lambda_kl=cfg["vae_lambda_kl"], learning_rate=cfg["vae_lr"],
                          epochs=cfg["vae_epochs"], batch_size=cfg["vae_batch"],
                          rotate=cfg["vae_rotate"], logvar_init=cfg["vae_logvar_init"],
                          lr_schedule="cosine", random_state=cfg.seed)
    vae.fit(X)
    out = cfg.workdir / "vae"
    vae.save(out, prov)
    _write_csv(out / "loss.csv", ["epoch", "total", "coord", "mask", "kl"],
               [[h["epoch"], h["total"], h["coord"], h["mask"], h["kl"]] for h in vae.history_],
               prov)
    return vae


def _load_vae(cfg):
    d = cfg.workdir / "vae"
    if not (d / "manifest.json").exists():
        raise MissingInputError(f"VAE checkpoint not found in {d}; run train-vae first")
    return ConformationVAE.load(d)


def _load_dit(cfg):
    d = cfg.workdir / "dit"
    if not (d / "manifest.json").exists():
        raise MissingInputError(f"CrossDiT checkpoint not found in {d}; run train-dit first")
    return CrossDiTGenerator.load(d)


def train_dit(cfg: RunConfig) -> CrossDiTGenerator:
    X, maps = _train_arrays(cfg)
    vae = _load_vae(cfg)
    Z = vae.transform(X)
    prov = cfg.provenance("train-dit")
    dit = CrossDiTGenerator(depth=cfg["dit_depth"], hidden=cfg["dit_hidden"],
                            heads=cfg["dit_heads"], encoder_depth=cfg["dit_encoder_depth"],
                            cond_dropout_prob=cfg["dit_cond_dropout"],
                            learning_rate=cfg["dit_lr"], epochs=cfg["dit_epochs"],
                            batch_size=cfg["dit_batch"], lr_schedule=cfg["dit_lr_schedule"],
                            random_state=cfg.seed)
    dit.fit(Z, maps)
    out = cfg.workdir / "dit"
    dit.save(out, {**prov, "latent_scale": vae.latent_scale_})
    _write_csv(out / "loss.csv", ["epoch", "loss"],
               [[h["epoch"], h["loss"]] for h in dit.history_], prov)
    return dit


# --------------------------------------------------------------------------
# generate

def shuffled_partner(i: int, n_test: int) -> int:
    return (i + 1) % n_test


def generate(cfg: RunConfig) -> list[Path]:
    """Matched ensembles per test condition, plus a mismatched-map control."""
    _, items = load_split(cfg, "test")
    vae, dit = _load_vae(cfg), _load_dit(cfg)
    prov = cfg.provenance("generate")
    root = cfg.workdir / "generated"
    written = []
    _, train_items = load_split(cfg, "train") if len(items) < 2 else (None, None)
    for i, (cid, hic, _) in enumerate(items):
        jobs = [("matched", hic)]
        if cfg["shuffled_control"]:
            other = items[shuffled_partner(i, len(items))][1] if len(items) > 1 \
                else train_items[0][1]
            jobs.append(("shuffled", other))
        for kind, cond_map in jobs:
            rng = np.random.default_rng([cfg.seed, 13, i, 0 if kind == "matched" else 1])
            ens = generate_ensemble(dit, vae, cond_map, cfg["gen_count"], rng,
                                    steps=cfg["gen_steps"], cfg_scale=cfg["cfg_scale"])
            ens.condition_id = cid
            ens.metadata = {"conditioning_map": cond_map.condition_id, "kind": kind, **prov}
            d = root / cid / kind
            write_ensemble(d, ens, prov)
            written.append(d)
    _write_json(root / "manifest.json", {"conditions": [c for c, _, _ in items], **prov})
    return written


# --------------------------------------------------------------------------
# evaluate

PS_EPS = 1e-3  # floor added before taking log10 of contact frequencies


def ps_log_deviation(a: HiCMap, n_a: int, b: HiCMap, n_b: int, s_max: int) -> float:
    """Mean |log10 P_a(s) - log10 P_b(s)| over s = 1..s_max, frequencies per structure."""
    pa = ps_curve(a).values / n_a
    pb = ps_curve(b).values / n_b
    s = np.arange(1, s_max + 1)
    return float(np.mean(np.abs(np.log10(pa[s] + PS_EPS) - np.log10(pb[s] + PS_EPS))))


def with_scale(ens: Ensemble, scale: float) -> Ensemble:
    return Ensemble([m.with_positions(m.positions, scale=scale) for m in ens.members],
                    ens.condition_id)


def evaluate_condition(input_map: HiCMap, n_input: int, generated: Ensemble,
                       base_threshold: float, smoothing=1) -> dict:
    """SCC/PCC/P(s) comparison of one normalised ensemble against its input map.

    Contacts use ``base_threshold / member.scale``; generated members should carry
    the mean scale of the reference ensemble (see :func:`with_scale`).
    """
    gm = aggregate_normalized(generated, base_threshold)
    B = input_map.bins
    return {
        "map": gm,
        "scc": scc(input_map, gm, SccConfig(smoothing_radius=smoothing)),
        "pcc": pcc_full(input_map, gm),
        "ps_lmad": ps_log_deviation(input_map, n_input, gm, len(generated), B // 4),
        "drmsd": mean_pairwise_drmsd(generated),
        "bond_length": mean_bond_length(generated),
    }


METRIC_COLUMNS = ["condition", "scc", "pcc", "mean_pairwise_drmsd", "baseline_drmsd",
                  "drmsd_ratio", "bond_length_generated", "bond_length_input", "bond_ratio",
                  "scc_shuffled", "scc_margin", "ps_lmad", "ps_lmad_shuffled"]


def evaluate(cfg: RunConfig) -> list[dict]:
    _, items = load_split(cfg, "test")
    prov = cfg.provenance("evaluate")
    root = cfg.workdir / "eval"
    root.mkdir(parents=True, exist_ok=True)
    rows, ps_rows, missing = [], [], []
    for i, (cid, hic, ens) in enumerate(items):
        gdir = cfg.workdir / "generated" / cid
        if not (gdir / "matched" / "manifest.json").exists():
            missing.append(cid)
            log.error("no generated ensemble for %s; skipped", cid)
            continue
        mean_scale = float(np.mean([m.scale for m in ens]))
        gen = with_scale(read_ensemble(gdir / "matched"), mean_scale)
        th = cfg["contact_threshold"]
        res = evaluate_condition(hic, len(ens), gen, th, cfg["scc_smoothing"])
        rng = np.random.default_rng([cfg.seed, 17, i])
        bond_in = mean_bond_length(ens)
        base = perturbation_baseline(ens.members[0], cfg["perturbation_sigma"] * bond_in,
                                     cfg["perturbation_count"], rng)
        sh_scc, sh_lmad = float("nan"), float("nan")
        if (gdir / "shuffled" / "manifest.json").exists():
            sh = evaluate_condition(hic, len(ens), with_scale(read_ensemble(gdir / "shuffled"), mean_scale), th,
                                    cfg["scc_smoothing"])
            sh_scc, sh_lmad = sh["scc"], sh["ps_lmad"]
        rows.append([cid, res["scc"], res["pcc"], res["drmsd"], base.mean_pairwise_drmsd,
                     res["drmsd"] / base.mean_pairwise_drmsd, res["bond_length"], bond_in,
                     res["bond_length"] / bond_in, sh_scc, res["scc"] - sh_scc,
                     res["ps_lmad"], sh_lmad])
        p_in = ps_curve(hic).values / len(ens)
        p_gen = ps_curve(res["map"]).values / len(gen)
        for src, p in (("input", p_in), ("generated", p_gen)):
            ps_rows.extend([cid, src, s, float(v)] for s, v in enumerate(p))
        write_hic(root / f"{cid}_generated.hic", res["map"], prov)
        plot_condition(root / f"{cid}.svg", cid, p_in, p_gen, rows[-1], prov)
    _write_csv(root / "metrics.csv", METRIC_COLUMNS, rows, prov)
    _write_csv(root / "ps.csv", ["condition", "source", "s", "value"], ps_rows, prov)
    if missing:
        raise MissingInputError(f"generated ensembles missing for: {', '.join(missing)}")
    return [dict(zip(METRIC_COLUMNS, r)) for r in rows]


# --------------------------------------------------------------------------
# plots

def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "chromoforge"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path, prov):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None, "Creator": "chromoforge",
            "Description": f"config_hash={prov['config_hash']} seed={prov['seed']}"}
    fig.savefig(path, format="svg", metadata=meta)


def _ps_axes(ax, B_half):
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("genomic separation s (bins)")
    ax.set_ylabel("P(s)")
    ax.set_xlim(1, max(2, B_half))


def plot_condition(path, cid, p_in, p_gen, row, prov):
    plt = _figure()
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    s = np.arange(1, len(p_in))
    a.plot(s, np.maximum(p_in[1:], PS_EPS), label="input", color="black")
    a.plot(s, np.maximum(p_gen[1:], PS_EPS), label="generated", color="tab:red", ls="--")
    _ps_axes(a, len(p_in) - 1)
    a.legend(frameon=False)
    a.set_title(cid)
    vals = dict(zip(METRIC_COLUMNS, row))
    names = ["scc", "scc_shuffled", "pcc", "drmsd_ratio", "bond_ratio"]
    heights = [float(vals[n]) if np.isfinite(float(vals[n])) else 0.0 for n in names]
    b.bar(range(len(names)), heights, color="tab:blue")
    b.set_xticks(range(len(names)))
    b.set_xticklabels(names, rotation=30, ha="right")
    b.set_yscale("symlog")
    fig.tight_layout()
    _save_svg(fig, path, prov)
    plt.close(fig)


def plot_ps_overlay(path, curves: dict, prov):
    """One panel per condition with input and generated P(s); empty input gives bare axes."""
    plt = _figure()
    n = max(1, len(curves))
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.5), squeeze=False)
    for ax, (cid, parts) in zip(axes[0], sorted(curves.items())):
        for src, style in (("input", dict(color="black")),
                           ("generated", dict(color="tab:red", ls="--"))):
            if src in parts:
                s, v = parts[src]
                keep = s > 0
                ax.plot(s[keep], np.maximum(v[keep], PS_EPS), label=src, **style)
        _ps_axes(ax, max(2, int(max(p[0].max() for p in parts.values()))))
        ax.set_title(cid)
        ax.legend(frameon=False)
    if not curves:
        _ps_axes(axes[0][0], 2)
    fig.tight_layout()
    _save_svg(fig, path, prov)
    plt.close(fig)


# --------------------------------------------------------------------------
# report

def report(cfg: RunConfig, eval_dir=None, out_dir=None) -> Path:
    eval_dir = Path(eval_dir) if eval_dir else cfg.workdir / "eval"
    out_dir = Path(out_dir) if out_dir else cfg.workdir / "report"
    metrics = read_csv(eval_dir / "metrics.csv")
    ps = read_csv(eval_dir / "ps.csv")
    prov = cfg.provenance("report")
    curves: dict = {}
    try:
        grouped: dict = {}
        for r in ps:
            grouped.setdefault((r["condition"], r["source"]), []).append(
                (int(r["s"]), float(r["value"])))
        for (cid, src), pts in grouped.items():
            pts.sort()
            curves.setdefault(cid, {})[src] = (np.array([p[0] for p in pts]),
                                              np.array([p[1] for p in pts]))
        keys = ["scc", "scc_shuffled", "scc_margin", "drmsd_ratio", "ps_lmad",
                "ps_lmad_shuffled"]
        table = [[r["condition"]] + [float(r[k]) for k in keys] for r in metrics]
    except (KeyError, ValueError) as exc:
        raise InvalidInputError(f"malformed evaluation CSV: {exc}") from None
    _write_csv(out_dir / "summary.csv", ["condition"] + keys, table, prov)
    plot_ps_overlay(out_dir / "ps_overlay.svg", curves, prov)
    return out_dir


STAGE_FUNCS = {
    "simulate": simulate, "build-dataset": build_dataset, "train-vae": train_vae,
    "train-dit": train_dit, "generate": generate, "evaluate": evaluate, "report": report,
}


def run_stage(stage: str, cfg: RunConfig):
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGE_FUNCS)}")
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    return STAGE_FUNCS[stage](cfg)
