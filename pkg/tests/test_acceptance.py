"""Acceptance suite: one test per headline criterion.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion.  The end-to-end desk run takes most of the
time.  Set ``CHROMOFORGE_ACCEPTANCE_WORKDIR`` to keep its outputs.

Run on its own with ``pytest tests/test_acceptance.py -v``.
"""

import os
import shutil
import time

import numpy as np
import pytest

import oracles
import test_crossdit as tcd
import test_simulation as tsim
import test_tensorcore as ttc
import test_vae as tvae
from chromoforge.config import STAGES, RunConfig
from chromoforge.geometry import Ensemble, apply_rotation, sample_uniform_rotation
from chromoforge.hic import HiCMap, ps_curve
from chromoforge.metrics import SccConfig, drmsd, mean_pairwise_drmsd, pcc_full, scc
from chromoforge.pipeline import read_csv, run_stage
from conftest import random_conformation

E2E_BUDGET_S = 30 * 60


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion("gradient integrity: ops, VAE loss, flow-matching loss (rel < 1e-4, < 2 min)")
def test_gradient_integrity():
    t0 = time.perf_counter()
    worst = {name: ttc.fd_check(build, arrays) for name, (build, arrays) in ttc.OPS.items()}
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    assert not bad, bad
    tvae.test_full_loss_gradient_finite_differences()
    tcd.test_training_loss_gradient_finite_differences()
    assert time.perf_counter() - t0 < 120


@pytest.mark.criterion("metric oracles: 100 seeds, <= 16 bins, agreement 1e-9")
def test_metric_oracles():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        B = int(rng.integers(6, 17))
        A, Bm = rng.random((2, B, B))
        A, Bm = A + A.T, Bm + Bm.T
        h = int(seed % 2)
        assert abs(scc(A, Bm, SccConfig(h)) - oracles.scc(A, Bm, h)) < 1e-9
        assert abs(scc(A, A, SccConfig(h)) - 1.0) < 1e-9
        assert abs(pcc_full(A, Bm) - oracles.pcc(A, Bm)) < 1e-9
        assert np.abs(ps_curve(HiCMap(A)).values - oracles.ps(A)).max() < 1e-9

        members = [random_conformation(rng, bins=B) for _ in range(3)]
        a, b = members[:2]
        assert abs(drmsd(a, b) - oracles.drmsd(a, b)) < 1e-9
        assert abs(drmsd(a, b, "pairs") - oracles.drmsd(a, b, "pairs")) < 1e-9
        assert abs(mean_pairwise_drmsd(Ensemble(members))
                   - oracles.mean_pairwise_drmsd(members)) < 1e-9
        moved = apply_rotation(a, sample_uniform_rotation(rng))
        moved = moved.with_positions(moved.positions + rng.standard_normal(3) * 5)
        assert drmsd(a, moved) < 1e-9


@pytest.mark.criterion("simulator physics: bonds, overlaps, confinement, MSD, forces")
def test_simulator_physics():
    tsim.test_equilibrium_run_statistics()
    tsim.test_free_particle_diffusion()
    for g in (0.0, 0.3, 1.0):
        tsim.test_forces_match_energy_finite_differences(g)


@pytest.mark.criterion("architecture contracts: identity at init, frozen tokens, cfg=1, lengths")
def test_architecture_contracts():
    tcd.test_backbone_is_identity_at_init()
    tcd.test_condition_tokens_unchanged_through_blocks()
    tcd.test_cfg_one_bitwise_equals_conditional_only()
    for bins in (3, 8, 11, 64):
        tcd.test_sequence_lengths_agree(bins)


@pytest.mark.criterion("masking contract: zero gradient and no effect at absent beads")
def test_masking_contract():
    tvae.test_masking_contract()


# ---------------------------------------------------------------- desk-scale end to end

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    work = os.environ.get("CHROMOFORGE_ACCEPTANCE_WORKDIR") or tmp_path_factory.mktemp("desk")
    if os.path.exists(work):
        shutil.rmtree(work)
    cfg = RunConfig.load(None, [f"workdir={work}"], seed=0)
    t0 = time.perf_counter()
    for stage in STAGES:
        run_stage(stage, cfg)
    elapsed = time.perf_counter() - t0
    rows = read_csv(cfg.workdir / "eval/metrics.csv")
    print(f"\ndesk run: {elapsed:.0f} s")
    for r in rows:
        print(f"  {r['condition']}: scc {float(r['scc']):.3f} shuffled "
              f"{float(r['scc_shuffled']):.3f} drmsd ratio {float(r['drmsd_ratio']):.1f} "
              f"P(s) lmad {float(r['ps_lmad']):.3f} shuffled {float(r['ps_lmad_shuffled']):.3f}")
    return cfg, elapsed, rows


@pytest.mark.criterion("end-to-end desk run: SCC margin >= 0.05 and dRMSD >= 5x baseline")
def test_end_to_end_desk_run(desk):
    cfg, elapsed, rows = desk
    assert cfg["n_bins"] == 64 and cfg["ensemble_size"] == 64 and cfg["n_test"] == 2
    assert cfg["n_sources"] - cfg["n_test"] == 8
    assert cfg["dit_depth"] == 4 and cfg["dit_hidden"] == 64 and cfg["gen_count"] == 64
    assert elapsed <= E2E_BUDGET_S
    assert len(rows) == 2
    for r in rows:
        assert float(r["scc_margin"]) >= 0.05, r["condition"]
        assert float(r["drmsd_ratio"]) >= 5.0, r["condition"]


@pytest.mark.criterion("P(s) fidelity: matched log-deviation below shuffled")
def test_ps_fidelity(desk):
    _, _, rows = desk
    assert len(rows) == 2
    for r in rows:
        assert float(r["ps_lmad"]) < float(r["ps_lmad_shuffled"]), r["condition"]


@pytest.mark.criterion("determinism: every stage rerun is byte-identical")
def test_determinism(desk, tmp_path):
    # whole chain twice at desk shapes with short schedules
    short = ["n_sources=10", "sim_steps=640", "sim_sample_every=10", "sim_anneal_steps=400",
             "vae_epochs=1", "dit_epochs=1", "gen_steps=4"]
    runs = []
    for name in ("a", "b"):
        cfg = RunConfig.load(None, short + [f"workdir={tmp_path / name}"], seed=3)
        for stage in STAGES:
            run_stage(stage, cfg)
        runs.append(tree(cfg.workdir))
    assert runs[0].keys() == runs[1].keys()
    assert [k for k in runs[0] if runs[0][k] != runs[1][k]] == []

    # the full desk run: rerun the downstream stages in place on a copy
    cfg, _, _ = desk
    copy = tmp_path / "desk"
    shutil.copytree(cfg.workdir, copy)
    before = tree(copy)
    again = RunConfig.load(None, [f"workdir={copy}"], seed=0)
    for stage in ("build-dataset", "train-vae", "generate", "evaluate", "report"):
        run_stage(stage, again)
    after = tree(copy)
    assert [k for k in before if before[k] != after.get(k)] == []
