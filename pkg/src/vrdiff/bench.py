"""Wall-clock comparison of denoiser forwards at different receptor sizes.

Measures the full per-step cost of each configuration: the virtual path
pays for encoding the pocket down to its virtual atoms, the baseline pays
for message passing over the whole pocket. Medians over repeated runs
after a warmup, since single-shot timings are noisy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from . import egnn as egnn_mod
from . import virtual_receptor as vr_mod
from .diffcore import as_tensor, mlp_forward, mlp_init
from .geometry import AtomCloud
from .training import DenoiserConfig, init_denoiser_model
from .validation import random_complex


@dataclass
class BenchConfig:
    pocket_atoms: int = 100
    n_virtual: int = 30
    ligand_atoms: int = 19
    hidden: int = 64
    n_layers: int = 6
    reps: int = 20
    warmup: int = 3
    sweep_nodes: tuple[int, ...] = (20, 40, 80, 160)
    seed: int = 0


def _median_time(fn, reps: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run_bench(cfg: BenchConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    dcfg = DenoiserConfig(
        timesteps=50,
        hidden=cfg.hidden,
        n_layers=cfg.n_layers,
        n_virtual=cfg.n_virtual,
        vr_width=32,
        vr_h_out=cfg.hidden,
        proj_dim=32,
    )
    model = init_denoiser_model(dcfg, raw_feat_dim=20, rng=rng)
    pocket_pos, raw, z_pos, z_feat = random_complex(
        rng, n_pocket=cfg.pocket_atoms, n_lig=cfg.ligand_atoms
    )
    pocket_pos_t, raw_t = as_tensor(pocket_pos), as_tensor(raw)
    z_pos_t, z_feat_t = as_tensor(z_pos), as_tensor(z_feat)
    fps_sel = vr_mod.fps_init(
        AtomCloud(positions=pocket_pos, features=np.zeros((cfg.pocket_atoms, 1))),
        cfg.n_virtual,
    )
    # baseline projection: raw pocket features straight to the joint-graph width
    base_proj = mlp_init([20, cfg.hidden], rng, activation="identity")
    with torch.no_grad():
        feat = mlp_forward(model.feat_proj, raw_t)
        base_feat = mlp_forward(base_proj, raw_t)

    def virtual_forward():
        with torch.no_grad():
            vr_pos, vr_feat, _ = vr_mod.encode(
                pocket_pos_t, feat, 5, model.encoder, fps_sel=fps_sel
            )
            egnn_mod.denoiser_forward(z_pos_t, z_feat_t, vr_pos, vr_feat, 5, model.egnn)

    def full_forward():
        with torch.no_grad():
            egnn_mod.denoiser_forward(
                z_pos_t, z_feat_t, pocket_pos_t, base_feat, 5, model.egnn
            )

    t_virtual = _median_time(virtual_forward, cfg.reps, cfg.warmup)
    t_full = _median_time(full_forward, cfg.reps, cfg.warmup)

    sweep = []
    for nodes in cfg.sweep_nodes:
        pp, rw, _, _ = random_complex(rng, n_pocket=nodes, n_lig=cfg.ligand_atoms)
        pp_t = as_tensor(pp)
        with torch.no_grad():
            bf = mlp_forward(base_proj, as_tensor(rw))

        def fwd(pp_t=pp_t, bf=bf):
            with torch.no_grad():
                egnn_mod.denoiser_forward(z_pos_t, z_feat_t, pp_t, bf, 5, model.egnn)

        sweep.append({"receptor_nodes": nodes, "median_s": _median_time(fwd, cfg.reps, cfg.warmup)})

    logs = np.log([s["receptor_nodes"] + cfg.ligand_atoms for s in sweep])
    logt = np.log([s["median_s"] for s in sweep])
    slope = float(np.polyfit(logs, logt, 1)[0])

    return {
        "virtual_median_s": t_virtual,
        "full_pocket_median_s": t_full,
        "speedup_ratio": t_full / t_virtual,
        "pocket_atoms": cfg.pocket_atoms,
        "n_virtual": cfg.n_virtual,
        "ligand_atoms": cfg.ligand_atoms,
        "node_sweep": sweep,
        "loglog_slope": slope,
        "reps": cfg.reps,
    }
