"""Denoiser training, checkpoint packing and sampling glue.

A denoiser run owns three trainable pieces: the receptor feature
projection, the virtual-receptor encoder (pretrained or fresh; it keeps
receiving gradients here) and the EGNN stack. The noise target is the
per-dimension mean squared error between estimated and drawn noise.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import egnn as egnn_mod
from . import virtual_receptor as vr_mod
from .checkpoint import read_checkpoint, write_checkpoint
from .dataio import ComplexRecord, ligand_onehot
from .diffcore import (
    MlpParams,
    ParamDict,
    as_tensor,
    init_opt_state,
    mlp_forward,
    mlp_init,
    optimizer_step,
    params_flatten,
    params_rebuild,
)
from .diffusion import DiffusionState, NoiseSchedule, build_schedule, forward_sample
from .embeddings import EmbeddingTable
from .errors import ConfigError, FormatError
from .geometry import center_complex, select_pocket

Tensor = torch.Tensor

FEAT_SCALE = 0.25  # categorical one-hot channels relative to positions


@dataclass
class DenoiserConfig:
    timesteps: int = 500
    hidden: int = 256
    n_layers: int = 6
    t_dim: int = 16
    n_virtual: int = 30
    vr_width: int = 64
    vr_h_out: int = 256
    proj_dim: int = 256
    pocket_atoms: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-12
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0


@dataclass
class DenoiserModel:
    feat_proj: MlpParams  # raw receptor features -> encoder feature width
    encoder: vr_mod.VRParams
    egnn: egnn_mod.EgnnParams


def init_denoiser_model(cfg: DenoiserConfig, raw_feat_dim: int, rng: np.random.Generator) -> DenoiserModel:
    return DenoiserModel(
        feat_proj=mlp_init([raw_feat_dim, cfg.proj_dim], rng, activation="identity"),
        encoder=vr_mod.init_vr_params(
            rng,
            n_out=cfg.n_virtual,
            feat_dim=cfg.proj_dim,
            width=cfg.vr_width,
            h_out=cfg.vr_h_out,
            t_dim=cfg.t_dim,
            n_steps=cfg.timesteps,
        ),
        egnn=egnn_mod.init_egnn_params(
            rng,
            hidden=cfg.hidden,
            n_layers=cfg.n_layers,
            lig_feat_dim=len(ligand_onehot("C")[0]),
            rec_feat_dim=cfg.vr_h_out,
            t_dim=cfg.t_dim,
            n_steps=cfg.timesteps,
        ),
    )


@dataclass
class PreparedComplex:
    """A record standardized for training: pocket selected around the ligand
    centroid, both clouds in the pocket-centered frame."""

    id: str
    pocket_pos: Tensor
    pocket_raw: Tensor
    fps_sel: np.ndarray
    lig_pos: np.ndarray
    lig_feat: np.ndarray
    lig_types: str
    offset: np.ndarray


def prepare_complex(
    record: ComplexRecord,
    n_virtual: int,
    pocket_atoms: int = 100,
    table: Optional[EmbeddingTable] = None,
) -> PreparedComplex:
    site = record.ligand.positions.mean(axis=0)
    pocket = select_pocket(record.receptor, site, count=pocket_atoms)
    pocket, ligand, offset = center_complex(pocket, record.ligand)
    if table is not None:
        missing = sorted({int(i) for i in pocket.residue_index} - set(table.rows))
        if missing:
            raise FormatError(f"record {record.id}: residue indices missing: {missing}")
        raw = np.stack([table.rows[int(i)] for i in pocket.residue_index]).astype(float)
    else:
        raw = pocket.features  # 20-dim residue one-hots from dataio
    if n_virtual > len(pocket):
        raise ConfigError(f"{n_virtual} virtual atoms > pocket size {len(pocket)}")
    return PreparedComplex(
        id=record.id,
        pocket_pos=as_tensor(pocket.positions),
        pocket_raw=as_tensor(raw),
        fps_sel=vr_mod.fps_init(pocket, n_virtual),
        lig_pos=ligand.positions,
        lig_feat=record.ligand.features * FEAT_SCALE,
        lig_types="".join(record.ligand_types),
        offset=offset,
    )


def _complex_loss(model: DenoiserModel, prep: PreparedComplex, t: int, z_t: DiffusionState, eps: DiffusionState):
    feat = mlp_forward(model.feat_proj, prep.pocket_raw)
    vr_pos, vr_feat, _ = vr_mod.encode(prep.pocket_pos, feat, t, model.encoder, fps_sel=prep.fps_sel)
    eps_pos, eps_feat = egnn_mod.denoiser_forward(
        z_t.positions, z_t.features, vr_pos, vr_feat, t, model.egnn
    )
    err = ((eps_pos - as_tensor(eps.positions)) ** 2).sum() + (
        (eps_feat - as_tensor(eps.features)) ** 2
    ).sum()
    return err / (eps.positions.size + eps.features.size)


def denoising_loss(
    model: DenoiserModel,
    batch: list[PreparedComplex],
    schedule: NoiseSchedule,
    rng: np.random.Generator,
):
    """Mean per-dimension squared error over the batch (torch scalar).

    Each complex draws its own t uniform in [1, T] and its own noise.
    """
    if not batch:
        raise ConfigError("empty batch")
    total = 0.0
    for prep in batch:
        t = int(rng.integers(1, schedule.T + 1))
        z0 = DiffusionState(positions=prep.lig_pos, features=prep.lig_feat, t=0)
        z_t, eps = forward_sample(z0, t, schedule, rng)
        total = total + _complex_loss(model, prep, t, z_t, eps)
    return total / len(batch)


def denoising_loss_and_grads(model, batch, schedule, rng):
    """(loss value, gradient dict) through the denoiser and the encoder."""
    params = params_flatten(model)
    leaves = {k: p.detach().requires_grad_(True) for k, p in params.items()}
    live = params_rebuild(model, leaves)
    loss = denoising_loss(live, batch, schedule, rng)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    grad_map = {
        k: (torch.zeros_like(leaves[k]) if g is None else g)
        for k, g in zip(leaves.keys(), grads)
    }
    return float(loss), grad_map


@dataclass
class TrainResult:
    model: DenoiserModel
    losses: list[float] = field(default_factory=list)


def train_denoiser(
    prepared: list[PreparedComplex],
    cfg: DenoiserConfig,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    opt_state=None,
    steps: Optional[int] = None,
    checkpoint_every: int = 0,
    checkpoint_path=None,
) -> TrainResult:
    params = {k: p.detach() for k, p in params_flatten(model).items()}
    if opt_state is None:
        opt_state = init_opt_state(
            params, base_lr=cfg.lr, total_steps=cfg.steps, weight_decay=cfg.weight_decay
        )
    losses = []
    n_steps = cfg.steps - opt_state.step if steps is None else steps
    for _ in range(n_steps):
        idx = rng.choice(len(prepared), size=min(cfg.batch_size, len(prepared)), replace=False)
        leaves = {k: p.detach().requires_grad_(True) for k, p in params.items()}
        live = params_rebuild(model, leaves)
        loss = denoising_loss(live, [prepared[i] for i in idx], schedule, rng)
        grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
        grad_map = {
            k: (torch.zeros_like(leaves[k]) if g is None else g)
            for k, g in zip(leaves.keys(), grads)
        }
        opt_state, params = optimizer_step(opt_state, leaves, grad_map)
        losses.append(float(loss))
        if checkpoint_every and checkpoint_path and opt_state.step % checkpoint_every == 0:
            snap = params_rebuild(model, params)
            save_denoiser_checkpoint(checkpoint_path, snap, cfg, opt_state, rng)
    result_model = params_rebuild(model, params)
    return TrainResult(model=result_model, losses=losses), opt_state


# --- checkpoint packing -------------------------------------------------------


def _blocks_from(obj) -> dict[str, np.ndarray]:
    return {k: p.detach().numpy() for k, p in params_flatten(obj).items()}


def save_autoencoder_checkpoint(
    path,
    bundle: vr_mod.AutoencoderBundle,
    cfg: vr_mod.PretrainConfig,
    raw_feat_dim: int,
    pocket_size: int,
    extra_meta=None,
):
    meta = {
        "kind": "autoencoder",
        "config": dataclasses.asdict(cfg),
        "raw_feat_dim": raw_feat_dim,
        "pocket_size": pocket_size,
    }
    if extra_meta:
        meta.update(extra_meta)
    write_checkpoint(path, _blocks_from(bundle), meta)


def load_autoencoder_checkpoint(path):
    blocks, meta = read_checkpoint(path)
    if meta.get("kind") != "autoencoder":
        raise FormatError(f"{path}: not an autoencoder checkpoint")
    cfg = vr_mod.PretrainConfig(**meta["config"])
    skeleton = vr_mod._bundle_init(
        cfg, meta["raw_feat_dim"], meta["pocket_size"], np.random.default_rng(0)
    )
    bundle = _restore(skeleton, blocks, path)
    return bundle, cfg, meta


def save_denoiser_checkpoint(path, model: DenoiserModel, cfg: DenoiserConfig, opt_state, rng, extra_meta=None):
    blocks = _blocks_from(model)
    for k, t in opt_state.m.items():
        blocks[f"opt.m.{k}"] = t.detach().numpy()
    for k, t in opt_state.v.items():
        blocks[f"opt.v.{k}"] = t.detach().numpy()
    meta = {
        "kind": "denoiser",
        "config": dataclasses.asdict(cfg),
        "raw_feat_dim": model.feat_proj.in_dim,
        "opt_step": opt_state.step,
        "rng_state": rng.bit_generator.state,
    }
    if extra_meta:
        meta.update(extra_meta)
    write_checkpoint(path, blocks, meta)


def load_denoiser_checkpoint(path):
    blocks, meta = read_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise FormatError(f"{path}: not a denoiser checkpoint")
    cfg = DenoiserConfig(**meta["config"])
    skeleton = init_denoiser_model(cfg, meta["raw_feat_dim"], np.random.default_rng(0))
    model_blocks = {k: v for k, v in blocks.items() if not k.startswith("opt.")}
    model = _restore(skeleton, model_blocks, path)

    params = params_flatten(model)
    opt_state = init_opt_state(
        params, base_lr=cfg.lr, total_steps=cfg.steps, weight_decay=cfg.weight_decay
    )
    opt_state.step = int(meta["opt_step"])
    for k in params:
        mk, vk = f"opt.m.{k}", f"opt.v.{k}"
        if mk in blocks:
            opt_state.m[k] = as_tensor(blocks[mk])
            opt_state.v[k] = as_tensor(blocks[vk])

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return model, cfg, opt_state, rng, meta


def _restore(skeleton, blocks, path):
    expected = params_flatten(skeleton)
    if set(expected) != set(blocks):
        missing = sorted(set(expected) - set(blocks))
        extra = sorted(set(blocks) - set(expected))
        raise FormatError(f"{path}: block names mismatch (missing {missing}, extra {extra})")
    mapping = {}
    for k, tmpl in expected.items():
        if tuple(blocks[k].shape) != tuple(tmpl.shape):
            raise FormatError(
                f"{path}: shape mismatch for {k!r}: {blocks[k].shape} vs {tuple(tmpl.shape)}"
            )
        mapping[k] = as_tensor(blocks[k])
    return params_rebuild(skeleton, mapping)


# --- sampling glue ------------------------------------------------------------


def build_denoiser_fn(model: DenoiserModel, prep: PreparedComplex):
    """Closure for diffusion.sample: conditions on one prepared pocket."""
    with torch.no_grad():
        feat = mlp_forward(model.feat_proj, prep.pocket_raw)

    def fn(z_pos, z_feat, t):
        with torch.no_grad():
            vr_pos, vr_feat, _ = vr_mod.encode(
                prep.pocket_pos, feat, t, model.encoder, fps_sel=prep.fps_sel
            )
            eps_pos, eps_feat = egnn_mod.denoiser_forward(
                as_tensor(z_pos), as_tensor(z_feat), vr_pos, vr_feat, t, model.egnn
            )
        return eps_pos.numpy(), eps_feat.numpy()

    return fn


def oracle_denoiser_fn(z0: DiffusionState, schedule: NoiseSchedule):
    """Returns the exact forward noise toward a known clean state."""

    def fn(z_pos, z_feat, t):
        a = schedule.alpha[t]
        sig = schedule.sigma(t)
        return (z_pos - a * z0.positions) / sig, (z_feat - a * z0.features) / sig

    return fn
