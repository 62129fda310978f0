"""Convex-weight receptor compression and its autoencoder pretraining.

The encoder writes each virtual atom as a convex combination of the true
receptor atoms; the decoder swaps the roles (same architecture, separate
parameters) and reconstructs the receptor from the virtual cloud. Weights
depend only on pairwise distances and per-atom features, so positions map
equivariantly under E(3) and the weight matrix permutes with the atoms.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from . import matching
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
    time_encoding,
)
from .errors import ConfigError, ShapeError
from .geometry import AtomCloud, farthest_point_sample

Tensor = torch.Tensor

FPS_BIAS = 12.0  # pre-softmax boost on FPS-selected entries of a fresh encoder


@dataclass(frozen=True)
class VRWeights:
    """Row-stochastic (n_out, n_in) convex-combination matrix."""

    A: Tensor

    def __post_init__(self):
        a = self.A
        if a.ndim != 2:
            raise ShapeError(f"weights must be a matrix, got shape {tuple(a.shape)}")
        with torch.no_grad():
            if (a < 0).any():
                raise ShapeError("negative convex weight")
            if (a.sum(dim=1) - 1.0).abs().max() > 1e-9:
                raise ShapeError("weight rows must sum to 1")


@dataclass
class VRParams:
    """Networks of the weight-producing architecture.

    ``n_out`` is the number of atoms this parameter set emits: the virtual
    atom count for an encoder, the reconstructed atom count for a decoder.
    ``fps_bias`` (scalar tensor, encoder only) is added pre-softmax to the
    entries picked by farthest point sampling so a fresh encoder starts
    concentrated on a well-spread subset.
    """

    xi_q: MlpParams
    xi_b: MlpParams
    xi_a: MlpParams
    xi_k: MlpParams
    xi_h: MlpParams
    n_out: int
    t_dim: int = 16
    n_steps: int = 500
    fps_bias: Tensor | None = None

    @property
    def feat_dim(self) -> int:
        return self.xi_k.in_dim


def init_vr_params(
    rng: np.random.Generator,
    n_out: int,
    feat_dim: int,
    width: int = 64,
    h_out: int = 256,
    t_dim: int = 16,
    n_steps: int = 500,
    with_fps_bias: bool = True,
) -> VRParams:
    """Fresh parameter set; the xi_a head starts at exactly zero so the
    initial weight rows are governed by the FPS bias alone."""
    half = width
    return VRParams(
        xi_q=mlp_init([1 + 2 * feat_dim, width, width], rng),
        xi_b=mlp_init([width, width, 2 * half], rng),
        xi_a=mlp_init([half + half + width + t_dim, width, n_out], rng, zero_last=True),
        xi_k=mlp_init([feat_dim, width, width], rng),
        xi_h=mlp_init([feat_dim, width, h_out], rng),
        n_out=n_out,
        t_dim=t_dim,
        n_steps=n_steps,
        fps_bias=as_tensor(FPS_BIAS) if with_fps_bias else None,
    )


def fps_init(receptor: AtomCloud, n_virtual: int) -> np.ndarray:
    """Indices of the atoms a fresh encoder's weight rows concentrate on."""
    return np.asarray(farthest_point_sample(receptor, n_virtual), dtype=int)


def _pairwise_norm(pos: Tensor) -> Tensor:
    diff = pos[:, None, :] - pos[None, :, :]
    # tiny offset keeps the gradient finite for coincident points
    return torch.sqrt((diff * diff).sum(-1) + 1e-30)


def compute_weights(
    positions,
    features,
    t: int,
    params: VRParams,
    fps_sel: np.ndarray | None = None,
) -> VRWeights:
    """The (n_out, n) convex weight matrix for one atom cloud.

    Accepts torch tensors (gradients flow through) or numpy arrays.
    ``fps_sel`` may pass a precomputed FPS selection; otherwise it is
    derived from the positions whenever the parameter set carries a bias.
    """
    pos = as_tensor(positions) if not torch.is_tensor(positions) else positions
    feat = as_tensor(features) if not torch.is_tensor(features) else features
    n = pos.shape[0]
    if n == 0:
        raise ShapeError("empty receptor")
    if feat.shape[0] != n:
        raise ShapeError("positions and features disagree on atom count")
    if feat.shape[1] != params.feat_dim:
        raise ShapeError(f"feature dim {feat.shape[1]} != expected {params.feat_dim}")

    d = _pairwise_norm(pos).unsqueeze(-1)
    h_j = feat[:, None, :].expand(n, n, -1)
    h_k = feat[None, :, :].expand(n, n, -1)
    q = mlp_forward(params.xi_q, torch.cat([d, h_j, h_k], dim=-1))
    q_mean = q.mean(dim=1)
    bb = mlp_forward(params.xi_b, q_mean)
    half = bb.shape[-1] // 2
    b, b_bar = bb[:, :half], bb[:, half:]
    b_bar_av = b_bar.mean(dim=0, keepdim=True).expand(n, -1)
    k = mlp_forward(params.xi_k, feat)
    zeta = time_encoding(t, params.n_steps, params.t_dim).unsqueeze(0).expand(n, -1)
    a_hat = mlp_forward(params.xi_a, torch.cat([b, b_bar_av, k, zeta], dim=-1))
    a_hat = a_hat.transpose(0, 1)  # (n_out, n)

    if params.fps_bias is not None:
        if params.n_out > n:
            raise ShapeError(f"{params.n_out} virtual atoms from a {n}-atom cloud")
        if fps_sel is None:
            cloud = AtomCloud(
                positions=pos.detach().numpy(),
                features=np.zeros((n, 1)),
            )
            fps_sel = fps_init(cloud, params.n_out)
        boost = torch.zeros_like(a_hat)
        boost[torch.arange(params.n_out), torch.as_tensor(fps_sel)] = 1.0
        a_hat = a_hat + params.fps_bias * boost

    return VRWeights(A=torch.softmax(a_hat, dim=1))


def encode(
    positions,
    features,
    t: int,
    params: VRParams,
    fps_sel: np.ndarray | None = None,
):
    """Virtual cloud: positions are convex sums, features convex sums of xi_h."""
    pos = as_tensor(positions) if not torch.is_tensor(positions) else positions
    feat = as_tensor(features) if not torch.is_tensor(features) else features
    weights = compute_weights(pos, feat, t, params, fps_sel=fps_sel)
    vr_pos = weights.A @ pos
    vr_feat = weights.A @ mlp_forward(params.xi_h, feat)
    return vr_pos, vr_feat, weights


def decode(vr_positions, vr_features, t: int, params: VRParams):
    """Reconstructed positions, one per decoder output row."""
    pos = as_tensor(vr_positions) if not torch.is_tensor(vr_positions) else vr_positions
    feat = as_tensor(vr_features) if not torch.is_tensor(vr_features) else vr_features
    weights = compute_weights(pos, feat, t, params)
    return weights.A @ pos, weights


def encode_cloud(pocket: AtomCloud, t: int, params: VRParams) -> AtomCloud:
    """AtomCloud-in, AtomCloud-out convenience wrapper around encode()."""
    vr_pos, vr_feat, _ = encode(pocket.positions, pocket.features, t, params)
    return AtomCloud(positions=vr_pos.detach().numpy(), features=vr_feat.detach().numpy())


# --- batched weight computation (internal fast path) --------------------------
#
# Pretraining runs many same-size pockets per step; the batched pipeline is
# the exact math of compute_weights with a leading batch dimension.


def _batched_weights(pos: Tensor, feat: Tensor, t: int, params: VRParams, fps_sel) -> Tensor:
    b, n, _ = pos.shape
    diff = pos[:, :, None, :] - pos[:, None, :, :]
    d = torch.sqrt((diff * diff).sum(-1) + 1e-30).unsqueeze(-1)
    h_j = feat[:, :, None, :].expand(b, n, n, -1)
    h_k = feat[:, None, :, :].expand(b, n, n, -1)
    q = mlp_forward(params.xi_q, torch.cat([d, h_j, h_k], dim=-1))
    q_mean = q.mean(dim=2)
    bb = mlp_forward(params.xi_b, q_mean)
    half = bb.shape[-1] // 2
    bvec, b_bar = bb[..., :half], bb[..., half:]
    b_bar_av = b_bar.mean(dim=1, keepdim=True).expand(b, n, -1)
    k = mlp_forward(params.xi_k, feat)
    zeta = time_encoding(t, params.n_steps, params.t_dim)[None, None, :].expand(b, n, -1)
    a_hat = mlp_forward(params.xi_a, torch.cat([bvec, b_bar_av, k, zeta], dim=-1))
    a_hat = a_hat.transpose(1, 2)  # (b, n_out, n)
    if params.fps_bias is not None:
        boost = torch.zeros_like(a_hat)
        bi = torch.arange(b)[:, None].expand(b, params.n_out)
        oi = torch.arange(params.n_out)[None, :].expand(b, params.n_out)
        boost[bi, oi, torch.as_tensor(np.asarray(fps_sel))] = 1.0
        a_hat = a_hat + params.fps_bias * boost
    return torch.softmax(a_hat, dim=2)


def _batched_reconstruction(pos: Tensor, raw: Tensor, bundle: "AutoencoderBundle", fps_sel):
    """Mean per-atom bipartite loss over a batch of same-size pockets."""
    feat = mlp_forward(bundle.proj, raw)
    frozen_xi_h = MlpParams(
        layers=[(w.detach(), b.detach()) for w, b in bundle.encoder.xi_h.layers],
        activation=bundle.encoder.xi_h.activation,
    )
    enc_a = _batched_weights(pos, feat, 0, bundle.encoder, fps_sel)
    vr_pos = enc_a @ pos
    vr_feat = enc_a @ mlp_forward(frozen_xi_h, feat)
    dec_a = _batched_weights(vr_pos, vr_feat, 0, bundle.decoder, None)
    recon = dec_a @ vr_pos
    perms = []
    with torch.no_grad():
        pos_np = pos.detach().numpy()
        rec_np = recon.detach().numpy()
        for i in range(pos.shape[0]):
            cost = matching.squared_distance_matrix(pos_np[i], rec_np[i])
            perms.append(torch.as_tensor(matching.hungarian(cost).permutation))
    matched = torch.stack([recon[i, p] for i, p in enumerate(perms)])
    return ((pos - matched) ** 2).sum(-1).mean()


# --- autoencoder pretraining --------------------------------------------------


@dataclass
class PretrainConfig:
    n_virtual: int = 30
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-3
    weight_decay: float = 1e-12
    width: int = 32
    h_out: int = 64
    proj_dim: int = 32
    t_dim: int = 16
    n_steps: int = 500
    seed: int = 0


@dataclass
class AutoencoderBundle:
    """Everything pretraining produces; ``proj`` maps raw receptor features
    into the width the weight networks consume."""

    proj: MlpParams
    encoder: VRParams
    decoder: VRParams


def reconstruction_loss(
    pocket_pos: Tensor,
    raw_feat: Tensor,
    bundle: AutoencoderBundle,
    t: int = 0,
    fps_sel: np.ndarray | None = None,
):
    """Squared-distance bipartite loss of decode(encode(pocket)), per atom.

    The assignment comes from the Hungarian solver on detached positions and
    is held fixed inside the differentiable expression. Feature
    reconstruction is not part of pretraining: xi_h runs with detached
    weights, so it receives exactly zero gradient from this objective while
    everything else keeps its full gradient.
    """
    feat = mlp_forward(bundle.proj, raw_feat)
    frozen_enc = dataclasses.replace(
        bundle.encoder,
        xi_h=MlpParams(
            layers=[(w.detach(), b.detach()) for w, b in bundle.encoder.xi_h.layers],
            activation=bundle.encoder.xi_h.activation,
        ),
    )
    vr_pos, vr_feat, _ = encode(pocket_pos, feat, t, frozen_enc, fps_sel=fps_sel)
    recon, _ = decode(vr_pos, vr_feat, t, bundle.decoder)
    cost = matching.squared_distance_matrix(
        pocket_pos.detach().numpy(), recon.detach().numpy()
    )
    assignment = matching.hungarian(cost)
    matched = recon[torch.as_tensor(assignment.permutation)]
    return ((pocket_pos - matched) ** 2).sum(-1).mean()


def _bundle_init(cfg: PretrainConfig, raw_feat_dim: int, pocket_size: int, rng) -> AutoencoderBundle:
    return AutoencoderBundle(
        proj=mlp_init([raw_feat_dim, cfg.proj_dim], rng, activation="identity"),
        encoder=init_vr_params(
            rng,
            n_out=cfg.n_virtual,
            feat_dim=cfg.proj_dim,
            width=cfg.width,
            h_out=cfg.h_out,
            t_dim=cfg.t_dim,
            n_steps=cfg.n_steps,
        ),
        decoder=init_vr_params(
            rng,
            n_out=pocket_size,
            feat_dim=cfg.h_out,
            width=cfg.width,
            h_out=cfg.h_out,
            t_dim=cfg.t_dim,
            n_steps=cfg.n_steps,
            with_fps_bias=False,
        ),
    )


def dataset_loss(pockets: list[AtomCloud], bundle: AutoencoderBundle, fps_cache=None) -> float:
    if fps_cache is None:
        fps_cache = [fps_init(p, bundle.encoder.n_out) for p in pockets]
    pos = torch.stack([as_tensor(p.positions) for p in pockets])
    raw = torch.stack([as_tensor(p.features) for p in pockets])
    with torch.no_grad():
        return float(_batched_reconstruction(pos, raw, bundle, np.stack(fps_cache)))


def pretrain_autoencoder(pockets: list[AtomCloud], cfg: PretrainConfig):
    """Train encoder+decoder jointly on position reconstruction at t=0.

    All pockets must share one atom count (the decoder's output width).
    Returns (bundle, per-step minibatch losses, (initial, final) full-set
    evaluation losses). Deterministic for a fixed config.
    """
    if not pockets:
        raise ConfigError("empty pretraining dataset")
    sizes = {len(p) for p in pockets}
    if len(sizes) != 1:
        raise ConfigError(f"pockets must share one atom count, got {sorted(sizes)}")
    pocket_size = sizes.pop()
    if cfg.n_virtual > pocket_size:
        raise ConfigError(f"{cfg.n_virtual} virtual atoms > pocket size {pocket_size}")

    rng = np.random.default_rng(cfg.seed)
    bundle = _bundle_init(cfg, pockets[0].features.shape[1], pocket_size, rng)
    fps_cache = np.stack([fps_init(p, cfg.n_virtual) for p in pockets])
    pos_all = torch.stack([as_tensor(p.positions) for p in pockets])
    raw_all = torch.stack([as_tensor(p.features) for p in pockets])

    params = params_flatten(bundle)
    state = init_opt_state(params, base_lr=cfg.lr, total_steps=cfg.steps, weight_decay=cfg.weight_decay)
    initial = dataset_loss(pockets, bundle, list(fps_cache))

    curve = []
    for _ in range(cfg.steps):
        idx = rng.choice(len(pockets), size=min(cfg.batch_size, len(pockets)), replace=False)
        leaves = {k: p.detach().requires_grad_(True) for k, p in params.items()}
        live = params_rebuild(bundle, leaves)
        loss = _batched_reconstruction(pos_all[idx], raw_all[idx], live, fps_cache[idx])
        grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
        grad_map = {
            k: (torch.zeros_like(leaves[k]) if g is None else g)
            for k, g in zip(leaves.keys(), grads)
        }
        state, params = optimizer_step(state, leaves, grad_map)
        curve.append(float(loss.detach()))

    bundle = params_rebuild(bundle, {k: p.detach() for k, p in params.items()})
    final = dataset_loss(pockets, bundle, list(fps_cache))
    return bundle, curve, (initial, final)
