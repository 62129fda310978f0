"""Equivariant graph layers and the receptor-conditioned noise estimator.

Messages see feature pairs, squared distances and the time encoding;
positions move along pairwise difference vectors, so a rigid transform of
the whole graph transports the outputs and feature updates are invariant.
Receptor nodes are frozen: they shape the messages but never move.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .diffcore import MlpParams, as_tensor, mlp_forward, mlp_init, time_encoding
from .errors import ShapeError

Tensor = torch.Tensor

ROLE_LIGAND = (1.0, 0.0)
ROLE_RECEPTOR = (0.0, 1.0)


@dataclass(frozen=True)
class JointGraph:
    """Ligand plus virtual-receptor nodes in one fully connected graph."""

    positions: Tensor
    features: Tensor
    roles: Tensor
    frozen: Tensor

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeError("positions must be (n, 3)")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ShapeError("features must be (n, d)")
        if self.roles.shape != (n, 2) or self.frozen.shape != (n,):
            raise ShapeError("roles must be (n, 2) and frozen (n,)")
        with torch.no_grad():
            if not ((self.roles == 0) | (self.roles == 1)).all() or (
                self.roles.sum(dim=1) != 1
            ).any():
                raise ShapeError("roles must be one-hot rows")
            if not (self.roles[:, 0] > 0).any():
                raise ShapeError("graph needs at least one ligand node")


@dataclass
class EgnnLayerParams:
    phi_e: MlpParams  # messages: (h_i, h_j, |x_i-x_j|^2, t) -> hidden
    phi_a: MlpParams  # attention logit: hidden -> 1
    phi_x: MlpParams  # position step size: hidden -> 1
    phi_h: MlpParams  # feature update: (h, aggregated m) -> hidden


@dataclass
class EgnnParams:
    """Denoiser stack: input projections, message layers, feature head."""

    layers: list[EgnnLayerParams]
    lig_proj: MlpParams  # ligand channels + role one-hot -> hidden
    rec_proj: MlpParams  # receptor features + role one-hot -> hidden
    feat_head: MlpParams  # final ligand features -> feature-noise channels
    hidden: int
    t_dim: int
    n_steps: int

    @property
    def lig_feat_dim(self) -> int:
        return self.feat_head.out_dim


def init_egnn_params(
    rng: np.random.Generator,
    hidden: int = 256,
    n_layers: int = 6,
    lig_feat_dim: int = 4,
    rec_feat_dim: int = 256,
    t_dim: int = 16,
    n_steps: int = 500,
) -> EgnnParams:
    layers = []
    for _ in range(n_layers):
        layers.append(
            EgnnLayerParams(
                phi_e=mlp_init([2 * hidden + 1 + t_dim, hidden, hidden], rng),
                phi_a=mlp_init([hidden, 1], rng, activation="identity"),
                phi_x=mlp_init([hidden, hidden, 1], rng, zero_last=True),
                phi_h=mlp_init([2 * hidden, hidden, hidden], rng),
            )
        )
    return EgnnParams(
        layers=layers,
        lig_proj=mlp_init([lig_feat_dim + 2, hidden], rng, activation="identity"),
        rec_proj=mlp_init([rec_feat_dim + 2, hidden], rng, activation="identity"),
        feat_head=mlp_init([hidden, hidden, lig_feat_dim], rng),
        hidden=hidden,
        t_dim=t_dim,
        n_steps=n_steps,
    )


def egnn_layer(graph: JointGraph, layer: EgnnLayerParams, t_enc: Tensor) -> JointGraph:
    """One message-passing step over all ordered pairs i != j."""
    x, h = graph.positions, graph.features
    n = x.shape[0]
    mask = 1.0 - torch.eye(n, dtype=x.dtype)

    diff = x[:, None, :] - x[None, :, :]
    dist2 = (diff * diff).sum(-1, keepdim=True)
    h_i = h[:, None, :].expand(n, n, -1)
    h_j = h[None, :, :].expand(n, n, -1)
    t_rep = t_enc[None, None, :].expand(n, n, -1)
    m = torch.nn.functional.silu(
        mlp_forward(layer.phi_e, torch.cat([h_i, h_j, dist2, t_rep], dim=-1))
    )

    att = torch.sigmoid(mlp_forward(layer.phi_a, m))
    m_agg = (att * m * mask[:, :, None]).sum(dim=1)

    # tiny offset keeps gradients finite for coincident points
    norm = torch.sqrt(dist2 + 1e-30)
    step = mlp_forward(layer.phi_x, m)
    dx = (diff / (norm + 1.0) * step * mask[:, :, None]).sum(dim=1)

    new_x = torch.where(graph.frozen[:, None], x, x + dx)
    new_h = mlp_forward(layer.phi_h, torch.cat([h, m_agg], dim=-1))
    return replace(graph, positions=new_x, features=new_h)


def build_joint_graph(
    lig_pos,
    lig_feat,
    vr_pos,
    vr_feat,
    params: EgnnParams,
) -> JointGraph:
    """Project both node families to the shared width and tag roles."""
    lig_pos = as_tensor(lig_pos) if not torch.is_tensor(lig_pos) else lig_pos
    lig_feat = as_tensor(lig_feat) if not torch.is_tensor(lig_feat) else lig_feat
    vr_pos = as_tensor(vr_pos) if not torch.is_tensor(vr_pos) else vr_pos
    vr_feat = as_tensor(vr_feat) if not torch.is_tensor(vr_feat) else vr_feat
    n_l, n_v = lig_pos.shape[0], vr_pos.shape[0]

    role_l = as_tensor(ROLE_LIGAND).expand(n_l, 2)
    role_r = as_tensor(ROLE_RECEPTOR).expand(n_v, 2)
    h_l = mlp_forward(params.lig_proj, torch.cat([lig_feat, role_l], dim=-1))
    h_r = mlp_forward(params.rec_proj, torch.cat([vr_feat, role_r], dim=-1))

    return JointGraph(
        positions=torch.cat([lig_pos, vr_pos], dim=0),
        features=torch.cat([h_l, h_r], dim=0),
        roles=torch.cat([role_l, role_r], dim=0),
        frozen=torch.cat(
            [torch.zeros(n_l, dtype=torch.bool), torch.ones(n_v, dtype=torch.bool)]
        ),
    )


def denoiser_forward(lig_pos, lig_feat, vr_pos, vr_feat, t: int, params: EgnnParams):
    """Noise estimate for the ligand nodes given the virtual receptor.

    Position noise is the accumulated displacement (x_out - x_in); feature
    noise is a head readout of the final ligand features. Receptor nodes
    only provide context.
    """
    graph = build_joint_graph(lig_pos, lig_feat, vr_pos, vr_feat, params)
    n_l = int((graph.roles[:, 0] > 0).sum())
    x_in = graph.positions[:n_l]
    t_enc = time_encoding(t, params.n_steps, params.t_dim)
    for layer in params.layers:
        graph = egnn_layer(graph, layer, t_enc)
    eps_pos = graph.positions[:n_l] - x_in
    eps_feat = mlp_forward(params.feat_head, graph.features[:n_l])
    return eps_pos, eps_feat
