"""Property suites behind the validate command and the acceptance tests.

Each check returns {name, module, tolerance, passed, detail}. Sizes are
parameterized so the CLI can run a quick pass while the acceptance suite
runs the full budgets.
"""

from __future__ import annotations

import itertools

import numpy as np
import torch

from . import diffcore, diffusion, egnn, geometry, matching
from . import virtual_receptor as vr
from .diffcore import as_tensor, mlp_forward, params_flatten, params_rebuild
from .training import DenoiserConfig, DenoiserModel, init_denoiser_model

Tensor = torch.Tensor


def _result(name, module, tolerance, passed, detail):
    return {
        "name": name,
        "module": module,
        "tolerance": tolerance,
        "passed": bool(passed),
        "detail": detail,
    }


# --- equivariance -------------------------------------------------------------


def random_complex(rng, n_pocket=20, n_lig=8, raw_dim=20, radius=6.0):
    dirs = rng.normal(size=(n_pocket, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pocket_pos = dirs * radius * (1.0 + rng.uniform(-0.2, 0.2, size=(n_pocket, 1)))
    raw = rng.normal(size=(n_pocket, raw_dim))
    z_pos = rng.normal(size=(n_lig, 3))
    z_feat = rng.normal(size=(n_lig, 4))
    return pocket_pos, raw, z_pos, z_feat


def denoiser_pipeline(model: DenoiserModel, pocket_pos, pocket_raw, z_pos, z_feat, t):
    """Raw features -> projection -> virtual receptor -> denoiser outputs."""
    with torch.no_grad():
        feat = mlp_forward(model.feat_proj, as_tensor(pocket_raw))
        vr_pos, vr_feat, _ = vr.encode(as_tensor(pocket_pos), feat, t, model.encoder)
        eps_pos, eps_feat = egnn.denoiser_forward(
            as_tensor(z_pos), as_tensor(z_feat), vr_pos, vr_feat, t, model.egnn
        )
    return eps_pos.numpy(), eps_feat.numpy()


def check_equivariance(
    seed=0,
    n_complexes=10,
    n_transforms=4,
    hidden=48,
    n_layers=3,
    n_virtual=8,
    tolerance=1e-5,
):
    """Denoiser position output must rotate with the inputs (translations
    cancel) and feature output must not move at all, reflections included."""
    rng = np.random.default_rng(seed)
    cfg = DenoiserConfig(
        timesteps=50,
        hidden=hidden,
        n_layers=n_layers,
        n_virtual=n_virtual,
        vr_width=24,
        vr_h_out=32,
        proj_dim=16,
    )
    model = init_denoiser_model(cfg, raw_feat_dim=20, rng=rng)
    worst = 0.0
    for _ in range(n_complexes):
        pocket_pos, raw, z_pos, z_feat = random_complex(rng)
        t = int(rng.integers(1, cfg.timesteps + 1))
        base_pos, base_feat = denoiser_pipeline(model, pocket_pos, raw, z_pos, z_feat, t)
        scale = max(np.abs(base_pos).max(), np.abs(base_feat).max(), 1e-12)
        for _ in range(n_transforms):
            g = geometry.random_rigid_transform(rng)
            got_pos, got_feat = denoiser_pipeline(
                model, g.apply(pocket_pos), raw, g.apply(z_pos), z_feat, t
            )
            err_pos = np.abs(got_pos - base_pos @ g.rotation.T).max()
            err_feat = np.abs(got_feat - base_feat).max()
            worst = max(worst, err_pos / scale, err_feat / scale)
    return _result(
        "denoiser_equivariance", "egnn", tolerance, worst < tolerance, {"max_rel_err": worst}
    )


# --- convexity ----------------------------------------------------------------


def check_convexity(seed=0, n_evals=500, tolerance=1e-9):
    """Weight rows are convex coefficients; virtual atoms stay in the
    coordinate-wise bounding box of the receptor."""
    rng = np.random.default_rng(seed)
    n_param_sets = max(1, n_evals // 200)
    evals_per = n_evals // n_param_sets
    worst_sum = 0.0
    worst_box = 0.0
    negatives = 0
    for _ in range(n_param_sets):
        feat_dim = int(rng.integers(2, 8))
        n_out = int(rng.integers(1, 12))
        params = vr.init_vr_params(
            rng, n_out=n_out, feat_dim=feat_dim, width=12, h_out=8, n_steps=50,
            with_fps_bias=bool(rng.integers(0, 2)),
        )
        # break the zero head so the logits are generic
        mapping = {
            k: as_tensor(rng.normal(scale=0.5, size=tuple(p.shape)))
            for k, p in params_flatten(params).items()
        }
        params = params_rebuild(params, mapping)
        for _ in range(evals_per):
            n = int(rng.integers(max(1, n_out), n_out + 20))
            pos = rng.normal(scale=5.0, size=(n, 3))
            feat = rng.normal(size=(n, feat_dim))
            t = int(rng.integers(0, 51))
            weights = vr.compute_weights(pos, feat, t, params)
            a = weights.A.numpy()
            negatives += int((a < 0).sum())
            worst_sum = max(worst_sum, np.abs(a.sum(axis=1) - 1.0).max())
            vr_pos = a @ pos
            lo, hi = pos.min(axis=0), pos.max(axis=0)
            worst_box = max(
                worst_box,
                float(np.maximum(lo - vr_pos, 0.0).max()),
                float(np.maximum(vr_pos - hi, 0.0).max()),
            )
    passed = negatives == 0 and worst_sum <= tolerance and worst_box <= 1e-9
    return _result(
        "convex_weight_certificate",
        "virtual_receptor",
        tolerance,
        passed,
        {"max_row_sum_err": worst_sum, "negatives": negatives, "max_box_excess": worst_box},
    )


# --- assignment ---------------------------------------------------------------


def brute_force_assignment(cost: np.ndarray):
    n = cost.shape[0]
    best_perm, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        c = sum(cost[i, perm[i]] for i in range(n))
        if c < best_cost:
            best_cost, best_perm = c, perm
    return np.array(best_perm), float(best_cost)


def check_assignment(seed=0, n_matrices=20, n=7, tolerance=0.0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_matrices):
        cost = rng.uniform(0.0, 10.0, size=(n, n))
        got = matching.hungarian(cost)
        _, want = brute_force_assignment(cost)
        worst = max(worst, abs(got.total_cost - want))
    return _result(
        "assignment_equals_enumeration", "matching", tolerance, worst <= tolerance,
        {"max_cost_gap": worst},
    )


# --- diffusion ----------------------------------------------------------------


def check_diffusion_consistency(seed=0, n_samples=20000, t_values=(1, 5, 20, 120, 400), T=500):
    """Chaining q(z_t | z0) with the posterior must reproduce the direct
    q(z_{t-1} | z0) marginal in mean and variance (3 standard errors)."""
    rng = np.random.default_rng(seed)
    sched = diffusion.build_schedule(T)
    z0 = 1.7
    worst = 0.0
    details = {}
    for t in t_values:
        a_t, a_prev = sched.alpha[t], sched.alpha[t - 1]
        s_t, s_prev = sched.sigma(t), sched.sigma(t - 1)
        z_t = a_t * z0 + s_t * rng.standard_normal(n_samples)
        u, v, w = diffusion.posterior_coefficients(sched, t)
        z_chain = u * z_t + v * z0 + np.sqrt(w) * rng.standard_normal(n_samples)
        if s_prev < 1e-14:
            # alpha_{t-1} = 1 exactly: the chained step must be the data itself
            exact = abs(z_chain.mean() - a_prev * z0) < 1e-12 and z_chain.var() < 1e-24
            details[str(t)] = {"deterministic_step_exact": bool(exact)}
            worst = max(worst, 0.0 if exact else np.inf)
            continue
        mean_se = s_prev / np.sqrt(n_samples)
        var_se = s_prev**2 * np.sqrt(2.0 / (n_samples - 1))
        mean_dev = abs(z_chain.mean() - a_prev * z0) / mean_se
        var_dev = abs(z_chain.var(ddof=1) - s_prev**2) / var_se
        details[str(t)] = {"mean_dev_se": mean_dev, "var_dev_se": var_dev}
        worst = max(worst, mean_dev, var_dev)
    return _result(
        "chained_posterior_marginal", "diffusion", 3.0, worst < 3.0, details
    )


def check_schedule(T=1000):
    sched = diffusion.build_schedule(T)
    snr = np.array([sched.snr(t) for t in range(T + 1)])
    ok = (
        sched.alpha[0] >= 1.0 - 1e-4
        and sched.alpha[-1] <= 1e-2
        and np.all(np.diff(sched.alpha) < 0)
        and np.all(np.diff(snr) < 0)
    )
    return _result(
        "schedule_endpoints_and_snr", "diffusion", 0.0, ok,
        {"alpha0": float(sched.alpha[0]), "alphaT": float(sched.alpha[-1])},
    )


# --- gradients ----------------------------------------------------------------


def finite_diff_check(loss_fn, leaves, rng, probes=100, h=1e-4, rtol=1e-4, atol=1e-9):
    """Central finite differences on randomly probed parameter coordinates.

    loss_fn maps a {name: tensor} dict to a torch scalar.
    """
    grad_leaves = {k: p.detach().requires_grad_(True) for k, p in leaves.items()}
    loss = loss_fn(grad_leaves)
    grads = torch.autograd.grad(loss, list(grad_leaves.values()), allow_unused=True)
    grad_map = {
        k: (torch.zeros_like(grad_leaves[k]) if g is None else g)
        for k, g in zip(grad_leaves.keys(), grads)
    }
    names = [k for k in leaves if leaves[k].numel() > 0]
    worst = 0.0
    failures = 0
    for _ in range(probes):
        k = names[int(rng.integers(len(names)))]
        flat = int(rng.integers(leaves[k].numel()))
        base = {kk: p.detach().clone() for kk, p in leaves.items()}
        base[k].view(-1)[flat] += h
        up = float(loss_fn(base))
        base[k].view(-1)[flat] -= 2 * h
        down = float(loss_fn(base))
        fd = (up - down) / (2 * h)
        g = float(grad_map[k].view(-1)[flat])
        err = abs(g - fd)
        bound = rtol * max(abs(g), abs(fd)) + atol
        worst = max(worst, err / max(abs(g), abs(fd), atol))
        if err > bound:
            failures += 1
    return worst, failures


def check_gradients(seed=0, probes=40):
    """Finite-difference sweep over every trainable path."""
    rng = np.random.default_rng(seed)
    failures = 0
    worst = 0.0
    details = {}

    # plain MLP
    params = diffcore.mlp_init([5, 8, 8, 3], rng)
    x = as_tensor(rng.normal(size=(4, 5)))
    target = as_tensor(rng.normal(size=(4, 3)))
    leaves = params_flatten(params)

    def mlp_loss(lv):
        live = params_rebuild(params, lv)
        return ((mlp_forward(live, x) - target) ** 2).mean()

    w, f = finite_diff_check(mlp_loss, leaves, rng, probes=probes)
    details["mlp"] = w
    worst, failures = max(worst, w), failures + f

    # denoiser stack (EGNN layers + projections + encoder weights through softmax)
    cfg = DenoiserConfig(
        timesteps=20, hidden=16, n_layers=2, n_virtual=4, vr_width=8, vr_h_out=12,
        proj_dim=6,
    )
    model = init_denoiser_model(cfg, raw_feat_dim=5, rng=rng)
    # small perturbation keeps the network sane while waking up the
    # zero-initialized heads so every path carries live gradient
    mapping = {
        k: p + as_tensor(rng.normal(scale=0.05, size=tuple(p.shape)))
        for k, p in params_flatten(model).items()
    }
    model = params_rebuild(model, mapping)
    pocket_pos, raw, z_pos, z_feat = random_complex(rng, n_pocket=7, n_lig=3, raw_dim=5)
    eps_target_pos = as_tensor(rng.normal(size=z_pos.shape))
    eps_target_feat = as_tensor(rng.normal(size=z_feat.shape))
    t = 7

    def denoiser_loss(lv):
        live = params_rebuild(model, lv)
        feat = mlp_forward(live.feat_proj, as_tensor(raw))
        vr_pos, vr_feat, _ = vr.encode(as_tensor(pocket_pos), feat, t, live.encoder)
        ep, ef = egnn.denoiser_forward(
            as_tensor(z_pos), as_tensor(z_feat), vr_pos, vr_feat, t, live.egnn
        )
        return ((ep - eps_target_pos) ** 2).mean() + ((ef - eps_target_feat) ** 2).mean()

    w, f = finite_diff_check(denoiser_loss, params_flatten(model), rng, probes=probes)
    details["denoiser"] = w
    worst, failures = max(worst, w), failures + f

    # autoencoder (encoder + decoder through the bipartite matching)
    pcfg = vr.PretrainConfig(
        n_virtual=4, steps=1, batch_size=1, width=8, h_out=10, proj_dim=6, n_steps=20
    )
    bundle = vr._bundle_init(pcfg, raw_feat_dim=5, pocket_size=9, rng=rng)
    bmap = {
        k: p + as_tensor(rng.normal(scale=0.05, size=tuple(p.shape)))
        for k, p in params_flatten(bundle).items()
    }
    bundle = params_rebuild(bundle, bmap)
    pkt_pos = as_tensor(rng.normal(scale=4.0, size=(9, 3)))
    pkt_raw = as_tensor(rng.normal(size=(9, 5)))
    sel = np.arange(4)

    # the pretraining objective detaches the virtual features, so the
    # encoder's xi_h gradient is zero by contract; probing it against finite
    # differences of the full function would compare different objects
    full_map = params_flatten(bundle)
    ae_leaves = {k: p for k, p in full_map.items() if not k.startswith("encoder.xi_h")}

    def ae_loss(lv):
        live = params_rebuild(bundle, {**full_map, **lv})
        return vr.reconstruction_loss(pkt_pos, pkt_raw, live, fps_sel=sel)

    w, f = finite_diff_check(ae_loss, ae_leaves, rng, probes=probes)
    details["autoencoder"] = w
    worst, failures = max(worst, w), failures + f

    # bipartite loss gradient against its closed form
    a = rng.normal(size=(6, 3))
    b = rng.normal(size=(6, 3))
    grad = matching.bipartite_loss_gradient(a, b)
    fd = np.zeros_like(b)
    h = 1e-6
    for i in range(b.shape[0]):
        for j in range(3):
            bp, bm = b.copy(), b.copy()
            bp[i, j] += h
            bm[i, j] -= h
            fd[i, j] = (matching.bipartite_loss(a, bp)[0] - matching.bipartite_loss(a, bm)[0]) / (2 * h)
    bip_err = float(np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-12))
    details["bipartite"] = bip_err
    worst = max(worst, bip_err)
    if bip_err > 1e-4:
        failures += 1

    return _result(
        "finite_difference_sweep", "diffcore", 1e-4, failures == 0,
        {"max_rel_err": worst, "paths": details, "failures": failures},
    )


# --- geometry -----------------------------------------------------------------


def check_fps_spread(seed=0, n_clouds=100):
    """Greedy FPS beats uniform random selection on min pairwise distance,
    in expectation over random clouds."""
    rng = np.random.default_rng(seed)
    fps_total, rand_total = 0.0, 0.0
    for _ in range(n_clouds):
        n = int(rng.integers(12, 40))
        k = int(rng.integers(4, 9))
        pos = rng.normal(scale=5.0, size=(n, 3))
        cloud = geometry.AtomCloud(positions=pos, features=np.zeros((n, 1)))
        sel = geometry.farthest_point_sample(cloud, k)
        fps_total += _min_pairwise(pos[sel])
        rand_total += _min_pairwise(pos[rng.choice(n, size=k, replace=False)])
    passed = fps_total > rand_total
    return _result(
        "fps_spread_beats_random", "geometry", 0.0, passed,
        {"fps_mean": fps_total / n_clouds, "random_mean": rand_total / n_clouds},
    )


def _min_pairwise(pos):
    diff = pos[:, None, :] - pos[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return float(d.min())


def check_frozen_receptor(seed=0):
    """Receptor node positions are bit-identical through the denoiser."""
    rng = np.random.default_rng(seed)
    params = egnn.init_egnn_params(
        rng, hidden=16, n_layers=3, lig_feat_dim=4, rec_feat_dim=6, t_dim=8, n_steps=20
    )
    graph = egnn.build_joint_graph(
        rng.normal(size=(5, 3)), rng.normal(size=(5, 4)),
        rng.normal(size=(7, 3)), rng.normal(size=(7, 6)), params,
    )
    before = graph.positions[5:].clone()
    t_enc = diffcore.time_encoding(3, 20, 8)
    for layer in params.layers:
        graph = egnn.egnn_layer(graph, layer, t_enc)
    same = bool(torch.equal(graph.positions[5:], before))
    return _result("frozen_positions_bit_identical", "egnn", 0.0, same, {})


def run_suite(seed=0):
    return [
        check_schedule(),
        check_assignment(seed=seed),
        check_convexity(seed=seed),
        check_diffusion_consistency(seed=seed),
        check_equivariance(seed=seed),
        check_gradients(seed=seed),
        check_fps_spread(seed=seed),
        check_frozen_receptor(seed=seed),
    ]
