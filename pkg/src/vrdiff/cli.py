"""Command-line entry points.

Subcommands: pretrain-vr, train, sample, bench, validate. Every command is
reproducible from (config, seed); flags win over the optional JSON config
file and the effective config is embedded in every output artifact. Exit
codes: 0 success, 1 validation/config problems, 2 runtime failures.
Set VRDIFF_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import dataio, embeddings, validation
from . import virtual_receptor as vr_mod
from .bench import BenchConfig, run_bench
from .diffusion import DiffusionState, build_schedule, sample as ancestral_sample
from .errors import ConfigError, FormatError, NumericsError, VrdiffError
from .geometry import center_complex, select_pocket
from .training import (
    DenoiserConfig,
    build_denoiser_fn,
    init_denoiser_model,
    load_autoencoder_checkpoint,
    load_denoiser_checkpoint,
    oracle_denoiser_fn,
    prepare_complex,
    save_autoencoder_checkpoint,
    save_denoiser_checkpoint,
    train_denoiser,
)

log = logging.getLogger("vrdiff")


def _setup_logging():
    level = os.environ.get("VRDIFF_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _merge(flag_value, cfg: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    return cfg.get(key, default)


def _require_file(path, what):
    if path is None:
        raise ConfigError(f"missing required {what}")
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _write_json(path, payload):
    text = json.dumps(payload, sort_keys=True, indent=2)
    if path is None:
        click.echo(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def _load_records(dataset_path):
    records = dataio.load_dataset(dataset_path)
    kept, rejected = dataio.filter_records(records)
    for rec_id, reason in rejected:
        log.info("filtered %s: %s", rec_id, reason)
    if not kept:
        raise ConfigError(f"no usable records in {dataset_path}")
    return kept


def _table_for(record_id, emb_path):
    if emb_path is None:
        return None
    p = Path(emb_path)
    if p.is_dir():
        f = p / f"{record_id}.emb"
        if not f.is_file():
            raise ConfigError(f"no embedding file for record {record_id}: {f}")
        return embeddings.read_embedding_file(f)
    return embeddings.read_embedding_file(p)


@click.group()
def cli():
    """Receptor-conditioned molecular diffusion with virtual receptors."""


@cli.command("pretrain-vr")
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--virtual-atoms", type=int, default=None)
@click.option("--steps", type=int, default=None, help="optimizer steps")
@click.option("--batch", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--pocket-atoms", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
def cmd_pretrain_vr(dataset, out, seed, virtual_atoms, steps, batch, lr, pocket_atoms, config_path):
    """Autoencoder pretraining of the virtual-receptor encoder/decoder."""
    cfgf = _load_config(config_path)
    dataset = _require_file(_merge(dataset, cfgf, "dataset", None), "dataset")
    out = _merge(out, cfgf, "out", None)
    if out is None:
        raise ConfigError("missing required --out")
    seed = _merge(seed, cfgf, "seed", None)
    if seed is None:
        raise ConfigError("--seed is mandatory for training")
    pcfg = vr_mod.PretrainConfig(
        n_virtual=_merge(virtual_atoms, cfgf, "virtual_atoms", 30),
        steps=_merge(steps, cfgf, "steps", 2000),
        batch_size=_merge(batch, cfgf, "batch", 8),
        lr=_merge(lr, cfgf, "lr", 3e-3),
        width=cfgf.get("width", 32),
        h_out=cfgf.get("h_out", 64),
        proj_dim=cfgf.get("proj_dim", 32),
        seed=int(seed),
    )
    n_pocket = _merge(pocket_atoms, cfgf, "pocket_atoms", 100)

    records = _load_records(dataset)
    pockets = []
    for rec in records:
        site = rec.ligand.positions.mean(axis=0)
        pocket = select_pocket(rec.receptor, site, count=n_pocket)
        pocket, _, _ = center_complex(pocket, rec.ligand)
        pockets.append(pocket)

    bundle, curve, (initial, final) = vr_mod.pretrain_autoencoder(pockets, pcfg)
    log.info("pretrain loss: initial %.6f final %.6f", initial, final)
    save_autoencoder_checkpoint(
        out,
        bundle,
        pcfg,
        raw_feat_dim=pockets[0].features.shape[1],
        pocket_size=len(pockets[0]),
        extra_meta={"effective_config": {"dataset": str(dataset), "pocket_atoms": n_pocket}},
    )
    _write_json(
        str(out) + ".losses.json",
        {
            "config": dataclasses.asdict(pcfg),
            "initial_loss": initial,
            "final_loss": final,
            "per_step": curve,
        },
    )
    click.echo(f"pretrained: loss {initial:.6f} -> {final:.6f} ({out})")
    if not final < initial:
        raise NumericsError("pretraining did not reduce the reconstruction loss")


@cli.command("train")
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--embeddings", "emb_path", type=click.Path(), default=None)
@click.option("--checkpoint", type=click.Path(), default=None, help="pretrained VR checkpoint")
@click.option("--from-scratch", is_flag=True, default=False)
@click.option("--resume", type=click.Path(), default=None, help="denoiser checkpoint to continue")
@click.option("--out", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--steps", "-T", "timesteps", type=int, default=None, help="diffusion timesteps")
@click.option("--virtual-atoms", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--opt-steps", type=int, default=None, help="optimizer steps (overrides --epochs)")
@click.option("--batch", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--hidden", type=int, default=None)
@click.option("--layers", type=int, default=None)
@click.option("--pocket-atoms", type=int, default=None)
@click.option("--checkpoint-every", type=int, default=0)
@click.option("--config", "config_path", type=click.Path(), default=None)
def cmd_train(dataset, emb_path, checkpoint, from_scratch, resume, out, seed, timesteps,
              virtual_atoms, epochs, opt_steps, batch, lr, hidden, layers, pocket_atoms,
              checkpoint_every, config_path):
    """Train the conditional denoiser (fine-tuning the encoder alongside)."""
    cfgf = _load_config(config_path)
    dataset = _require_file(_merge(dataset, cfgf, "dataset", None), "dataset")
    out = _merge(out, cfgf, "out", None)
    if out is None:
        raise ConfigError("missing required --out")
    seed = _merge(seed, cfgf, "seed", None)
    if seed is None:
        raise ConfigError("--seed is mandatory for training")
    sources = sum(1 for flag in (checkpoint, resume) if flag) + int(from_scratch)
    if sources != 1:
        raise ConfigError("pass exactly one of --checkpoint, --from-scratch, --resume")
    emb_path = _merge(emb_path, cfgf, "embeddings", None)

    records = _load_records(dataset)

    if resume is not None:
        _require_file(resume, "denoiser checkpoint")
        model, cfg, opt_state, rng, _meta = load_denoiser_checkpoint(resume)
    else:
        cfg = DenoiserConfig(
            timesteps=_merge(timesteps, cfgf, "timesteps", 500),
            hidden=_merge(hidden, cfgf, "hidden", 256),
            n_layers=_merge(layers, cfgf, "layers", 6),
            n_virtual=_merge(virtual_atoms, cfgf, "virtual_atoms", 30),
            vr_width=cfgf.get("vr_width", 64),
            vr_h_out=cfgf.get("vr_h_out", 256),
            proj_dim=cfgf.get("proj_dim", 256),
            pocket_atoms=_merge(pocket_atoms, cfgf, "pocket_atoms", 100),
            lr=_merge(lr, cfgf, "lr", 1e-4),
            steps=0,  # fixed below once the dataset size is known
            batch_size=_merge(batch, cfgf, "batch", 8),
            seed=int(seed),
        )
        n_epochs = _merge(epochs, cfgf, "epochs", 1)
        n_batches = max(1, (len(records) + cfg.batch_size - 1) // cfg.batch_size)
        total = _merge(opt_steps, cfgf, "opt_steps", n_epochs * n_batches)
        cfg = dataclasses.replace(cfg, steps=total)
        rng = np.random.default_rng(cfg.seed)
        if from_scratch:
            model = init_denoiser_model(cfg, raw_feat_dim=_raw_dim(records[0], emb_path), rng=rng)
        else:
            _require_file(checkpoint, "VR checkpoint")
            bundle, pcfg, _meta = load_autoencoder_checkpoint(checkpoint)
            if pcfg.n_virtual != cfg.n_virtual:
                raise ConfigError(
                    f"checkpoint has {pcfg.n_virtual} virtual atoms, requested {cfg.n_virtual}"
                )
            cfg = dataclasses.replace(
                cfg, vr_width=pcfg.width, vr_h_out=pcfg.h_out, proj_dim=pcfg.proj_dim
            )
            model = init_denoiser_model(cfg, raw_feat_dim=bundle.proj.in_dim, rng=rng)
            model.feat_proj = bundle.proj
            enc = bundle.encoder
            enc.n_steps = cfg.timesteps
            model.encoder = enc
        opt_state = None

    prepared = [
        prepare_complex(rec, cfg.n_virtual, cfg.pocket_atoms, _table_for(rec.id, emb_path))
        for rec in records
    ]
    raw_dim = prepared[0].pocket_raw.shape[1]
    if raw_dim != model.feat_proj.in_dim:
        raise ConfigError(
            f"model expects raw receptor features of dim {model.feat_proj.in_dim}, got {raw_dim}"
        )

    schedule = build_schedule(cfg.timesteps)
    result, opt_state = train_denoiser(
        prepared, cfg, model, schedule, rng, opt_state=opt_state,
        checkpoint_every=checkpoint_every, checkpoint_path=out,
    )
    for i, loss in enumerate(result.losses):
        log.info("step %d loss %.6f", opt_state.step - len(result.losses) + i + 1, loss)
    save_denoiser_checkpoint(
        out, result.model, cfg, opt_state, rng,
        extra_meta={"effective_config": {"dataset": str(dataset)}},
    )
    _write_json(str(out) + ".losses.json", {"config": dataclasses.asdict(cfg), "per_step": result.losses})
    final = result.losses[-1] if result.losses else float("nan")
    click.echo(f"trained {len(result.losses)} steps, final loss {final:.6f} ({out})")


def _raw_dim(record, emb_path):
    if emb_path is None:
        return record.receptor.features.shape[1]
    return _table_for(record.id, emb_path).dim


@cli.command("sample")
@click.option("--dataset", type=click.Path(), default=None, help="conditioning complexes")
@click.option("--record", "record_idx", type=int, default=0, help="record index in the dataset")
@click.option("--embeddings", "emb_path", type=click.Path(), default=None)
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--count", type=int, default=5)
@click.option("--ligand-atoms", type=int, default=None)
@click.option("--steps", "-T", "timesteps", type=int, default=None)
@click.option("--oracle", is_flag=True, default=False,
              help="self-test mode: replace the model with the true-noise oracle")
@click.option("--config", "config_path", type=click.Path(), default=None)
def cmd_sample(dataset, record_idx, emb_path, checkpoint, out, seed, count, ligand_atoms,
               timesteps, oracle, config_path):
    """Generate ligands for one receptor pocket."""
    cfgf = _load_config(config_path)
    dataset = _require_file(_merge(dataset, cfgf, "dataset", None), "dataset")
    out = _merge(out, cfgf, "out", None)
    seed = _merge(seed, cfgf, "seed", None)
    if seed is None:
        raise ConfigError("--seed is mandatory for sampling")
    records = _load_records(dataset)
    if not 0 <= record_idx < len(records):
        raise ConfigError(f"record index {record_idx} outside dataset of {len(records)}")
    record = records[record_idx]

    if oracle:
        timesteps = _merge(timesteps, cfgf, "timesteps", 500)
        n_virtual = min(30, len(record.receptor))
        prep = prepare_complex(record, n_virtual, min(100, len(record.receptor)),
                               _table_for(record.id, emb_path))
        schedule = build_schedule(timesteps)
        z0 = DiffusionState(positions=prep.lig_pos, features=prep.lig_feat, t=0)
        denoiser = oracle_denoiser_fn(z0, schedule)
        n_atoms_default = len(record.ligand)
    else:
        _require_file(checkpoint, "denoiser checkpoint")
        model, dcfg, _opt, _rng, _meta = load_denoiser_checkpoint(checkpoint)
        prep = prepare_complex(record, dcfg.n_virtual, dcfg.pocket_atoms,
                               _table_for(record.id, emb_path))
        schedule = build_schedule(dcfg.timesteps if timesteps is None else timesteps)
        denoiser = build_denoiser_fn(model, prep)
        n_atoms_default = len(record.ligand)

    n_atoms = _merge(ligand_atoms, cfgf, "ligand_atoms", n_atoms_default)
    rng = np.random.default_rng(int(seed))
    molecules = []
    for _ in range(count):
        t0 = time.perf_counter()
        result = ancestral_sample(denoiser, n_atoms, schedule, rng)
        wall = time.perf_counter() - t0
        types = "".join(dataio.LIGAND_ELEMENTS[i] for i in result.type_indices)
        molecules.append(
            {
                "positions": (result.positions + prep.offset).tolist(),
                "types": types,
                "wall_time_s": wall,
            }
        )
    payload = {
        "config": {
            "dataset": str(dataset),
            "record": record.id,
            "seed": int(seed),
            "count": count,
            "ligand_atoms": n_atoms,
            "timesteps": schedule.T,
            "oracle": oracle,
        },
        "molecules": molecules,
    }
    _write_json(out, payload)
    if out:
        click.echo(f"wrote {count} molecules to {out}")


@cli.command("bench")
@click.option("--out", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--virtual-atoms", type=int, default=30)
@click.option("--pocket-atoms", type=int, default=100)
@click.option("--ligand-atoms", type=int, default=19)
@click.option("--hidden", type=int, default=64)
@click.option("--layers", type=int, default=6)
@click.option("--reps", type=int, default=20)
def cmd_bench(out, seed, virtual_atoms, pocket_atoms, ligand_atoms, hidden, layers, reps):
    """Denoiser forward-time comparison: virtual receptor vs full pocket."""
    cfg = BenchConfig(
        pocket_atoms=pocket_atoms,
        n_virtual=virtual_atoms,
        ligand_atoms=ligand_atoms,
        hidden=hidden,
        n_layers=layers,
        reps=reps,
        seed=seed,
    )
    report = run_bench(cfg)
    report["config"] = dataclasses.asdict(cfg)
    _write_json(out, report)
    click.echo(
        f"virtual {report['virtual_median_s'] * 1e3:.2f} ms vs "
        f"full pocket {report['full_pocket_median_s'] * 1e3:.2f} ms "
        f"(ratio {report['speedup_ratio']:.2f}x)"
    )


@cli.command("validate")
@click.option("--out", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--embeddings", "emb_path", type=click.Path(), default=None,
              help="also validate this embedding file / directory")
def cmd_validate(out, seed, emb_path):
    """Run the invariant suites of all modules and report pass/fail."""
    results = validation.run_suite(seed=seed)
    if emb_path is not None:
        results.append(_validate_embeddings(emb_path))
    report = {
        "config": {"seed": seed},
        "passed": all(r["passed"] for r in results),
        "properties": results,
    }
    _write_json(out, report)
    for r in results:
        click.echo(f"[{'PASS' if r['passed'] else 'FAIL'}] {r['module']}.{r['name']}")
    if not report["passed"]:
        raise ConfigError("validation failed")


def _validate_embeddings(path):
    p = Path(path)
    files = sorted(p.glob("*.emb")) if p.is_dir() else [p]
    try:
        counts = []
        for f in files:
            table = embeddings.read_embedding_file(f)
            counts.append({"file": f.name, "rows": len(table.rows), "dim": table.dim,
                           "model_tag": table.model_tag})
        return {
            "name": "embedding_files_parse",
            "module": "embeddings",
            "tolerance": 0.0,
            "passed": True,
            "detail": {"files": counts},
        }
    except (FormatError, OSError) as exc:
        return {
            "name": "embedding_files_parse",
            "module": "embeddings",
            "tolerance": 0.0,
            "passed": False,
            "detail": {"error": str(exc)},
        }


def main(argv=None):
    _setup_logging()
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except (ConfigError, FormatError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except VrdiffError as exc:
        click.echo(f"runtime error: {exc}", err=True)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        click.echo(f"unexpected error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
