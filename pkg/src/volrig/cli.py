"""Command-line interface: featurize / synth / train / predict / eval /
inspect.  Every command writes a run manifest next to its outputs."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .features import CHANNEL_NAMES, dump_channel, featurize, load_channel, write_pgm_slice
from .manifest import RunManifest
from .mesh import MeshError, load_mesh, normalize_mesh
from .metrics import MATCH_TOLERANCE, evaluate_dataset
from .network import DEFAULT_GRANULARITY, NetworkConfig, load_checkpoint, save_checkpoint
from .rig import RigError, load_rig, parse_rig, save_rig
from .synth import KINDS, write_character
from .training import TrainConfig, train


@click.group()
def main():
    """Volumetric animation-skeleton prediction pipeline."""


def _fail(msg, code=1):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


@main.command("featurize")
@click.argument("mesh_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--resolution", default=88, show_default=True, help="Grid resolution.")
@click.option("--samples", default=10000, show_default=True, help="Surface sample count.")
@click.option("--seed", default=0, show_default=True)
@click.option("--threads", default=1, show_default=True, help="Worker cap (unused here).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cli_featurize(mesh_path, resolution, samples, seed, threads, out_dir):
    """Compute the 5 shape channels of a mesh and dump them as raw volumes."""
    manifest = RunManifest("featurize", config={"resolution": resolution,
                                               "samples": samples}, seed=seed)
    manifest.add_input(mesh_path)
    try:
        mesh, _ = normalize_mesh(load_mesh(mesh_path))
        channels, mask, _surface = featurize(mesh, resolution, n_samples=samples,
                                             seed=seed)
    except MeshError as exc:
        _fail(str(exc))
    out_dir = Path(out_dir)
    grid = channels.grid
    for i, name in enumerate(CHANNEL_NAMES):
        ch = channels.data[..., i]
        dump_channel(ch, grid, name, out_dir)
        manifest.add_output(out_dir / f"{name}.f32")
        click.echo(f"{name:>4}: min {ch.min():+.5f}  max {ch.max():+.5f}  "
                   f"mean {ch.mean():+.5f}")
    dump_channel(mask.data.astype(np.float32), grid, "mask", out_dir)
    manifest.add_output(out_dir / "mask.f32")
    click.echo(f"mask: {mask.count} occupied voxels of {resolution ** 3}")
    header = {"resolution": grid.resolution, "cell_size": grid.cell_size,
              "origin": [float(x) for x in grid.origin],
              "channels": list(CHANNEL_NAMES) + ["mask"]}
    (out_dir / "header.json").write_text(json.dumps(header, indent=2) + "\n")
    manifest.write(out_dir / "manifest.json")


@main.command("synth")
@click.option("--kind", type=click.Choice(KINDS), required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", default=".", type=click.Path(file_okay=False))
def cli_synth(kind, seed, out_dir):
    """Generate a synthetic rigged character (mesh + rig pair)."""
    manifest = RunManifest("synth", config={"kind": kind}, seed=seed)
    rig_path = write_character(out_dir, kind, seed)
    manifest.add_output(rig_path)
    manifest.add_output(rig_path.with_suffix(".obj"))
    manifest.write(Path(out_dir) / f"{rig_path.stem}.manifest.json")
    click.echo(f"wrote {rig_path}")


@main.command("train")
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON training configuration; flags override its values.")
@click.option("--iterations", type=int, default=None)
@click.option("--resolution", type=int, default=None)
@click.option("--modules", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--augment", type=int, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--out", "out_stem", required=True,
              help="Checkpoint stem (writes STEM.json + STEM.bin + STEM.loss.jsonl).")
def cli_train(data_dir, config_path, iterations, resolution, modules, seed, lr,
              augment, threads, out_stem):
    """Train the stacked hourglass on every rig file under --data."""
    cfg = {}
    if config_path:
        cfg.update(json.loads(Path(config_path).read_text()))
    for key, val in [("iterations", iterations), ("resolution", resolution),
                     ("num_modules", modules), ("seed", seed), ("lr", lr),
                     ("augment_count", augment), ("threads", threads)]:
        if val is not None:
            cfg[key] = val
    try:
        config = TrainConfig(**cfg)
    except (TypeError, ValueError) as exc:
        _fail(f"bad training configuration: {exc}")

    rig_paths = sorted(Path(data_dir).glob("*.rig"))
    if not rig_paths:
        _fail(f"no .rig files under {data_dir}")
    dataset = []
    bad = []
    for p in rig_paths:
        try:
            dataset.append(load_rig(p))
        except (RigError, MeshError, OSError) as exc:
            bad.append(f"{p}: {exc}")
    if bad:
        _fail("invalid rig files:\n  " + "\n  ".join(bad))

    manifest = RunManifest("train", config=config.to_dict(), seed=config.seed)
    for p in rig_paths:
        manifest.add_input(p)
    log_path = Path(out_stem + ".loss.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    result = train(dataset, config, log_path=log_path,
                   progress=lambda it, v: click.echo(f"iter {it:5d}  loss {v:.6f}"))
    save_checkpoint(result.net, out_stem)
    for suffix in (".json", ".bin"):
        manifest.add_output(out_stem + suffix)
    manifest.add_output(log_path)
    manifest.write(out_stem + ".manifest.json")
    if result.losses:
        click.echo(f"final loss {result.losses[-1]:.6f} "
                   f"(initial {result.losses[0]:.6f})")


@main.command("predict")
@click.argument("mesh_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", "ckpt_stem", required=True)
@click.option("--granularity", default=DEFAULT_GRANULARITY, show_default=True)
@click.option("--resolution", type=int, default=None,
              help="Must match the checkpoint resolution when given.")
@click.option("--seed", default=0, show_default=True)
@click.option("--threads", default=1, show_default=True)
@click.option("--dump-maps", "dump_dir", type=click.Path(file_okay=False),
              help="Also dump the probability volumes to this directory.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cli_predict(mesh_path, ckpt_stem, granularity, resolution, seed, threads,
                dump_dir, out_path):
    """Predict an animation skeleton for a mesh and write it as a rig file."""
    from .extract import predict
    if not Path(ckpt_stem + ".json").exists():
        _fail(f"checkpoint not found: {ckpt_stem}.json", code=2)
    net = load_checkpoint(ckpt_stem)
    if resolution is not None and resolution != net.config.resolution:
        _fail(f"resolution mismatch: checkpoint was trained at "
              f"{net.config.resolution}, requested {resolution}")
    manifest = RunManifest("predict",
                           config={"granularity": granularity,
                                   "resolution": net.config.resolution},
                           seed=seed)
    manifest.add_input(mesh_path)
    manifest.add_input(ckpt_stem + ".bin")
    try:
        mesh, _ = normalize_mesh(load_mesh(mesh_path))
    except MeshError as exc:
        _fail(str(exc))
    try:
        result = predict(mesh, net, granularity=granularity)
    except ValueError as exc:
        _fail(f"no skeleton extracted: {exc}")
    for cand in result.joints:
        assert result.mask.data[cand.voxel], "joint outside the shape mask"
    save_rig(result.skeleton, out_path)
    manifest.add_output(out_path)
    if dump_dir:
        dump_channel(result.joint_map, result.grid, "prob_joints", dump_dir)
        dump_channel(result.bone_map, result.grid, "prob_bones", dump_dir)
        manifest.add_output(Path(dump_dir) / "prob_joints.f32")
        manifest.add_output(Path(dump_dir) / "prob_bones.f32")
    manifest.write(Path(out_path).with_suffix(".manifest.json"))
    click.echo(f"{result.skeleton.n_joints} joints, "
               f"{len(result.skeleton.edges)} bones -> {out_path}")


@main.command("eval")
@click.option("--pred", "pred_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--ref", "ref_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--mesh", "mesh_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--tol", default=MATCH_TOLERANCE, show_default=True)
@click.option("--strict", is_flag=True,
              help="Exit nonzero when any shape is flagged or errors out.")
@click.option("--out", "out_json", type=click.Path(dir_okay=False))
def cli_eval(pred_dir, ref_dir, mesh_dir, tol, strict, out_json):
    """Compare predicted and reference rigs (matched by file stem)."""
    ref_paths = sorted(Path(ref_dir).glob("*.rig"))
    if not ref_paths:
        _fail(f"no .rig files under {ref_dir}")
    pairs = []
    for ref_path in ref_paths:
        stem = ref_path.stem
        pred_path = Path(pred_dir) / f"{stem}.rig"
        mesh_path = Path(mesh_dir) / f"{stem}.obj"
        if not pred_path.exists():
            _fail(f"missing prediction {pred_path}", code=2)
        if not mesh_path.exists():
            _fail(f"missing mesh {mesh_path}", code=2)
        pred, _ = parse_rig(pred_path)
        ref, _ = parse_rig(ref_path)
        pairs.append((stem, pred, ref, load_mesh(mesh_path)))
    report = evaluate_dataset(pairs, tol=tol)
    click.echo(report.table())
    manifest = RunManifest("eval", config={"tolerance": tol})
    if out_json:
        report.to_json(out_json)
        manifest.add_output(out_json)
        manifest.write(Path(out_json).with_suffix(".manifest.json"))
    if strict and any(r.flagged or r.error for r in report.rows):
        sys.exit(1)


@main.command("inspect")
@click.argument("dump_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--channel", required=True, help="Channel name (e.g. sdf, mask).")
@click.option("--axis", default=2, show_default=True, type=click.IntRange(0, 2))
@click.option("--index", default=None, type=int,
              help="Slice index; defaults to the middle.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cli_inspect(dump_dir, channel, axis, index, out_path):
    """Write a PGM cross-section of a dumped channel or probability map."""
    try:
        volume, grid = load_channel(dump_dir, channel)
    except FileNotFoundError as exc:
        _fail(f"channel not found: {exc}", code=2)
    if index is None:
        index = grid.resolution // 2
    if not 0 <= index < grid.resolution:
        _fail(f"slice index {index} out of range [0, {grid.resolution})")
    write_pgm_slice(volume, axis, index, out_path)
    click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
