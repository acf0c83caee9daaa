"""Command-line operator surface.

Training commands run locally; `generate` can either run locally from the
checkpoint directory or act as a thin client against a running API server
(`--server http://host:port`).

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 runtime
failure.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .config import VERSION, ConfigError, RunConfig, desk_scale_config
from .data import ACTIONS, DatasetError, generate_corpus, load_dataset, load_object_specs
from .hand import HandParams, forward_kinematics, procedural_backend
from .meshio import save_obj
from .motion import read_clip, read_jsonl, write_jsonl
from .pipeline import CHECKPOINT_FILES, GenerationPipeline, PipelineError, evaluate_generation
from .textenc import make_encoder
from .train import load_model, save_checkpoint, train_contact, train_length, train_motion, train_refiner

EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_RUNTIME = 4


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return desk_scale_config()
    return RunConfig.load(path)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (FileNotFoundError, PipelineError, DatasetError) as exc:
            click.echo(f"missing prerequisite: {exc}", err=True)
            sys.exit(EXIT_PREREQ)
        except Exception as exc:  # noqa: BLE001 - boundary: map to exit code 4
            click.echo(f"runtime failure: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)
    return wrapper


config_option = click.option("--config", "-c", "config_path", default=None,
                             type=click.Path(), help="TOML/JSON run config "
                             "(default: built-in desk-scale config).")


@click.group()
@click.version_option(VERSION)
def main():
    """Text-conditioned hand-object interaction generation."""


@main.command("prepare-data")
@config_option
@click.option("--out", required=True, type=click.Path(), help="Corpus directory.")
@click.option("--clips", default=600, show_default=True, type=int)
@click.option("--seed", default=None, type=int, help="Override config seed.")
@handle_errors
def prepare_data(config_path, out, clips, seed):
    """Generate a synthetic training corpus."""
    cfg = _load_config(config_path)
    manifest = generate_corpus(out, n_clips=clips, n_points=cfg.n_points,
                               seed=cfg.seed if seed is None else seed)
    click.echo(f"wrote {manifest['counts']['clips']} clips, "
               f"{manifest['counts']['prompts']} prompts to {out}")


def _load_training_inputs(cfg: RunConfig, data: str):
    clips, _ = load_dataset(data)
    if not clips:
        raise DatasetError(f"{data}: corpus contains no clips")
    specs = load_object_specs(data, n_points=cfg.n_points)
    encoder = make_encoder(cfg.encoder, seed=cfg.seed)
    return clips, specs, encoder


def _echo_progress(stage):
    def cb(step, loss):
        click.echo(f"[{stage}] step {step} loss {loss:.5f}")
    return cb


@main.command("train-contact")
@config_option
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", required=True, type=click.Path())
@handle_errors
def train_contact_cmd(config_path, data, checkpoints):
    """Train the contact-map predictor (stage 1)."""
    cfg = _load_config(config_path)
    clips, specs, encoder = _load_training_inputs(cfg, data)
    model = train_contact(clips, specs, encoder, cfg, progress=_echo_progress("contact"))
    ckpt = Path(checkpoints)
    ckpt.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt / CHECKPOINT_FILES["contact"], "contact", model, cfg)
    click.echo(f"saved {ckpt / CHECKPOINT_FILES['contact']} ({cfg.stamp()})")


@main.command("train-motion")
@config_option
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", required=True, type=click.Path())
@handle_errors
def train_motion_cmd(config_path, data, checkpoints):
    """Train the motion diffusion model and length predictor (stage 2).

    Requires the stage-1 contact checkpoint.
    """
    cfg = _load_config(config_path)
    ckpt = Path(checkpoints)
    contact_path = ckpt / CHECKPOINT_FILES["contact"]
    if not contact_path.exists():
        raise PipelineError(f"{contact_path} not found; run train-contact first")
    contact_model, _ = load_model(contact_path, "contact")
    clips, specs, encoder = _load_training_inputs(cfg, data)
    model = train_motion(clips, specs, contact_model, encoder, cfg,
                         progress=_echo_progress("motion"))
    save_checkpoint(ckpt / CHECKPOINT_FILES["motion"], "motion", model, cfg)
    length_model = train_length(clips, encoder, cfg)
    save_checkpoint(ckpt / CHECKPOINT_FILES["length"], "length", length_model, cfg)
    click.echo(f"saved {ckpt / CHECKPOINT_FILES['motion']} and "
               f"{ckpt / CHECKPOINT_FILES['length']} ({cfg.stamp()})")


@main.command("train-refiner")
@config_option
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", required=True, type=click.Path())
@click.option("--generator-samples", default=0, show_default=True, type=int,
              help="Train on this many diffusion-sampled motions (needs motion.pt); "
                   "0 falls back to noised ground truth.")
@handle_errors
def train_refiner_cmd(config_path, data, checkpoints, generator_samples):
    """Train the hand refiner (stage 3).  Requires the contact checkpoint."""
    cfg = _load_config(config_path)
    ckpt = Path(checkpoints)
    contact_path = ckpt / CHECKPOINT_FILES["contact"]
    if not contact_path.exists():
        raise PipelineError(f"{contact_path} not found; run train-contact first")
    contact_model, _ = load_model(contact_path, "contact")
    clips, specs, encoder = _load_training_inputs(cfg, data)
    generated = None
    if generator_samples > 0:
        motion_path = ckpt / CHECKPOINT_FILES["motion"]
        if not motion_path.exists():
            raise PipelineError(f"{motion_path} not found; run train-motion first "
                                "or drop --generator-samples")
        pipe = GenerationPipeline.load(ckpt)
        rng = np.random.default_rng(cfg.seed)
        generated = []
        for _ in range(generator_samples):
            ci = int(rng.integers(len(clips)))
            res = pipe.generate(clips[ci].text, specs[clips[ci].object_id],
                                refine=False, seed=int(rng.integers(2 ** 31)),
                                hand_type=clips[ci].hand_type,
                                length=len(clips[ci].seq))
            generated.append((ci, res.seq))
    model = train_refiner(clips, specs, contact_model, encoder, cfg,
                          generated=generated, progress=_echo_progress("refiner"))
    save_checkpoint(ckpt / CHECKPOINT_FILES["refiner"], "refiner", model, cfg)
    click.echo(f"saved {ckpt / CHECKPOINT_FILES['refiner']} ({cfg.stamp()})")


@main.command("generate")
@click.option("--text", required=True)
@click.option("--object", "object_path", required=True, type=click.Path(exists=True),
              help="Object mesh (.obj/.ply; articulation sidecar honored).")
@click.option("--checkpoints", default="checkpoints", show_default=True, type=click.Path())
@click.option("--refine/--no-refine", default=True, show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--length", default=None, type=int, help="Override the predicted length.")
@click.option("--out", default="motion.jsonl", show_default=True, type=click.Path())
@click.option("--export-dir", default=None, type=click.Path(),
              help="Also export per-frame OBJ files here.")
@click.option("--server", default=None, help="POST to a running API server "
              "instead of loading checkpoints locally.")
@handle_errors
def generate_cmd(text, object_path, checkpoints, refine, seed, length, out,
                 export_dir, server):
    """Generate a motion for a prompt and object mesh."""
    if server is not None:
        _generate_via_server(server, text, object_path, refine, seed, length, out)
        return
    pipe = GenerationPipeline.load(checkpoints, require_refiner=refine)
    spec = pipe.load_object(object_path)
    res = pipe.generate(text, spec, seed=seed, refine=refine, length=length)
    header = {"text": text, "hand_type": res.hand_type, "seed": seed,
              "refined": res.refined, "object": str(object_path),
              **pipe.cfg.stamp()}
    write_jsonl(out, res.seq, header=header)
    click.echo(f"wrote {out} (hand_type={res.hand_type}, L={res.length})")
    if export_dir:
        from .meshio import load_articulation_sidecar
        _export_sequence(res.seq, spec, Path(export_dir), header,
                         articulation=load_articulation_sidecar(object_path))
        click.echo(f"exported OBJ sequence to {export_dir}")


def _generate_via_server(server, text, object_path, refine, seed, length, out):
    import httpx

    payload = {"text": text, "object_source": str(object_path), "refine": refine,
               "seed": seed, "length": length}
    resp = httpx.post(server.rstrip("/") + "/generate", json=payload, timeout=600.0)
    if resp.status_code != 200:
        raise RuntimeError(f"server returned {resp.status_code}: {resp.text}")
    data = resp.json()
    from .motion import MotionSequence
    seq = MotionSequence(np.array(data["lhand"]), np.array(data["rhand"]),
                         np.array(data["obj"]), hand_type=data["hand_type"])
    write_jsonl(out, seq, header={"text": text, "hand_type": data["hand_type"],
                                  "seed": seed, "refined": data["refined"],
                                  "object": str(object_path)})
    click.echo(f"wrote {out} (hand_type={data['hand_type']}, L={len(seq)})")


def _export_sequence(seq, spec, export_dir: Path, header: dict,
                     articulation: dict | None = None):
    """Per-frame OBJ files (object mesh posed + hand point sets) + manifest.

    articulation is the vertex-level sidecar dict (the spec only keeps
    point-level labels)."""
    from .geometry import axis_angle_matrix, rot6d_to_matrix

    export_dir.mkdir(parents=True, exist_ok=True)
    backends = {"left": procedural_backend("left"), "right": procedural_backend("right")}
    active = [s for s in ("left", "right") if seq.hand_type in (s, "both")]
    files = []
    for l in range(len(seq)):
        R = rot6d_to_matrix(torch.as_tensor(seq.obj[l, 3:9])).numpy()
        t = seq.obj[l, :3]
        verts = spec.vertices.copy()
        if articulation is not None and articulation.get("enabled", True):
            A = axis_angle_matrix(torch.as_tensor(np.asarray(articulation["axis"], dtype=float)),
                                  torch.as_tensor(float(seq.obj[l, 9]))).numpy()
            ids = np.asarray(articulation["part_vertex_ids"], dtype=np.int64)
            o = np.asarray(articulation["origin"], dtype=float)
            verts[ids] = (verts[ids] - o) @ A.T + o
        verts = verts @ R.T + t
        name = f"object_{l:04d}.obj"
        save_obj(export_dir / name, verts, spec.faces)
        files.append(name)
        for side in active:
            params = HandParams.from_vector(
                torch.as_tensor(seq.lhand[l] if side == "left" else seq.rhand[l]),
                side=side)
            _, hv = forward_kinematics(params, backends[side])
            name = f"hand_{side}_{l:04d}.obj"
            save_obj(export_dir / name, hv.numpy(), np.zeros((0, 3), dtype=np.int64))
            files.append(name)
    with open(export_dir / "manifest.json", "w") as fh:
        json.dump({"frames": len(seq), "files": files, **header}, fh, indent=1)


@main.command("evaluate")
@config_option
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", required=True, type=click.Path())
@click.option("--runs", default=None, type=int, help="Override config eval_runs.")
@click.option("--samples-per-run", default=8, show_default=True, type=int)
@click.option("--out", default="report.json", show_default=True, type=click.Path())
@handle_errors
def evaluate_cmd(config_path, data, checkpoints, runs, samples_per_run, out):
    """Evaluate generation quality against a corpus (repeated-run protocol)."""
    from .metrics import train_classifier, zero_inactive_hands

    cfg = _load_config(config_path)
    pipe = GenerationPipeline.load(checkpoints)
    clips, _ = load_dataset(data)
    specs = load_object_specs(data, n_points=pipe.cfg.n_points)
    actions = sorted({c.action for c in clips})
    classifier = train_classifier([zero_inactive_hands(c.seq) for c in clips],
                                  [actions.index(c.action) for c in clips],
                                  n_classes=len(actions), hidden=cfg.classifier_hidden,
                                  seed=cfg.seed)
    n_runs = runs if runs is not None else cfg.eval_runs
    report = evaluate_generation(pipe, clips, specs, classifier, actions,
                                 n_runs=n_runs, samples_per_run=samples_per_run,
                                 seed=cfg.seed,
                                 progress=lambda r, m: click.echo(f"run {r}: {m}"))
    payload = json.loads(report.to_json())
    payload.update(cfg.stamp())
    with open(out, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    click.echo(f"wrote {out}")
    for name, agg in report.aggregate().items():
        click.echo(f"{name}: {agg['mean']:.4f} +/- {agg['ci95']:.4f}")


@main.command("export")
@click.option("--motion", required=True, type=click.Path(exists=True),
              help="A .jsonl or .hoc motion file.")
@click.option("--object", "object_path", required=True, type=click.Path(exists=True))
@click.option("--n-points", default=128, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def export_cmd(motion, object_path, n_points, out):
    """Export a stored motion as a per-frame OBJ sequence."""
    from .geometry import canonicalize_object
    from .meshio import load_articulation_sidecar, load_mesh

    path = Path(motion)
    if path.suffix == ".hoc":
        seq, header = read_clip(path)
    else:
        seq, header = read_jsonl(path)
    verts, faces = load_mesh(object_path)
    sidecar = load_articulation_sidecar(object_path)
    spec = canonicalize_object(verts, faces, n=n_points, articulation=sidecar)
    _export_sequence(seq, spec, Path(out), dict(header), articulation=sidecar)
    click.echo(f"exported {len(seq)} frames to {out}")


@main.command("serve")
@click.option("--checkpoints", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@handle_errors
def serve_cmd(checkpoints, host, port):
    """Run the HTTP generation service."""
    import uvicorn

    from .service import create_app

    app = create_app(checkpoints)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
