"""End-to-end generation pipeline: prompt -> hand type -> length -> contact
map -> motion sample -> optional hand refinement.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np
import torch

from . import contact as contact_mod
from .config import RunConfig
from .contact import ContactNet
from .diffusion import ConditionBundle, MotionDenoiser, make_schedule, sample
from .geometry import ObjectSpec, canonicalize_object
from .hand import procedural_backend
from .meshio import load_articulation_sidecar, load_mesh
from .motion import MotionSequence
from .refiner import HandRefiner, refine_motion
from .textenc import LengthPredictor, make_encoder, select_hand_type
from .train import load_model

log = logging.getLogger(__name__)

CHECKPOINT_FILES = {"contact": "contact.pt", "motion": "motion.pt",
                    "refiner": "refiner.pt", "length": "length.pt"}


class PipelineError(RuntimeError):
    pass


@dataclasses.dataclass
class GenerationResult:
    seq: MotionSequence
    text: str
    hand_type: str
    length: int
    contact: np.ndarray
    refined: bool
    seed: int


class GenerationPipeline:
    """Holds the trained stages and runs text-to-motion generation."""

    def __init__(self, cfg: RunConfig, contact_model: ContactNet,
                 denoiser: MotionDenoiser, length_model: LengthPredictor,
                 refiner: HandRefiner | None = None, encoder=None):
        self.cfg = cfg
        self.contact_model = contact_model
        self.denoiser = denoiser
        self.length_model = length_model
        self.refiner = refiner
        self.encoder = encoder or make_encoder(cfg.encoder, seed=cfg.seed)
        self.schedule = make_schedule(cfg.diffusion_steps)
        self.backend_left = procedural_backend("left")
        self.backend_right = procedural_backend("right")

    @classmethod
    def load(cls, checkpoint_dir, require_refiner: bool = False) -> "GenerationPipeline":
        ckpt = Path(checkpoint_dir)
        for kind in ("contact", "motion", "length"):
            if not (ckpt / CHECKPOINT_FILES[kind]).exists():
                raise PipelineError(f"missing {kind} checkpoint in {ckpt}")
        contact_model, cfg = load_model(ckpt / CHECKPOINT_FILES["contact"], "contact")
        denoiser, _ = load_model(ckpt / CHECKPOINT_FILES["motion"], "motion")
        length_model, _ = load_model(ckpt / CHECKPOINT_FILES["length"], "length")
        refiner = None
        if (ckpt / CHECKPOINT_FILES["refiner"]).exists():
            refiner, _ = load_model(ckpt / CHECKPOINT_FILES["refiner"], "refiner")
        elif require_refiner:
            raise PipelineError(f"missing refiner checkpoint in {ckpt}")
        return cls(cfg, contact_model, denoiser, length_model, refiner=refiner)

    def load_object(self, mesh_path) -> ObjectSpec:
        verts, faces = load_mesh(mesh_path)
        articulation = load_articulation_sidecar(mesh_path)
        return canonicalize_object(verts, faces, n=self.cfg.n_points,
                                   articulation=articulation)

    def condition(self, text: str, spec: ObjectSpec,
                  generator: torch.Generator) -> ConditionBundle:
        emb = torch.as_tensor(self.encoder.encode(text), dtype=torch.float32)
        pts = torch.as_tensor(spec.points_norm, dtype=torch.float32).unsqueeze(0)
        z = torch.randn(1, contact_mod.CONTACT_LATENT_DIM, generator=generator)
        with torch.no_grad():
            out = self.contact_model(pts, torch.tensor([spec.scale], dtype=torch.float32),
                                     emb.unsqueeze(0), z=z)
        return ConditionBundle(text_emb=emb, object_feat=out["global_feat"][0],
                               contact=out["contact"][0], scale=spec.scale)

    def generate(self, text: str, spec: ObjectSpec, seed: int = 0,
                 refine: bool = True, length: int | None = None,
                 hand_type: str | None = None) -> GenerationResult:
        generator = torch.Generator().manual_seed(seed)
        hand_type = hand_type or select_hand_type(text, self.encoder)
        cond = self.condition(text, spec, generator)
        if length is None:
            length = self.length_model.predict(cond.text_emb, generator=generator)
            length = min(length, self.cfg.l_max)
        if not 1 <= length <= self.cfg.l_max:
            raise PipelineError(f"length {length} outside [1, {self.cfg.l_max}]")
        seq = sample(self.denoiser, self.schedule, cond, length, hand_type,
                     generator=generator)
        refined = False
        if refine:
            if self.refiner is None:
                raise PipelineError("refinement requested but no refiner is loaded")
            seq = refine_motion(self.refiner, seq, spec, self.backend_left,
                                self.backend_right, cond.contact)
            refined = True
        return GenerationResult(seq=seq, text=text, hand_type=hand_type,
                                length=length, contact=cond.contact.numpy(),
                                refined=refined, seed=seed)

    def contact_map(self, text: str, spec: ObjectSpec, seed: int = 0) -> np.ndarray:
        generator = torch.Generator().manual_seed(seed)
        return self.condition(text, spec, generator).contact.numpy()


def evaluate_generation(pipeline: GenerationPipeline, clips, specs,
                        classifier, action_names, n_runs: int = 20,
                        samples_per_run: int = 8, refine: bool | None = None,
                        seed: int = 0, progress=None):
    """Run the repeated-evaluation protocol and return a MetricReport.

    Each run draws samples_per_run (clip, prompt) pairs (two samples for the
    first few prompts so multimodality is defined), generates motions, and
    scores top-3 action accuracy, FID against ground-truth clip features,
    diversity, multimodality and mean per-frame physical realism.
    """
    from .metrics import (MetricReport, metric_accuracy_topk, metric_diversity,
                          metric_fid, metric_multimodality,
                          physical_realism_sequence, zero_inactive_hands)

    if refine is None:
        refine = pipeline.refiner is not None
    gt_feats = classifier.features([zero_inactive_hands(c.seq) for c in clips])
    per_run = {k: [] for k in ("accuracy_top3", "fid", "diversity",
                               "multimodality", "physical_realism")}
    for run in range(n_runs):
        rng = np.random.default_rng(seed + run)
        chosen = rng.choice(len(clips), size=min(samples_per_run, len(clips)),
                            replace=False)
        seqs, labels, prompts, realism = [], [], [], []
        for j, ci in enumerate(chosen):
            clip = clips[ci]
            spec = specs[clip.object_id]
            n_samples = 2 if j < 2 else 1
            for k in range(n_samples):
                res = pipeline.generate(clip.text, spec, refine=refine,
                                        seed=seed + run * 100003 + int(ci) * 7 + k,
                                        hand_type=clip.hand_type)
                seqs.append(res.seq)
                labels.append(action_names.index(clip.action))
                prompts.append(clip.text)
                realism.append(float(physical_realism_sequence(
                    res.seq, spec, pipeline.backend_left, pipeline.backend_right,
                    pen_max=pipeline.cfg.realism_pen_max,
                    move_thresh=pipeline.cfg.realism_move_thresh,
                    contact_tau=pipeline.cfg.contact_tau).mean()))
        feats = classifier.features(seqs)
        logits = classifier.logits_for(seqs)
        per_run["accuracy_top3"].append(metric_accuracy_topk(logits, labels, k=3))
        per_run["fid"].append(metric_fid(feats, gt_feats))
        per_run["diversity"].append(metric_diversity(
            feats, n_pairs=pipeline.cfg.diversity_pairs, seed=seed + run))
        per_run["multimodality"].append(metric_multimodality(feats, prompts))
        per_run["physical_realism"].append(float(np.mean(realism)))
        if progress:
            progress(run, {k: v[-1] for k, v in per_run.items()})
    return MetricReport(per_run=per_run, n_runs=n_runs)
