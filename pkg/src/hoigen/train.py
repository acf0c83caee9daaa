"""Training loops for the three stages plus the length predictor, and the
shared checkpoint container.

All loops are single-threaded and deterministic per (config, seed).
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from . import contact as contact_mod
from . import diffusion as diff_mod
from . import refiner as refiner_mod
from .config import VERSION, RunConfig
from .contact import ContactNet, build_gt_contact_map, contact_losses
from .data import AnnotatedClip
from .diffusion import ConditionBundle, MotionDenoiser, deform_sequence, forward_noise, make_schedule
from .geometry import ObjectSpec
from .hand import HandParams, forward_kinematics, procedural_backend
from .motion import HAND_DIM, OBJ_DIM, MotionSequence
from .refiner import HandRefiner, prepare_refiner_inputs, refiner_losses
from .textenc import LENGTH_NOISE_DIM, LengthPredictor

log = logging.getLogger(__name__)


def save_checkpoint(path, kind: str, model: torch.nn.Module, cfg: RunConfig,
                    extra: dict | None = None):
    payload = {"kind": kind, "state_dict": model.state_dict(),
               "config": cfg.to_dict(), "version": VERSION,
               "config_hash": cfg.hash}
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path, expected_kind: str | None = None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if expected_kind and payload.get("kind") != expected_kind:
        raise ValueError(f"{path}: expected a {expected_kind!r} checkpoint, "
                         f"found {payload.get('kind')!r}")
    return payload


def build_model(kind: str, cfg: RunConfig) -> torch.nn.Module:
    if kind == "contact":
        return ContactNet(n_points=cfg.n_points)
    if kind == "motion":
        return MotionDenoiser(n_points=cfg.n_points, l_max=cfg.l_max,
                              d_model=cfg.d_model, n_layers=cfg.n_layers,
                              n_heads=cfg.n_heads, ff_mult=cfg.ff_mult)
    if kind == "refiner":
        return HandRefiner(n_points=cfg.n_points, l_max=cfg.l_max,
                           d_model=cfg.d_model, n_layers=cfg.n_layers,
                           n_heads=cfg.n_heads, ff_mult=cfg.ff_mult)
    if kind == "length":
        return LengthPredictor()
    raise ValueError(f"unknown model kind {kind!r}")


def load_model(path, kind: str) -> tuple[torch.nn.Module, RunConfig]:
    payload = load_checkpoint(path, expected_kind=kind)
    cfg = RunConfig.from_dict(payload["config"])
    model = build_model(kind, cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# Per-clip precomputation
# ---------------------------------------------------------------------------

def gt_contact_for_clip(clip: AnnotatedClip, spec: ObjectSpec, backend_left,
                        backend_right, tau: float) -> torch.Tensor:
    P_def = deform_sequence(spec, torch.as_tensor(clip.seq.obj, dtype=torch.float64))
    verts = []
    sides = {"left": (clip.seq.lhand, backend_left), "right": (clip.seq.rhand, backend_right)}
    active = [s for s in sides if clip.hand_type in (s, "both")]
    per_frame = []
    for l in range(len(clip.seq)):
        vs = []
        for side in active:
            vec, backend = sides[side]
            params = HandParams.from_vector(torch.as_tensor(vec[l], dtype=torch.float64),
                                            side=side)
            _, v = forward_kinematics(params, backend)
            vs.append(v)
        per_frame.append(torch.cat(vs) if vs else torch.zeros(0, 3, dtype=torch.float64))
    return build_gt_contact_map(P_def, per_frame, tau=tau)


# ---------------------------------------------------------------------------
# Stage 1: contact CVAE
# ---------------------------------------------------------------------------

def train_contact(clips: list[AnnotatedClip], specs: dict[str, ObjectSpec],
                  encoder, cfg: RunConfig, progress=None) -> ContactNet:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    backend_left = procedural_backend("left")
    backend_right = procedural_backend("right")
    model = ContactNet(n_points=cfg.n_points)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr)

    points, scales, texts, gt_maps = [], [], [], []
    for clip in clips:
        spec = specs[clip.object_id]
        points.append(torch.as_tensor(spec.points_norm, dtype=torch.float32))
        scales.append(spec.scale)
        texts.append(torch.as_tensor(encoder.encode(clip.text), dtype=torch.float32))
        gt_maps.append(gt_contact_for_clip(clip, spec, backend_left, backend_right,
                                           cfg.contact_tau).to(torch.float32))
    points = torch.stack(points)
    scales = torch.tensor(scales, dtype=torch.float32)
    texts = torch.stack(texts)
    gt_maps = torch.stack(gt_maps)

    warmup = max(1, int(cfg.kl_warmup_frac * cfg.contact_steps))
    model.train()
    for step in range(cfg.contact_steps):
        idx = rng.choice(len(clips), size=min(cfg.batch_size, len(clips)), replace=False)
        out = model(points[idx], scales[idx], texts[idx], gt_contact=gt_maps[idx])
        w_kl = cfg.kl_weight * min(1.0, (step + 1) / warmup)
        _, _, _, total = contact_losses(out["contact"], gt_maps[idx],
                                        out["mu"], out["logvar"], kl_weight=w_kl)
        opt.zero_grad()
        total.backward()
        opt.step()
        if progress and step % 100 == 0:
            progress(step, float(total.detach()))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Stage 2: motion diffusion
# ---------------------------------------------------------------------------

def condition_for_clip(clip: AnnotatedClip, spec: ObjectSpec, contact_model: ContactNet,
                       encoder, seed: int = 0) -> ConditionBundle:
    """Predicted contact map + object features for a clip's prompt/object."""
    contact_model.eval()
    text = torch.as_tensor(encoder.encode(clip.text), dtype=torch.float32)
    pts = torch.as_tensor(spec.points_norm, dtype=torch.float32).unsqueeze(0)
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(1, contact_mod.CONTACT_LATENT_DIM, generator=gen)
    with torch.no_grad():
        out = contact_model(pts, torch.tensor([spec.scale], dtype=torch.float32),
                            text.unsqueeze(0), z=z)
    return ConditionBundle(text_emb=text, object_feat=out["global_feat"][0],
                           contact=out["contact"][0], scale=spec.scale)


def train_motion(clips: list[AnnotatedClip], specs: dict[str, ObjectSpec],
                 contact_model: ContactNet, encoder, cfg: RunConfig,
                 geo_items: int = 2, progress=None) -> MotionDenoiser:
    """Train the denoiser with the reconstruction loss on the full batch and
    the geometric losses (distance-map, relative-orientation) on a small
    sub-batch per step for CPU-scale tractability."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    backend_left = procedural_backend("left")
    backend_right = procedural_backend("right")
    model = MotionDenoiser(n_points=cfg.n_points, l_max=cfg.l_max, d_model=cfg.d_model,
                           n_layers=cfg.n_layers, n_heads=cfg.n_heads, ff_mult=cfg.ff_mult)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    schedule = make_schedule(cfg.diffusion_steps)

    conds = [condition_for_clip(c, specs[c.object_id], contact_model, encoder,
                                seed=cfg.seed + i)
             for i, c in enumerate(clips)]
    L = cfg.l_max
    B_all = len(clips)
    x0 = {"lhand": torch.zeros(B_all, L, HAND_DIM), "rhand": torch.zeros(B_all, L, HAND_DIM),
          "obj": torch.zeros(B_all, L, OBJ_DIM)}
    lengths = np.zeros(B_all, dtype=np.int64)
    for i, c in enumerate(clips):
        n = len(c.seq)
        lengths[i] = n
        x0["lhand"][i, :n] = torch.as_tensor(c.seq.lhand, dtype=torch.float32)
        x0["rhand"][i, :n] = torch.as_tensor(c.seq.rhand, dtype=torch.float32)
        x0["obj"][i, :n] = torch.as_tensor(c.seq.obj, dtype=torch.float32)
    cond_text = torch.stack([c.text_emb.to(torch.float32) for c in conds])
    cond_obj = torch.stack([c.object_condition().to(torch.float32) for c in conds])

    model.train()
    for step in range(cfg.motion_steps):
        idx = rng.choice(B_all, size=min(cfg.batch_size, B_all), replace=False)
        B = len(idx)
        t = torch.as_tensor(rng.integers(1, cfg.diffusion_steps + 1, size=B))
        target = tuple(x0[a][idx] for a in ("lhand", "rhand", "obj"))
        noised = tuple(forward_noise(x, t, schedule)[0] for x in target)
        hand_types = [clips[i].hand_type for i in idx]
        pred = model(noised[0], noised[1], noised[2], t, cond_text[idx], cond_obj[idx],
                     lengths[idx], hand_types)
        loss = diff_mod.loss_diff(pred, target, lengths[idx], hand_types)
        if geo_items > 0:
            # geometric losses take one object spec per sub-batch, so keep
            # only leading items that share the first item's object
            spec0 = specs[clips[idx[0]].object_id]
            same = [s for s in range(min(geo_items, B))
                    if clips[idx[s]].object_id == clips[idx[0]].object_id]
            pred_sub = tuple(p[same] for p in pred)
            targ_sub = tuple(x[same] for x in target)
            hts = [hand_types[s] for s in same]
            lns = lengths[idx][same]
            loss = loss + diff_mod.loss_dm(pred_sub, targ_sub, spec0, backend_left,
                                           backend_right, lns, hts, tau=cfg.contact_tau)
            loss = loss + diff_mod.loss_ro(pred_sub, targ_sub, lns, hts)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if progress and step % 200 == 0:
            progress(step, float(loss))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Stage 3: refiner
# ---------------------------------------------------------------------------

def train_refiner(clips: list[AnnotatedClip], specs: dict[str, ObjectSpec],
                  contact_model: ContactNet, encoder, cfg: RunConfig,
                  generated: list[tuple[int, MotionSequence]] | None = None,
                  progress=None) -> HandRefiner:
    """Train on generator outputs when provided (pairs of clip index +
    sample), otherwise on synthetically noised ground truth (Gaussian pose
    noise).

    Generator samples are fresh draws with their own trajectory, so they
    anchor to themselves: the reconstruction and contact terms are zero at
    the identity and act as a leash while the penetration term pushes hands
    out of the object. Noised ground truth instead anchors to the clean clip,
    which demands large input-dependent corrections; mixing the two taught
    crude corrections that misfired on generator outputs, so noise is only
    the fallback when no samples are supplied."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    backend_left = procedural_backend("left")
    backend_right = procedural_backend("right")
    model = HandRefiner(n_points=cfg.n_points, l_max=cfg.l_max, d_model=cfg.d_model,
                        n_layers=cfg.n_layers, n_heads=cfg.n_heads, ff_mult=cfg.ff_mult)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.refiner_lr)
    conds = {i: condition_for_clip(c, specs[c.object_id], contact_model, encoder,
                                   seed=cfg.seed + i)
             for i, c in enumerate(clips)}
    generated = generated or []

    model.train()
    for step in range(cfg.refiner_steps):
        use_gen = bool(generated)
        if use_gen:
            ci, sample_seq = generated[rng.integers(len(generated))]
            clip = clips[ci]
            anchor = MotionSequence(sample_seq.lhand, sample_seq.rhand, sample_seq.obj,
                                    hand_type=clip.hand_type)
            noisy = anchor
            if cfg.refiner_gen_noise_std > 0:
                noise_l = rng.normal(0, cfg.refiner_gen_noise_std, anchor.lhand.shape)
                noise_r = rng.normal(0, cfg.refiner_gen_noise_std, anchor.rhand.shape)
                noisy = MotionSequence(anchor.lhand + noise_l, anchor.rhand + noise_r,
                                       anchor.obj, hand_type=clip.hand_type)
        else:
            ci = int(rng.integers(len(clips)))
            clip = clips[ci]
            noise_l = rng.normal(0, cfg.refiner_noise_std, clip.seq.lhand.shape)
            noise_r = rng.normal(0, cfg.refiner_noise_std, clip.seq.rhand.shape)
            noisy = MotionSequence(clip.seq.lhand + noise_l, clip.seq.rhand + noise_r,
                                   clip.seq.obj, hand_type=clip.hand_type)
        spec = specs[clip.object_id]
        rows_l, rows_r, _ = prepare_refiner_inputs(
            noisy, spec, backend_left, backend_right, conds[ci].contact)
        ref_l, ref_r = model(rows_l, rows_r, clip.hand_type)
        if not use_gen:
            anchor = clip.seq
        gt_l = torch.as_tensor(anchor.lhand, dtype=torch.float32)
        gt_r = torch.as_tensor(anchor.rhand, dtype=torch.float32)
        _, _, _, total = refiner_losses(
            ref_l, ref_r, gt_l, gt_r, torch.as_tensor(noisy.obj, dtype=torch.float32),
            spec, backend_left, backend_right, clip.hand_type,
            tau=cfg.contact_tau, contact_weight=cfg.refiner_contact_weight,
            pen_weight=cfg.refiner_pen_weight)
        opt.zero_grad()
        total.backward()
        # single-sample steps make the gradient noise heavy-tailed; without
        # clipping occasional deep-penetration samples destabilize the heads
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        if progress and step % 100 == 0:
            progress(step, float(total.detach()))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Length predictor
# ---------------------------------------------------------------------------

def train_length(clips: list[AnnotatedClip], encoder, cfg: RunConfig) -> LengthPredictor:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = LengthPredictor(l_max=150)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    embs = torch.stack([torch.as_tensor(encoder.encode(c.text), dtype=torch.float32)
                        for c in clips])
    lens = torch.tensor([float(len(c.seq)) for c in clips])
    model.train()
    for _ in range(cfg.length_steps):
        idx = rng.choice(len(clips), size=min(cfg.batch_size, len(clips)), replace=False)
        noise = torch.as_tensor(rng.standard_normal((len(idx), LENGTH_NOISE_DIM)),
                                dtype=torch.float32)
        pred = model(embs[idx], noise)
        loss = ((pred - lens[idx]) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model
