"""Dataset tooling: prompt annotation grammar, hand-type inference, the
synthetic desk-scale clip generator, and schema-driven corpus loaders.

A corpus directory holds:
    manifest.json            {"schema", "clips":[...], "prompts":[...],
                              "counts":{...}, "config":{...}}
    objects/<id>.obj         canonical meshes (+ optional articulation sidecar)
    clips/<name>.hoc         binary motion clips (see hoigen.motion)
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from . import geometry, meshio, primitives
from .geometry import ObjectSpec, canonicalize_object, matrix_to_rot6d, rot6d_to_matrix
from .hand import HandBackend, HandParams, forward_kinematics, procedural_backend
from .motion import MotionSequence, read_clip, write_clip

HAND_PHRASES = {"left": "the left hand", "right": "the right hand", "both": "both hands"}

ACTIONS = ("grab", "lift", "place", "shake", "rotate", "pass")
ACTION_BASE_LENGTH = {"grab": 24, "lift": 40, "place": 36, "shake": 48,
                      "rotate": 44, "pass": 54, "open": 50}

IRREGULAR_PAST = {"shake": "shaken", "put": "put", "take": "taken", "drink": "drunk",
                  "give": "given", "hold": "held"}
VOWELS = "aeiou"


class DatasetError(ValueError):
    pass


class NoInteractionError(DatasetError):
    pass


# ---------------------------------------------------------------------------
# Prompt grammar
# ---------------------------------------------------------------------------

def _article(noun: str) -> str:
    return "an" if noun[0].lower() in VOWELS else "a"


def _doubles_final(verb: str) -> bool:
    # short CVC verbs double the final consonant (grab -> grabbed)
    return (len(verb) >= 3 and verb[-1] not in "aeiouwxy"
            and verb[-2] in VOWELS and verb[-3] not in VOWELS)


def gerund(verb: str) -> str:
    if verb.endswith("e") and not verb.endswith("ee"):
        return verb[:-1] + "ing"
    if _doubles_final(verb):
        return verb + verb[-1] + "ing"
    return verb + "ing"


def past_participle(verb: str) -> str:
    if verb in IRREGULAR_PAST:
        return IRREGULAR_PAST[verb]
    if verb.endswith("e"):
        return verb + "d"
    if verb.endswith("y") and verb[-2] not in VOWELS:
        return verb[:-1] + "ied"
    if _doubles_final(verb):
        return verb + verb[-1] + "ed"
    return verb + "ed"


def third_person(verb: str) -> str:
    if verb.endswith(("s", "sh", "ch", "x", "z", "o")):
        return verb + "es"
    if verb.endswith("y") and verb[-2] not in VOWELS:
        return verb[:-1] + "ies"
    return verb + "s"


def annotate_text(action: str, object_category: str, hand_type: str) -> list[str]:
    """Deterministic prompt variants for an (action, object, hand type) triple:
    base, passive, gerund, and subject forms, in that order."""
    if not action or not object_category:
        raise DatasetError("action and object category must be non-empty")
    hand = HAND_PHRASES[hand_type]
    art = _article(object_category)
    obj = f"{art} {object_category}"
    base = f"{action.capitalize()} {obj} with {hand}."
    passive = f"{obj.capitalize()} is {past_participle(action)} by {hand}."
    ger = f"{gerund(action).capitalize()} {obj} with {hand}."
    verb = action if hand_type == "both" else third_person(action)
    subject = f"{hand[0].upper()}{hand[1:]} {verb} {obj}."
    prompts = [base, passive, ger, subject]
    assert len(set(prompts)) == len(prompts)
    return prompts


# ---------------------------------------------------------------------------
# Hand-type inference
# ---------------------------------------------------------------------------

def infer_hand_type(seq: MotionSequence, spec: ObjectSpec, backend_left: HandBackend,
                    backend_right: HandBackend, threshold: float = 0.02) -> str:
    """A hand participates iff its minimum vertex-to-object distance over the
    whole sequence is strictly below the threshold."""
    from .diffusion import deform_sequence

    P = deform_sequence(spec, torch.as_tensor(seq.obj, dtype=torch.float64))
    active = {}
    for side, vec, backend in (("left", seq.lhand, backend_left),
                               ("right", seq.rhand, backend_right)):
        params = HandParams.from_vector(torch.as_tensor(vec, dtype=torch.float64), side=side)
        _, verts = forward_kinematics(params, backend)
        mind = min(float(torch.cdist(verts[l], P[l]).min()) for l in range(len(seq)))
        active[side] = mind < threshold
    if active["left"] and active["right"]:
        return "both"
    if active["left"]:
        return "left"
    if active["right"]:
        return "right"
    raise NoInteractionError("neither hand ever comes within threshold of the object")


# ---------------------------------------------------------------------------
# Synthetic clip generation
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class AnnotatedClip:
    seq: MotionSequence
    object_id: str
    action: str
    hand_type: str
    prompts: list[str]
    text: str          # prompt used for training pairing
    length: int = 0
    seed: int = 0

    def __post_init__(self):
        self.length = len(self.seq)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _object_path(action: str, n: int, rng: np.random.Generator):
    """Per-frame object (t, R, alpha) for the manipulation phase."""
    s = _smoothstep(np.linspace(0, 1, n))
    t = np.zeros((n, 3))
    R = np.tile(np.eye(3), (n, 1, 1))
    alpha = np.zeros(n)
    if action == "grab":
        t[:, 2] = 0.01 * s
    elif action == "lift":
        t[:, 2] = 0.15 * s
    elif action == "place":
        half = _smoothstep(np.linspace(0, 1, n))
        t[:, 1] = 0.12 * half
        t[:, 2] = 0.08 * np.sin(np.pi * half)
    elif action == "shake":
        t[:, 2] = 0.05 * s + 0.02 * np.sin(4 * np.pi * np.linspace(0, 1, n))
    elif action == "rotate":
        ang = (np.pi / 2) * s
        c, sn = np.cos(ang), np.sin(ang)
        R[:, 0, 0], R[:, 0, 1] = c, -sn
        R[:, 1, 0], R[:, 1, 1] = sn, c
        t[:, 2] = 0.04 * s
    elif action == "pass":
        t[:, 1] = 0.2 * s
        t[:, 2] = 0.06 * np.sin(np.pi * s)
    elif action == "open":
        alpha = (np.pi / 3) * s
    else:
        raise DatasetError(f"unknown action template {action!r}")
    return t, R, alpha


def _grasp_pose(spec: ObjectSpec, side: str, backend: HandBackend,
                rng: np.random.Generator, clearance: float = 0.008):
    """Hand root pose placing the palm tangent to the object along the
    approach direction u (+x for the right hand, -x for the left)."""
    u = np.array([1.0, 0.0, 0.0]) if side == "right" else np.array([-1.0, 0.0, 0.0])
    # fingers point toward the object: rotate the rest hand's +x onto -u
    base = np.array([[-1.0, 0, 0], [0, 1.0, 0], [0, 0, -1.0]]) if side == "right" \
        else np.eye(3)
    tilt = float(rng.uniform(-0.15, 0.15))
    c, s = np.cos(tilt), np.sin(tilt)
    spin = np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)  # about x (= +-u)
    R_h = spin @ base
    # surface point farthest along u
    g = spec.points[int(np.argmax(spec.points @ u))]
    theta = HandParams.rest(side=side).theta6.clone()
    theta[0] = matrix_to_rot6d(torch.as_tensor(R_h, dtype=theta.dtype))
    _, verts = forward_kinematics(HandParams(trans=torch.zeros(3), theta6=theta, side=side),
                                  backend)
    depth = float((verts.numpy() @ u).min())
    root = g + u * (clearance - depth)
    return root, R_h, theta


def generate_synthetic_clip(seed: int, primitive: str, action: str,
                            hand_type: str | None = None, n_points: int = 128,
                            backend_left: HandBackend | None = None,
                            backend_right: HandBackend | None = None) -> tuple[AnnotatedClip, ObjectSpec]:
    """Deterministic approach -> grasp -> manipulate trajectory on a primitive.

    The grasping hand eases toward a tangency pose, then rides rigidly with
    the object along the action's template path, so ground-truth motions are
    penetration-free and contact-preserving by construction.
    """
    if action not in ACTION_BASE_LENGTH:
        raise DatasetError(f"unknown action template {action!r}")
    rng = np.random.default_rng(seed)
    backend_left = backend_left or procedural_backend("left")
    backend_right = backend_right or procedural_backend("right")
    verts, faces, articulation = primitives.primitive_mesh(primitive)
    spec = canonicalize_object(verts, faces, n=n_points, articulation=articulation)

    if action == "open" and primitive != "articulated-box":
        raise DatasetError("'open' requires the articulated-box primitive")
    if hand_type is None:
        hand_type = ("right", "left", "both")[seed % 3]

    base_len = ACTION_BASE_LENGTH[action]
    length = int(np.clip(round(base_len * (1 + rng.uniform(-0.1, 0.1))), 20, 150))
    n_approach = max(4, int(0.4 * length))
    n_manip = length - n_approach

    t_path, R_path, a_path = _object_path(action, n_manip, rng)
    obj = np.zeros((length, 10))
    obj[:, 3:9] = [1, 0, 0, 0, 1, 0]
    for i in range(n_manip):
        obj[n_approach + i, :3] = t_path[i]
        obj[n_approach + i, 3:9] = matrix_to_rot6d(torch.as_tensor(R_path[i])).numpy()
        obj[n_approach + i, 9] = a_path[i]

    hands = {"left": np.zeros((length, 99)), "right": np.zeros((length, 99))}
    rest = {"left": HandParams.rest("left"), "right": HandParams.rest("right")}
    parked = {"left": np.array([-0.45, -0.3, 0.0]), "right": np.array([0.45, -0.3, 0.0])}
    active_sides = {"left": hand_type in ("left", "both"),
                    "right": hand_type in ("right", "both")}
    for side in ("left", "right"):
        backend = backend_left if side == "left" else backend_right
        if not active_sides[side]:
            vec = HandParams(trans=torch.as_tensor(parked[side]),
                             theta6=rest[side].theta6, side=side).flatten().numpy()
            hands[side][:] = vec
            continue
        root, R_h, theta = _grasp_pose(spec, side, backend, rng)
        start = root + (np.array([1.0, 0, 0]) if side == "right" else np.array([-1.0, 0, 0])) * 0.25
        ease = _smoothstep(np.linspace(0, 1, n_approach))
        for l in range(n_approach):
            pos = start + (root - start) * ease[l]
            hands[side][l] = HandParams(trans=torch.as_tensor(pos),
                                        theta6=theta, side=side).flatten().numpy()
        for i in range(n_manip):
            R_o = R_path[i]
            pos = R_o @ root + t_path[i]
            theta_i = theta.clone()
            theta_i[0] = matrix_to_rot6d(torch.as_tensor(R_o @ R_h, dtype=theta.dtype))
            hands[side][n_approach + i] = HandParams(
                trans=torch.as_tensor(pos), theta6=theta_i, side=side).flatten().numpy()

    seq = MotionSequence(hands["left"], hands["right"], obj, hand_type=hand_type)
    prompts = annotate_text(action, primitive.replace("-", " "), hand_type)
    text = prompts[seed % len(prompts)]
    clip = AnnotatedClip(seq=seq, object_id=primitive, action=action,
                         hand_type=hand_type, prompts=prompts, text=text, seed=seed)
    return clip, spec


# ---------------------------------------------------------------------------
# Corpus generation and loading
# ---------------------------------------------------------------------------

def generate_corpus(root, n_clips: int = 600, n_points: int = 128,
                    actions=ACTIONS, prims=("sphere", "box", "cylinder"),
                    seed: int = 0) -> dict:
    """Write a synthetic corpus (round-robin over action x primitive) and its
    manifest; regeneration with the same config is bit-identical."""
    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    (root / "objects").mkdir(exist_ok=True)
    backend_left = procedural_backend("left")
    backend_right = procedural_backend("right")
    specs = {}
    for prim in prims:
        verts, faces, articulation = primitives.primitive_mesh(prim)
        mesh_path = root / "objects" / f"{prim}.obj"
        meshio.save_obj(mesh_path, verts, faces)
        if articulation is not None:
            meshio.save_articulation_sidecar(mesh_path, **{
                "axis": articulation["axis"], "origin": articulation["origin"],
                "part_vertex_ids": articulation["part_vertex_ids"],
                "enabled": articulation["enabled"]})
        specs[prim] = canonicalize_object(verts, faces, n=n_points,
                                          articulation=articulation)
    clip_names, prompts = [], []
    combos = [(a, p) for a in actions for p in prims]
    for i in range(n_clips):
        action, prim = combos[i % len(combos)]
        clip, _ = generate_synthetic_clip(seed + i, prim, action, n_points=n_points,
                                          backend_left=backend_left,
                                          backend_right=backend_right)
        name = f"clip_{i:05d}.hoc"
        write_clip(root / "clips" / name, clip.seq, header={
            "object_id": clip.object_id, "action": clip.action, "text": clip.text,
            "prompts": clip.prompts, "seed": clip.seed})
        clip_names.append(name)
        prompts.extend(p for p in clip.prompts if p not in prompts)
    manifest = {
        "schema": "synthetic",
        "clips": clip_names,
        "prompts": prompts,
        "counts": {"clips": len(clip_names), "prompts": len(prompts)},
        "config": {"n_clips": n_clips, "n_points": n_points, "seed": seed,
                   "actions": list(actions), "primitives": list(prims)},
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


KNOWN_SCHEMAS = ("synthetic", "h2o-like", "grab-like", "arctic-like")


def load_object_specs(root, n_points: int) -> dict[str, ObjectSpec]:
    root = Path(root)
    specs = {}
    for mesh_path in sorted((root / "objects").glob("*.obj")) + sorted((root / "objects").glob("*.ply")):
        verts, faces = meshio.load_mesh(mesh_path)
        articulation = meshio.load_articulation_sidecar(mesh_path)
        specs[mesh_path.stem] = canonicalize_object(verts, faces, n=n_points,
                                                    articulation=articulation)
    return specs


def load_dataset(root, schema: str = "synthetic") -> tuple[list[AnnotatedClip], dict]:
    """Load a corpus directory into AnnotatedClips, validating the manifest.

    All schemas share the container format; named schemas additionally check
    advertised counts against actual list lengths and, for arctic-like, that
    articulated objects are flagged.
    """
    if schema not in KNOWN_SCHEMAS:
        raise DatasetError(f"unknown schema {schema!r}; expected one of {KNOWN_SCHEMAS}")
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{manifest_path}: manifest not found")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    counts = manifest.get("counts", {})
    for key, entries in (("clips", manifest.get("clips", [])),
                         ("prompts", manifest.get("prompts", []))):
        if key in counts and counts[key] != len(entries):
            raise DatasetError(
                f"{manifest_path}: counts[{key!r}] advertises {counts[key]} "
                f"but {len(entries)} entries are listed")
    if schema == "arctic-like" and not manifest.get("articulation", False):
        raise DatasetError(f"{manifest_path}: arctic-like corpora must set articulation=true")
    clips = []
    for name in manifest.get("clips", []):
        path = root / "clips" / name
        if not path.exists():
            raise DatasetError(f"{path}: clip listed in manifest is missing")
        seq, header = read_clip(path)
        clips.append(AnnotatedClip(
            seq=seq, object_id=header.get("object_id", "unknown"),
            action=header.get("action", "unknown"), hand_type=seq.hand_type,
            prompts=header.get("prompts", []), text=header.get("text", ""),
            seed=header.get("seed", 0)))
    return clips, manifest
