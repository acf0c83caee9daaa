"""Articulated hand: 99-dim parameterization, pluggable backend, forward
kinematics with linear blend skinning.

A hand frame is the 99-vector [t (3) | 16 joint rotations in 6D (96)].
The first rotation is the global wrist orientation; the remaining 15 drive
three phalanx joints per finger (thumb, index, middle, ring, pinky).
Output joints (21): wrist, 5 x (mcp, pip, dip), then 5 fingertips.

The bundled procedural backend is a low-poly capsule-finger hand so the
whole pipeline runs without any external model assets.  A MANO-compatible
asset (V=778) can be loaded from an .npz/.pkl archive with the same schema.
"""

from __future__ import annotations

import dataclasses
import pickle
from pathlib import Path

import numpy as np
import torch

from .geometry import DegenerateRotationError, GeometryError, matrix_to_rot6d, rot6d_to_matrix

HAND_PARAM_DIM = 99
NUM_POSED_JOINTS = 16
NUM_JOINTS = 21
MANO_VERTEX_COUNT = 778

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

# parent index per posed joint: wrist=0, finger f joint k at 1 + 3f + k
PARENTS = np.array([0] + sum(([0, 1 + 3 * f, 2 + 3 * f] for f in range(5)), []), dtype=np.int64)


class HandModelError(ValueError):
    pass


@dataclasses.dataclass
class HandParams:
    """Per-frame hand parameters; arrays may carry a leading frame dimension."""
    trans: torch.Tensor    # (..., 3)
    theta6: torch.Tensor   # (..., 16, 6)
    side: str = "right"    # {left, right}

    def __post_init__(self):
        self.trans = torch.as_tensor(self.trans, dtype=torch.get_default_dtype()) \
            if not isinstance(self.trans, torch.Tensor) else self.trans
        self.theta6 = torch.as_tensor(self.theta6, dtype=torch.get_default_dtype()) \
            if not isinstance(self.theta6, torch.Tensor) else self.theta6
        if self.side not in ("left", "right"):
            raise HandModelError(f"side must be 'left' or 'right', got {self.side!r}")
        if self.trans.shape[-1] != 3 or self.theta6.shape[-2:] != (16, 6):
            raise HandModelError("expected trans (...,3) and theta6 (...,16,6)")

    def flatten(self) -> torch.Tensor:
        """(..., 99) vector [t | theta6 row-major]."""
        return torch.cat([self.trans, self.theta6.reshape(*self.theta6.shape[:-2], 96)], dim=-1)

    @classmethod
    def from_vector(cls, vec, side="right") -> "HandParams":
        vec = vec if isinstance(vec, torch.Tensor) else torch.as_tensor(np.asarray(vec), dtype=torch.get_default_dtype())
        if vec.shape[-1] != HAND_PARAM_DIM:
            raise HandModelError(f"hand vector must have width {HAND_PARAM_DIM}, got {vec.shape[-1]}")
        return cls(trans=vec[..., :3], theta6=vec[..., 3:].reshape(*vec.shape[:-1], 16, 6), side=side)

    @classmethod
    def rest(cls, side="right", frames=None) -> "HandParams":
        ident = torch.tensor([1, 0, 0, 0, 1, 0], dtype=torch.get_default_dtype())
        shape = (16, 6) if frames is None else (frames, 16, 6)
        tshape = (3,) if frames is None else (frames, 3)
        return cls(trans=torch.zeros(tshape), theta6=ident.expand(shape).clone(), side=side)


@dataclasses.dataclass
class HandBackend:
    """Immutable template + skeleton + skinning data."""
    template: np.ndarray          # (V, 3) rest vertices
    rest_joints: np.ndarray       # (16, 3) posed-joint rest positions
    tip_rest: np.ndarray          # (5, 3) fingertip rest positions
    weights: np.ndarray           # (V, 16) skinning weights, rows sum to 1
    parents: np.ndarray = dataclasses.field(default_factory=lambda: PARENTS.copy())
    name: str = "procedural"

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        self.rest_joints = np.asarray(self.rest_joints, dtype=np.float64)
        self.tip_rest = np.asarray(self.tip_rest, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.rest_joints.shape != (16, 3):
            raise HandModelError("rest_joints must be (16, 3)")
        if self.tip_rest.shape != (5, 3):
            raise HandModelError("tip_rest must be (5, 3)")
        if self.weights.shape != (len(self.template), 16):
            raise HandModelError("weights must be (V, 16)")
        rowsum = self.weights.sum(axis=1)
        if not np.allclose(rowsum, 1.0, atol=1e-6):
            raise HandModelError("skinning weight rows must sum to 1")

    @property
    def num_vertices(self) -> int:
        return len(self.template)


def _finger_layout(sign: float) -> tuple[np.ndarray, np.ndarray]:
    """Rest joints (16,3) and tips (5,3); sign=-1 mirrors x for the left hand."""
    joints = np.zeros((16, 3))
    tips = np.zeros((5, 3))
    base_y = [-0.045, -0.025, 0.0, 0.022, 0.042]
    base_x = [0.035, 0.09, 0.095, 0.09, 0.08]
    seg = [(0.030, 0.022, 0.018),
           (0.035, 0.025, 0.020),
           (0.038, 0.027, 0.021),
           (0.035, 0.025, 0.020),
           (0.028, 0.020, 0.016)]
    for f in range(5):
        x, y = base_x[f], base_y[f]
        for k in range(3):
            joints[1 + 3 * f + k] = (sign * x, y, 0.0)
            x += seg[f][k]
        tips[f] = (sign * x, y, 0.0)
    return joints, tips


def procedural_backend(side: str = "right") -> HandBackend:
    """Deterministic low-poly hand: palm slab + capsule-sampled fingers,
    rigid (one-hot) skinning.  ~200 vertices, same 21-joint topology as MANO."""
    sign = 1.0 if side == "right" else -1.0
    joints, tips = _finger_layout(sign)
    verts, weights = [], []

    def add(p, bone):
        verts.append(p)
        w = np.zeros(16)
        w[bone] = 1.0
        weights.append(w)

    # palm: 5x5 grid between wrist and knuckles, two layers
    for xi in np.linspace(0.005, 0.08, 5):
        for yi in np.linspace(-0.04, 0.04, 5):
            for zi in (-0.012, 0.012):
                add(np.array([sign * xi, yi, zi]), 0)
    # fingers: ring of 4 points around each phalanx midpoint + joint point
    ring = np.array([[0, 0.008, 0], [0, -0.008, 0], [0, 0, 0.008], [0, 0, -0.008]])
    for f in range(5):
        chain = [joints[1 + 3 * f + k] for k in range(3)] + [tips[f]]
        for k in range(3):
            bone = 1 + 3 * f + k
            a, b = chain[k], chain[k + 1]
            for frac in (0.25, 0.75):
                mid = a + frac * (b - a)
                for r in ring:
                    add(mid + r, bone)
        add(chain[3], 1 + 3 * f + 2)  # fingertip vertex on the dip bone
    return HandBackend(template=np.asarray(verts), rest_joints=joints,
                       tip_rest=tips, weights=np.asarray(weights),
                       name=f"procedural-{side}")


def load_backend(source, side: str = "right") -> HandBackend:
    """Load a hand backend: the literal "procedural" or an asset path.

    Asset schema (.npz, or .pkl holding a dict of arrays): v_template (V,3),
    rest_joints (16,3), tip_rest (5,3), weights (V,16), optional parents (16,).
    """
    if source == "procedural":
        return procedural_backend(side)
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"hand backend asset not found: {path}")
    if path.suffix == ".npz":
        data = dict(np.load(path))
    elif path.suffix in (".pkl", ".pickle"):
        with open(path, "rb") as fh:
            data = pickle.load(fh)
    else:
        raise HandModelError(f"unsupported backend asset format: {path.suffix}")
    try:
        backend = HandBackend(
            template=data["v_template"],
            rest_joints=data["rest_joints"],
            tip_rest=data["tip_rest"],
            weights=data["weights"],
            parents=np.asarray(data.get("parents", PARENTS), dtype=np.int64),
            name=path.stem,
        )
    except KeyError as exc:
        raise HandModelError(f"backend asset {path} missing array {exc}") from exc
    return backend


def forward_kinematics(params: HandParams, backend: HandBackend) -> tuple[torch.Tensor, torch.Tensor]:
    """Pose the hand: returns (joints (...,21,3), vertices (...,V,3)).

    With all-identity rotations and zero translation the outputs equal the
    backend rest pose; the wrist lands at ``params.trans``.
    """
    theta = params.theta6
    batch = theta.shape[:-2]
    try:
        R = rot6d_to_matrix(theta)  # (..., 16, 3, 3)
    except DegenerateRotationError:
        raise
    dtype = R.dtype
    rest = torch.as_tensor(backend.rest_joints, dtype=dtype)
    tips = torch.as_tensor(backend.tip_rest, dtype=dtype)
    trans = params.trans.to(dtype)

    glob_R = [None] * 16
    glob_p = [None] * 16
    glob_R[0] = R[..., 0, :, :]
    glob_p[0] = trans + rest[0]
    for i in range(1, 16):
        par = int(backend.parents[i])
        offset = rest[i] - rest[par]
        glob_R[i] = glob_R[par] @ R[..., i, :, :]
        glob_p[i] = (glob_R[par] @ offset).reshape(*batch, 3) + glob_p[par]

    Rg = torch.stack(glob_R, dim=-3)   # (..., 16, 3, 3)
    pg = torch.stack(glob_p, dim=-2)   # (..., 16, 3)

    tip_pos = []
    for f in range(5):
        dip = 3 + 3 * f
        off = tips[f] - rest[dip]
        tip_pos.append((Rg[..., dip, :, :] @ off).reshape(*batch, 3) + pg[..., dip, :])
    joints = torch.cat([pg, torch.stack(tip_pos, dim=-2)], dim=-2)

    template = torch.as_tensor(backend.template, dtype=dtype)       # (V, 3)
    weights = torch.as_tensor(backend.weights, dtype=dtype)         # (V, 16)
    local = template[:, None, :] - rest[None, :, :]                 # (V, 16, 3)
    posed = torch.einsum("...kij,vkj->...vki", Rg, local) + pg[..., None, :, :]
    vertices = (weights[:, :, None] * posed).sum(dim=-2)
    return joints, vertices


def mirror_params(params: HandParams) -> HandParams:
    """Mirror hand parameters across the x=0 plane (swaps handedness)."""
    M = torch.diag(torch.tensor([-1.0, 1.0, 1.0], dtype=params.theta6.dtype))
    R = rot6d_to_matrix(params.theta6)
    R_m = M @ R @ M
    theta_m = torch.cat([R_m[..., :, 0], R_m[..., :, 1]], dim=-1)
    t_m = params.trans * torch.tensor([-1.0, 1.0, 1.0], dtype=params.trans.dtype)
    other = "left" if params.side == "right" else "right"
    return HandParams(trans=t_m, theta6=theta_m, side=other)
