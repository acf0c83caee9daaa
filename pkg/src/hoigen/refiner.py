"""Feed-forward hand refiner: rewrites only the hand channels of a generated
motion to restore contact and suppress penetration.  No diffusion, no
conditions; a single transformer pass over 2L hand tokens.

Per hand per frame the input row is [hand params (99) | joints (3J=63) |
contact map (N) | per-point norms of the deformed cloud (N) | signed
clearance field (3J=63)]; 2273 wide at N=1024.

The clearance field gives each joint the outward surface normal at its
nearest object point scaled by the signed distance (negative inside).  It is
the one input that tells the model which side of the surface a joint is on:
without it, escaping penetration can only be memorized per trajectory, and
the learned corrections do not transfer to new generator samples.
"""

from __future__ import annotations

import torch
from torch import nn

from . import geometry
from .diffusion import deform_sequence, sinusoid_table
from .hand import HandParams, forward_kinematics
from .motion import HAND_DIM, MotionSequence
from .textenc import hand_indicators

NUM_JOINTS = 21


class RefinerError(ValueError):
    pass


def refiner_input_width(n_points: int, n_joints: int = NUM_JOINTS) -> int:
    return HAND_DIM + 3 * n_joints + n_points + n_points + 3 * n_joints


def build_refiner_input(hand_vec, joints, contact, deformed_points, clearance):
    """Assemble one hand's refiner rows.

    hand_vec (L, 99), joints (L, J, 3), contact (N,), deformed_points
    (L, N, 3), clearance (L, J, 3) -> (L, 99+3J+N+N+3J).
    The contact map is duplicated across frames; the point cloud enters as
    per-point Euclidean norms.
    """
    L = hand_vec.shape[0]
    if joints.shape[0] != L or deformed_points.shape[0] != L or clearance.shape[0] != L:
        raise RefinerError("refiner inputs are not frame-aligned")
    N = deformed_points.shape[1]
    rows = torch.cat([
        hand_vec,
        joints.reshape(L, -1),
        contact.reshape(1, N).expand(L, N),
        torch.linalg.norm(deformed_points, dim=-1),
        clearance.reshape(L, -1),
    ], dim=-1)
    if rows.shape[-1] != refiner_input_width(N):
        raise RefinerError(f"refiner input width {rows.shape[-1]} != {refiner_input_width(N)}")
    return rows


class HandRefiner(nn.Module):
    """Transformer over 2L hand tokens with frame-wise + agent-wise PE."""

    def __init__(self, n_points: int = 1024, l_max: int = 150, d_model: int = 512,
                 n_layers: int = 8, n_heads: int = 4, ff_mult: int = 2):
        super().__init__()
        self.n_points = n_points
        self.l_max = l_max
        width = refiner_input_width(n_points)
        self.f_in_lhand = nn.Linear(width, d_model)
        self.f_in_rhand = nn.Linear(width, d_model)
        self.register_buffer("pe", sinusoid_table(l_max + 2, d_model), persistent=False)
        layer = nn.TransformerEncoderLayer(
            d_model=d_model, nhead=n_heads, dim_feedforward=ff_mult * d_model,
            activation="gelu", batch_first=True, norm_first=False, dropout=0.0)
        self.encoder = nn.TransformerEncoder(layer, num_layers=n_layers,
                                             enable_nested_tensor=False)
        self.f_out_lhand = nn.Linear(d_model, HAND_DIM)
        self.f_out_rhand = nn.Linear(d_model, HAND_DIM)
        # zero-init the correction heads: the untrained refiner is the identity
        for head in (self.f_out_lhand, self.f_out_rhand):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, rows_lhand, rows_rhand, hand_type: str):
        """rows_*: (L, width) refiner rows -> refined (L, 99) per hand.

        The output is residual: a predicted correction added to the input
        hand parameters (the first 99 row channels), so the untrained model
        starts near the identity map.  Inactive-hand tokens are masked out of
        attention; their outputs are returned as zeros.
        """
        L = rows_lhand.shape[0]
        if L > self.l_max:
            raise RefinerError(f"length {L} exceeds l_max {self.l_max}")
        ind_l, ind_r = hand_indicators(hand_type)
        dtype = rows_lhand.dtype
        frame_pe = self.pe[:L].to(dtype)
        emb = torch.zeros(1, 2 * L, self.pe.shape[1], dtype=dtype)
        emb[0, 0::2] = self.f_in_lhand(rows_lhand) + frame_pe + self.pe[self.l_max].to(dtype)
        emb[0, 1::2] = self.f_in_rhand(rows_rhand) + frame_pe + self.pe[self.l_max + 1].to(dtype)
        active = torch.zeros(1, 2 * L, dtype=torch.bool)
        active[0, 0::2] = bool(ind_l)
        active[0, 1::2] = bool(ind_r)
        out = self.encoder(emb, src_key_padding_mask=~active)
        if ind_l:
            ref_l = rows_lhand[:, :HAND_DIM] + self.f_out_lhand(out[0, 0::2])
        else:
            ref_l = torch.zeros(L, HAND_DIM, dtype=dtype)
        if ind_r:
            ref_r = rows_rhand[:, :HAND_DIM] + self.f_out_rhand(out[0, 1::2])
        else:
            ref_r = torch.zeros(L, HAND_DIM, dtype=dtype)
        return ref_l, ref_r


def signed_clearance_field(joints, points, normals_glob, clip: float = 0.05):
    """Per-joint outward normal at the nearest object point, scaled by the
    signed distance to it (negative inside, clamped to +-clip).

    joints (J, 3), points (N, 3), normals_glob (N, 3) -> (J, 3).
    """
    d2 = ((joints[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    idx = d2.argmin(dim=1)
    n = normals_glob[idx]
    signed = ((joints - points[idx]) * n).sum(-1)
    dist = d2[torch.arange(len(idx)), idx].clamp_min(0).sqrt()
    signed = torch.where(signed < 0, -dist, dist)
    return n * signed.clamp(-clip, clip).unsqueeze(-1)


def prepare_refiner_inputs(seq: MotionSequence, spec, backend_left, backend_right,
                           contact, dtype=torch.float32):
    """Compute joints, deformed cloud and clearance fields for a generated
    motion and build both hands' refiner rows."""
    L = len(seq)
    contact = torch.as_tensor(contact, dtype=dtype).flatten()
    obj = torch.as_tensor(seq.obj, dtype=dtype)
    P_def = deform_sequence_typed(spec, obj, dtype)
    normals = torch.as_tensor(spec.normals, dtype=dtype)
    # canonical normals rotated by the rigid object orientation (articulated
    # parts approximated by the base rotation, as in the penetration loss)
    n_glob = torch.stack([
        normals @ geometry.rot6d_to_matrix(obj[l, 3:9]).to(dtype).T for l in range(L)
    ])
    ind = dict(zip(("left", "right"), hand_indicators(seq.hand_type)))
    rows = {}
    for side, vec, backend in (("left", seq.lhand, backend_left),
                               ("right", seq.rhand, backend_right)):
        if not ind[side]:
            # inactive-hand channels may be zeroed (degenerate rotations);
            # feed rest-pose rows, they are masked out of attention anyway
            vec = HandParams.rest(side, frames=L).flatten()
        hand_vec = torch.as_tensor(vec, dtype=dtype)
        joints, _ = forward_kinematics(HandParams.from_vector(hand_vec, side=side), backend)
        clear = torch.stack([
            signed_clearance_field(joints[l], P_def[l], n_glob[l]) for l in range(L)
        ])
        rows[side] = build_refiner_input(hand_vec, joints, contact, P_def, clear)
    return rows["left"], rows["right"], P_def


def deform_sequence_typed(spec, obj_vec, dtype):
    return deform_sequence(spec, obj_vec).to(dtype)


def refine_motion(model: HandRefiner, seq: MotionSequence, spec, backend_left,
                  backend_right, contact) -> MotionSequence:
    """One feed-forward refinement pass; object channels pass through untouched."""
    model.eval()
    dtype = next(model.parameters()).dtype
    rows_l, rows_r, _ = prepare_refiner_inputs(seq, spec, backend_left, backend_right,
                                               contact, dtype=dtype)
    with torch.no_grad():
        ref_l, ref_r = model(rows_l, rows_r, seq.hand_type)
    return MotionSequence(ref_l.numpy().astype(float), ref_r.numpy().astype(float),
                          seq.obj.copy(), hand_type=seq.hand_type)


def refiner_losses(ref_l, ref_r, gt_l, gt_r, obj_vec, spec, backend_left,
                   backend_right, hand_type: str, tau: float = 0.02,
                   contact_weight: float = 5.0, pen_weight: float = 1.0):
    """(simple, penetration, contact, total) refiner training losses.

    simple: MSE of refined vs ground-truth hand params (active hands).
    penetration: mean squared depth of refined hand vertices inside the
    object surface sampling.
    contact: for joints whose ground-truth-frame distance is within tau, the
    mean squared deviation of the refined nearest-point distance from that
    ground-truth distance.  Anchoring to the ground-truth distance (rather
    than pulling it to zero) preserves contacts without dragging joints onto
    the surface: grasps keep a small clearance, and pulling their joints to
    zero distance would push the surrounding hand geometry inside the
    object.  The term is symmetric on purpose — penalizing only outward
    drift leaves near-surface joints free to random-walk inward over
    training.
    total = simple + pen_weight * penetration + contact_weight * contact.
    """
    ind_l, ind_r = hand_indicators(hand_type)
    dtype = ref_l.dtype
    obj_vec = obj_vec.to(dtype) if isinstance(obj_vec, torch.Tensor) else torch.as_tensor(obj_vec, dtype=dtype)
    P_def = deform_sequence(spec, obj_vec).to(dtype)
    normals = torch.as_tensor(spec.normals, dtype=dtype)
    L = P_def.shape[0]

    simple = torch.zeros((), dtype=dtype)
    penet = torch.zeros((), dtype=dtype)
    pen_count = 0
    contact = torch.zeros((), dtype=dtype)
    con_count = 0
    n_hands = ind_l + ind_r
    for side, ind, ref, gt, backend in (("left", ind_l, ref_l, gt_l, backend_left),
                                        ("right", ind_r, ref_r, gt_r, backend_right)):
        if not ind:
            continue
        simple = simple + ((ref - gt) ** 2).mean() / n_hands
        joints_ref, verts_ref = forward_kinematics(HandParams.from_vector(ref, side=side), backend)
        joints_gt, _ = forward_kinematics(HandParams.from_vector(gt, side=side), backend)
        for l in range(L):
            # penetration: nearest-sample normal sign test, index detached
            d2 = ((verts_ref[l][:, None, :] - P_def[l][None, :, :]) ** 2).sum(-1)
            idx = d2.argmin(dim=1).detach()
            nearest = P_def[l][idx]
            # rotate canonical normals into the global frame
            R = geometry.rot6d_to_matrix(obj_vec[l, 3:9]).to(dtype)
            n_glob = normals[idx] @ R.T
            signed = ((verts_ref[l] - nearest) * n_glob).sum(-1)
            inside = (signed < 0).detach()
            if inside.any():
                depth2 = d2[torch.arange(len(idx)), idx][inside]
                penet = penet + depth2.sum()
                pen_count += int(inside.sum())
            # contact: gate on ground-truth joint distance
            dj_gt = torch.cdist(joints_gt[l].detach(), P_def[l].detach()).min(dim=1).values
            gate = (dj_gt <= tau)
            if gate.any():
                dj_ref2 = ((joints_ref[l][:, None, :] - P_def[l][None, :, :]) ** 2).sum(-1)
                jidx = dj_ref2.argmin(dim=1).detach()
                d_ref = dj_ref2[torch.arange(len(jidx)), jidx].clamp_min(1e-18).sqrt()
                excess = torch.relu(d_ref - dj_gt)[gate]
                contact = contact + (excess ** 2).sum()
                con_count += int(gate.sum())
    if pen_count:
        penet = penet / pen_count
    if con_count:
        contact = contact / con_count
    total = simple + pen_weight * penet + contact_weight * contact
    return simple, penet, contact, total
