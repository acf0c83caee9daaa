"""Text-conditioned hand-object motion diffusion: cosine schedule, forward
noising, the transformer denoiser with frame-wise and agent-wise positional
encoding, the training losses, and the clean-sample (x0-prediction) sampler.

Token layout: [condition, (lhand, rhand, obj) x frame], so the capacity at
the 150-frame maximum is 1 + 3*150 = 451.  Tokens past the predicted length
and tokens of an inactive hand are excluded from attention.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
from torch import nn

from . import geometry
from .geometry import rot6d_to_matrix
from .hand import HandParams, forward_kinematics
from .motion import HAND_DIM, OBJ_DIM, MotionSequence
from .textenc import TEXT_EMBED_DIM, hand_indicators

AGENTS = ("lhand", "rhand", "obj")


class DiffusionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class DiffusionSchedule:
    alpha_bar: torch.Tensor   # (T+1,), alpha_bar[0] = 1
    betas: torch.Tensor       # (T,)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas


def make_schedule(T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> DiffusionSchedule:
    """Cosine schedule: alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T)+s)/(1+s) * pi/2),
    with per-step betas clipped at ``max_beta`` and alpha_bar rebuilt from the
    clipped betas so the table stays self-consistent."""
    if T < 1:
        raise DiffusionError("T must be >= 1")
    t = torch.arange(T + 1, dtype=torch.float64)
    f = torch.cos(((t / T) + s) / (1 + s) * math.pi / 2) ** 2
    raw = f / f[0]
    betas = (1 - raw[1:] / raw[:-1]).clamp(1e-8, max_beta)
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64),
                           torch.cumprod(1 - betas, dim=0)])
    return DiffusionSchedule(alpha_bar=alpha_bar, betas=betas)


def forward_noise(x0, t, schedule: DiffusionSchedule, eps=None):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, applied to every channel.

    t may be an int or a (B,) tensor indexing leading dimensions of x0.
    Returns (x_t, eps).
    """
    x0 = x0 if isinstance(x0, torch.Tensor) else torch.as_tensor(np.asarray(x0), dtype=torch.float32)
    if eps is None:
        eps = torch.randn_like(x0)
    else:
        eps = eps if isinstance(eps, torch.Tensor) else torch.as_tensor(np.asarray(eps), dtype=x0.dtype)
    if isinstance(t, int):
        if not 1 <= t <= schedule.T:
            raise DiffusionError(f"t={t} outside [1, {schedule.T}]")
        ab = schedule.alpha_bar[t].to(x0.dtype)
        return ab.sqrt() * x0 + (1 - ab).sqrt() * eps, eps
    t = torch.as_tensor(t, dtype=torch.long)
    if ((t < 1) | (t > schedule.T)).any():
        raise DiffusionError("t outside [1, T]")
    ab = schedule.alpha_bar.to(x0.dtype)[t]
    while ab.ndim < x0.ndim:
        ab = ab.unsqueeze(-1)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps, eps


# ---------------------------------------------------------------------------
# Positional encodings and token masking
# ---------------------------------------------------------------------------

def sinusoid_table(n_pos: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n_pos, dtype=torch.float32)[:, None]
    i = torch.arange(dim // 2, dtype=torch.float32)[None, :]
    angles = pos / torch.pow(10000.0, 2 * i / dim)
    table = torch.zeros(n_pos, dim)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles)
    return table


def token_capacity(l_max: int) -> int:
    return 1 + 3 * l_max


def token_index(frame: int, agent: int) -> int:
    """Index of (frame, agent) in the token sequence; token 0 is the condition."""
    return 1 + 3 * frame + agent


def active_token_mask(length: int, hand_type: str, l_max: int) -> torch.Tensor:
    """Boolean (1 + 3*l_max,) mask: True where the token takes part in attention."""
    if length > l_max:
        raise DiffusionError(f"length {length} exceeds capacity {l_max}")
    ind_l, ind_r = hand_indicators(hand_type)
    mask = torch.zeros(token_capacity(l_max), dtype=torch.bool)
    mask[0] = True
    for l in range(length):
        if ind_l:
            mask[token_index(l, 0)] = True
        if ind_r:
            mask[token_index(l, 1)] = True
        mask[token_index(l, 2)] = True
    return mask


# ---------------------------------------------------------------------------
# Condition bundle
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ConditionBundle:
    text_emb: torch.Tensor     # (512,)
    object_feat: torch.Tensor  # (1024,)
    contact: torch.Tensor      # (N,)
    scale: float

    def object_condition(self) -> torch.Tensor:
        """Concatenated [F_obj | contact | scale]; width 1024 + N + 1."""
        s = torch.as_tensor([self.scale], dtype=self.object_feat.dtype)
        return torch.cat([self.object_feat, self.contact.to(self.object_feat.dtype), s])


def object_condition_width(n_points: int) -> int:
    return 1024 + n_points + 1


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

class MotionDenoiser(nn.Module):
    """Post-norm transformer encoder predicting the clean motion directly."""

    def __init__(self, n_points: int = 1024, l_max: int = 150, d_model: int = 512,
                 n_layers: int = 8, n_heads: int = 4, ff_mult: int = 2):
        super().__init__()
        self.n_points = n_points
        self.l_max = l_max
        self.d_model = d_model
        self.f_in_lhand = nn.Linear(HAND_DIM, d_model)
        self.f_in_rhand = nn.Linear(HAND_DIM, d_model)
        self.f_in_obj = nn.Linear(OBJ_DIM, d_model)
        self.f_text = nn.Linear(TEXT_EMBED_DIM, d_model)
        self.f_obj = nn.Linear(object_condition_width(n_points), d_model)
        self.f_ts = nn.Sequential(nn.Linear(d_model, d_model), nn.SiLU(),
                                  nn.Linear(d_model, d_model))
        # rows 0..l_max-1: frame-wise PE; rows l_max..l_max+2: agent-wise PE
        self.register_buffer("pe", sinusoid_table(l_max + 3, d_model), persistent=False)
        self.register_buffer("t_pe", sinusoid_table(4096, d_model), persistent=False)
        layer = nn.TransformerEncoderLayer(
            d_model=d_model, nhead=n_heads, dim_feedforward=ff_mult * d_model,
            activation="gelu", batch_first=True, norm_first=False, dropout=0.0)
        self.encoder = nn.TransformerEncoder(layer, num_layers=n_layers,
                                             enable_nested_tensor=False)
        self.f_out_lhand = nn.Linear(d_model, HAND_DIM)
        self.f_out_rhand = nn.Linear(d_model, HAND_DIM)
        self.f_out_obj = nn.Linear(d_model, OBJ_DIM)

    def frame_pe(self, l: int) -> torch.Tensor:
        return self.pe[l]

    def agent_pe(self, agent: int) -> torch.Tensor:
        return self.pe[self.l_max + agent]

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.f_ts(self.t_pe[t.long()])

    def condition_token(self, t, cond_text, cond_obj) -> torch.Tensor:
        """X_cond = f_text(text) + f_obj(concat) plus the time embedding."""
        return self.f_text(cond_text) + self.f_obj(cond_obj) + self.time_embedding(t)

    def forward(self, x_lhand, x_rhand, x_obj, t, cond_text, cond_obj,
                lengths, hand_types):
        """Denoise a batch of padded motions.

        x_lhand/x_rhand: (B, L, 99); x_obj: (B, L, 10); t: (B,) time-steps;
        cond_text: (B, 512); cond_obj: (B, 1024+N+1); lengths: (B,) ints;
        hand_types: list of B strings.  Returns clean-motion estimates with
        the same shapes.
        """
        B, L, _ = x_obj.shape
        if L > self.l_max:
            raise DiffusionError(f"sequence length {L} exceeds l_max {self.l_max}")
        d = self.d_model
        emb = torch.zeros(B, token_capacity(L), d, dtype=x_obj.dtype, device=x_obj.device)
        emb[:, 0] = self.condition_token(t, cond_text, cond_obj)
        frame_pe = self.pe[:L].to(x_obj.dtype)
        agent_pe = [self.agent_pe(a).to(x_obj.dtype) for a in range(3)]
        per_agent = [self.f_in_lhand(x_lhand), self.f_in_rhand(x_rhand), self.f_in_obj(x_obj)]
        for a in range(3):
            emb[:, 1 + a::3] = per_agent[a] + frame_pe[None, :, :] + agent_pe[a]

        active = torch.stack([
            active_token_mask(int(lengths[b]), hand_types[b], L) for b in range(B)
        ]).to(x_obj.device)
        out = self.encoder(emb, src_key_padding_mask=~active)
        return (self.f_out_lhand(out[:, 1::3]),
                self.f_out_rhand(out[:, 2::3]),
                self.f_out_obj(out[:, 3::3]))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _frame_mask(lengths, L, dtype):
    B = len(lengths)
    mask = torch.zeros(B, L, dtype=dtype)
    for b, ln in enumerate(lengths):
        mask[b, :int(ln)] = 1.0
    return mask


def loss_diff(pred, target, lengths, hand_types):
    """Per-agent mean squared error over active frames/channels, summed over
    the three agents.  Inactive-hand channels contribute nothing."""
    total = 0.0
    for a, agent in enumerate(AGENTS):
        p, gt = pred[a], target[a]
        mask = _frame_mask(lengths, p.shape[1], p.dtype).to(p.device)
        if agent != "obj":
            gates = torch.tensor([float(hand_indicators(ht)[0 if agent == "lhand" else 1])
                                  for ht in hand_types], dtype=p.dtype, device=p.device)
            mask = mask * gates[:, None]
        sq = ((p - gt) ** 2).sum(-1) / p.shape[-1]
        denom = mask.sum().clamp_min(1.0)
        total = total + (sq * mask).sum() / denom
    return total


def hand_joints_sequence(hand_vec, backend, side):
    """(L, 99) hand parameter rows -> (L, 21, 3) joints via forward kinematics."""
    params = HandParams.from_vector(hand_vec, side=side)
    joints, _ = forward_kinematics(params, backend)
    return joints


def deform_sequence(spec: geometry.ObjectSpec, obj_vec: torch.Tensor) -> torch.Tensor:
    """(L, 10) object parameter rows -> (L, N, 3) deformed point cloud."""
    frames = []
    for l in range(obj_vec.shape[0]):
        frames.append(geometry.deform_point_cloud(
            spec, obj_vec[l, :3], obj_vec[l, 3:9], obj_vec[l, 9]))
    return torch.stack(frames)


def loss_dm(pred, target, spec, backend_left, backend_right, lengths, hand_types,
            tau: float = 0.02):
    """Distance-map loss: squared error between predicted and ground-truth
    joint-to-point distance maps, gated per element by the ground-truth
    distance being below tau, hands gated by the hand-type indicators.
    Mean over gated elements (0 when nothing is gated)."""
    total = torch.zeros((), dtype=pred[2].dtype)
    count = torch.zeros((), dtype=pred[2].dtype)
    for b in range(pred[2].shape[0]):
        L = int(lengths[b])
        ind_l, ind_r = hand_indicators(hand_types[b])
        P_hat = deform_sequence(spec, pred[2][b, :L])
        P_gt = deform_sequence(spec, target[2][b, :L])
        for a, side, ind, backend in ((0, "left", ind_l, backend_left),
                                      (1, "right", ind_r, backend_right)):
            if not ind:
                continue
            J_hat = hand_joints_sequence(pred[a][b, :L], backend, side)
            J_gt = hand_joints_sequence(target[a][b, :L], backend, side)
            d_hat = geometry.distance_map(J_hat, P_hat)
            d_gt = geometry.distance_map(J_gt, P_gt)
            gate = (d_gt < tau).to(d_hat.dtype).detach()
            total = total + (((d_hat - d_gt) * gate) ** 2).sum().to(total.dtype)
            count = count + gate.sum().to(count.dtype)
    if count == 0:
        return total * 0.0
    return total / count


def loss_ro(pred, target, lengths, hand_types):
    """Relative-orientation loss: squared Frobenius difference between the
    predicted and ground-truth hand-in-object-frame rotations."""
    total = 0.0
    B = target[2].shape[0]
    for b in range(B):
        L = int(lengths[b])
        ind_l, ind_r = hand_indicators(hand_types[b])
        R_obj_hat = rot6d_to_matrix(pred[2][b, :L, 3:9])
        R_obj_gt = rot6d_to_matrix(target[2][b, :L, 3:9])
        for a, ind in ((0, ind_l), (1, ind_r)):
            if not ind:
                continue
            R_h_hat = rot6d_to_matrix(pred[a][b, :L, 3:9])
            R_h_gt = rot6d_to_matrix(target[a][b, :L, 3:9])
            rel_hat = R_obj_hat.transpose(-1, -2) @ R_h_hat
            rel_gt = R_obj_gt.transpose(-1, -2) @ R_h_gt
            total = total + ((rel_hat - rel_gt) ** 2).sum(dim=(-2, -1)).mean() / B
    return total if isinstance(total, torch.Tensor) else torch.zeros(())


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@torch.no_grad()
def sample(model: MotionDenoiser, schedule: DiffusionSchedule, cond: ConditionBundle,
           length: int, hand_type: str, generator: torch.Generator | None = None) -> MotionSequence:
    """Generate a motion by iterating t = T..1: predict the clean motion, then
    re-noise it to t-1 with the x0-parameterized posterior q(x_{t-1}|x_t, x0).
    """
    if not 1 <= length <= model.l_max:
        raise DiffusionError(f"length {length} outside [1, {model.l_max}]")
    model.eval()
    dtype = next(model.parameters()).dtype
    shape = [(1, length, HAND_DIM), (1, length, HAND_DIM), (1, length, OBJ_DIM)]
    x = [torch.randn(s, generator=generator, dtype=dtype) for s in shape]
    cond_text = cond.text_emb.to(dtype).reshape(1, -1)
    cond_obj = cond.object_condition().to(dtype).reshape(1, -1)
    lengths = [length]
    hand_types = [hand_type]
    ab = schedule.alpha_bar.to(dtype)
    betas = schedule.betas.to(dtype)
    x0_hat = x
    for t in range(schedule.T, 0, -1):
        tt = torch.full((1,), t, dtype=torch.long)
        x0_hat = list(model(x[0], x[1], x[2], tt, cond_text, cond_obj, lengths, hand_types))
        if t == 1:
            break
        beta_t = betas[t - 1]
        alpha_t = 1 - beta_t
        c0 = ab[t - 1].sqrt() * beta_t / (1 - ab[t])
        ct = alpha_t.sqrt() * (1 - ab[t - 1]) / (1 - ab[t])
        var = (1 - ab[t - 1]) / (1 - ab[t]) * beta_t
        x = [c0 * x0 + ct * xt + var.sqrt() * torch.randn(xt.shape, generator=generator, dtype=dtype)
             for x0, xt in zip(x0_hat, x)]

    ind_l, ind_r = hand_indicators(hand_type)
    lhand = x0_hat[0][0] if ind_l else torch.zeros(length, HAND_DIM, dtype=dtype)
    rhand = x0_hat[1][0] if ind_r else torch.zeros(length, HAND_DIM, dtype=dtype)
    return MotionSequence(lhand.numpy().astype(np.float64),
                          rhand.numpy().astype(np.float64),
                          x0_hat[2][0].numpy().astype(np.float64),
                          hand_type=hand_type)
