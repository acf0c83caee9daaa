"""Evaluation metrics: RNN action-classifier features, top-3 accuracy, FID,
diversity, multimodality, the two-rule physical-realism scorer, and the
20-run confidence-interval protocol.
"""

from __future__ import annotations

import dataclasses
import json
import warnings

import numpy as np
import scipy.linalg
import torch
from torch import nn

from .motion import FRAME_DIM, MotionSequence


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Action classifier / motion features
# ---------------------------------------------------------------------------

def zero_inactive_hands(seq: MotionSequence) -> MotionSequence:
    """Canonicalize a sequence for feature extraction: channels of hands that
    do not participate are zeroed, matching the sampler's output convention
    (ground-truth clips may park the idle hand at a rest pose instead)."""
    lhand = seq.lhand if seq.hand_type in ("left", "both") else np.zeros_like(seq.lhand)
    rhand = seq.rhand if seq.hand_type in ("right", "both") else np.zeros_like(seq.rhand)
    return MotionSequence(lhand, rhand, seq.obj, hand_type=seq.hand_type)


class ActionClassifier(nn.Module):
    """GRU over frame vectors; the penultimate activation is the motion feature."""

    def __init__(self, n_classes: int, hidden: int = 64, feature_dim: int = 64):
        super().__init__()
        self.gru = nn.GRU(FRAME_DIM, hidden, batch_first=True)
        self.feat = nn.Sequential(nn.Linear(hidden, feature_dim), nn.ReLU())
        self.head = nn.Linear(feature_dim, n_classes)
        self.feature_dim = feature_dim

    def forward(self, frames: torch.Tensor, lengths=None):
        """frames: (B, L, 208) padded; returns (logits, features)."""
        out, _ = self.gru(frames)
        if lengths is None:
            last = out[:, -1]
        else:
            idx = torch.as_tensor(lengths, dtype=torch.long) - 1
            last = out[torch.arange(len(out)), idx]
        f = self.feat(last)
        return self.head(f), f

    @torch.no_grad()
    def features(self, seqs: list[MotionSequence]) -> np.ndarray:
        self.eval()
        feats = []
        for s in seqs:
            x = torch.as_tensor(s.frames(), dtype=torch.float32).unsqueeze(0)
            _, f = self(x)
            feats.append(f[0].numpy())
        return np.stack(feats)

    @torch.no_grad()
    def logits_for(self, seqs: list[MotionSequence]) -> np.ndarray:
        self.eval()
        out = []
        for s in seqs:
            x = torch.as_tensor(s.frames(), dtype=torch.float32).unsqueeze(0)
            lg, _ = self(x)
            out.append(lg[0].numpy())
        return np.stack(out)


def train_classifier(seqs: list[MotionSequence], labels: list[int], n_classes: int,
                     hidden: int = 64, steps: int = 600, lr: float = 1e-3,
                     batch_size: int = 16, seed: int = 0) -> ActionClassifier:
    if n_classes < 2 or len(set(labels)) < 2:
        raise MetricsError("classifier training needs at least two classes")
    torch.manual_seed(seed)
    model = ActionClassifier(n_classes, hidden=hidden, feature_dim=hidden)
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    y = np.asarray(labels)
    ce = nn.CrossEntropyLoss()
    L = max(len(s) for s in seqs)
    padded = np.zeros((len(seqs), L, FRAME_DIM), dtype=np.float32)
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        padded[i, :len(s)] = s.frames()
        lengths[i] = len(s)
    X = torch.from_numpy(padded)
    model.train()
    for _ in range(steps):
        idx = rng.choice(len(seqs), size=min(batch_size, len(seqs)), replace=False)
        logits, _ = model(X[idx], lengths[idx])
        loss = ce(logits, torch.as_tensor(y[idx]))
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Feature-space metrics
# ---------------------------------------------------------------------------

def metric_accuracy_topk(logits: np.ndarray, labels, k: int = 3) -> float:
    labels = np.asarray(labels)
    topk = np.argsort(-logits, axis=1)[:, :k]
    return float(np.mean([labels[i] in topk[i] for i in range(len(labels))]))


def metric_fid(feats_a: np.ndarray, feats_b: np.ndarray, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    mu_a, mu_b = feats_a.mean(0), feats_b.mean(0)
    cov_a = np.cov(feats_a, rowvar=False)
    cov_b = np.cov(feats_b, rowvar=False)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    diff = mu_a - mu_b
    prod = cov_a @ cov_b
    covmean, _ = scipy.linalg.sqrtm(prod, disp=False)
    if not np.isfinite(covmean).all():
        warnings.warn("singular covariance product; regularizing with eps*I")
        off = eps * np.eye(cov_a.shape[0])
        covmean, _ = scipy.linalg.sqrtm((cov_a + off) @ (cov_b + off), disp=False)
    covmean = np.real(covmean)
    fid = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(covmean))
    return max(fid, 0.0)


def metric_diversity(feats: np.ndarray, n_pairs: int = 32, seed: int = 0) -> float:
    """Mean pairwise feature distance over randomly drawn pairs."""
    if len(feats) < 2:
        raise MetricsError("diversity needs at least two samples")
    rng = np.random.default_rng(seed)
    i = rng.integers(0, len(feats), size=n_pairs)
    j = rng.integers(0, len(feats), size=n_pairs)
    return float(np.mean(np.linalg.norm(feats[i] - feats[j], axis=1)))


def metric_multimodality(feats: np.ndarray, prompts) -> float:
    """Average within-prompt feature variance (mean squared distance from the
    per-prompt mean, averaged over prompts with >= 2 samples)."""
    prompts = np.asarray(prompts)
    per_prompt = []
    for p in np.unique(prompts):
        group = feats[prompts == p]
        if len(group) < 2:
            continue
        per_prompt.append(float(((group - group.mean(0)) ** 2).sum(1).mean()))
    if not per_prompt:
        raise MetricsError("multimodality needs >= 2 samples for some prompt")
    return float(np.mean(per_prompt))


# ---------------------------------------------------------------------------
# Physical realism
# ---------------------------------------------------------------------------

def physical_realism_frame(hand_vertices, hand_joints, active_hands,
                           object_points, object_points_prev, object_normals,
                           pen_max: float = 0.005, move_thresh: float = 0.002,
                           contact_tau: float = 0.02) -> int:
    """Binary per-frame realism: 1 iff (a) no active-hand vertex penetrates
    deeper than pen_max, and (b) whenever the object moved more than
    move_thresh since the previous frame, some active hand has a joint within
    contact_tau of the object (moving objects need supporting contact).

    hand_vertices / hand_joints: dicts keyed by side for the active hands.
    object_points_prev may be None for the first frame (rule (b) vacuous).
    """
    from .geometry import penetration_query

    for side in active_hands:
        report = penetration_query(np.asarray(hand_vertices[side]),
                                   np.asarray(object_points),
                                   np.asarray(object_normals))
        if report.max_depth > pen_max:
            return 0
    if object_points_prev is not None:
        moved = float(np.linalg.norm(
            np.asarray(object_points) - np.asarray(object_points_prev), axis=1).mean())
        if moved > move_thresh:
            supported = False
            for side in active_hands:
                d = np.linalg.norm(np.asarray(hand_joints[side])[:, None, :]
                                   - np.asarray(object_points)[None, :, :], axis=-1)
                if d.min() <= contact_tau:
                    supported = True
                    break
            if not supported:
                return 0
    return 1


def physical_realism_sequence(seq: MotionSequence, spec, backend_left, backend_right,
                              pen_max: float = 0.005, move_thresh: float = 0.002,
                              contact_tau: float = 0.02) -> np.ndarray:
    """Per-frame realism scores for a motion sequence."""
    from .diffusion import deform_sequence
    from .hand import HandParams, forward_kinematics

    obj = torch.as_tensor(seq.obj, dtype=torch.float64)
    P = deform_sequence(spec, obj).numpy()
    # object normals rotated per frame (articulation on labeled parts ignored;
    # adequate for the rigid primitives this scorer is used on)
    from .geometry import rot6d_to_matrix
    sides = {"left": seq.lhand, "right": seq.rhand}
    active = [s for s in sides if (seq.hand_type in (s, "both"))]
    verts, joints = {}, {}
    for side in active:
        params = HandParams.from_vector(torch.as_tensor(sides[side], dtype=torch.float64),
                                        side=side)
        backend = backend_left if side == "left" else backend_right
        j, v = forward_kinematics(params, backend)
        joints[side], verts[side] = j.numpy(), v.numpy()
    scores = np.zeros(len(seq), dtype=int)
    for l in range(len(seq)):
        R = rot6d_to_matrix(obj[l, 3:9]).numpy()
        normals = spec.normals @ R.T
        scores[l] = physical_realism_frame(
            {s: verts[s][l] for s in active}, {s: joints[s][l] for s in active},
            active, P[l], P[l - 1] if l > 0 else None, normals,
            pen_max=pen_max, move_thresh=move_thresh, contact_tau=contact_tau)
    return scores


def max_penetration_sequence(seq: MotionSequence, spec, backend_left,
                             backend_right) -> float:
    """Largest penetration depth (meters) of any active-hand vertex over the
    sequence; 0.0 when the hands never enter the object."""
    from .diffusion import deform_sequence
    from .geometry import penetration_query, rot6d_to_matrix
    from .hand import HandParams, forward_kinematics

    obj = torch.as_tensor(seq.obj, dtype=torch.float64)
    P = deform_sequence(spec, obj).numpy()
    sides = {"left": seq.lhand, "right": seq.rhand}
    active = [s for s in sides if seq.hand_type in (s, "both")]
    worst = 0.0
    for side in active:
        params = HandParams.from_vector(torch.as_tensor(sides[side], dtype=torch.float64),
                                        side=side)
        backend = procedural_side(backend_left, backend_right, side)
        _, verts = forward_kinematics(params, backend)
        verts = verts.numpy()
        for l in range(len(seq)):
            R = rot6d_to_matrix(obj[l, 3:9]).numpy()
            report = penetration_query(verts[l], P[l], spec.normals @ R.T)
            worst = max(worst, float(report.max_depth))
    return worst


def procedural_side(backend_left, backend_right, side: str):
    return backend_left if side == "left" else backend_right


# ---------------------------------------------------------------------------
# Multi-run protocol
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class MetricReport:
    per_run: dict[str, list[float]]   # metric name -> 20 per-run values
    n_runs: int = 20

    def aggregate(self) -> dict[str, dict[str, float]]:
        """(mean, 95% CI half-width) per metric, recomputed from stored values."""
        out = {}
        for name, values in self.per_run.items():
            v = np.asarray(values, dtype=np.float64)
            if len(v) != self.n_runs:
                raise MetricsError(f"{name}: expected {self.n_runs} runs, got {len(v)}")
            mean = float(v.mean())
            # 95% CI half-width from the normal approximation
            half = float(1.96 * v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
            out[name] = {"mean": mean, "ci95": half}
        return out

    def to_json(self) -> str:
        return json.dumps({"n_runs": self.n_runs, "per_run": self.per_run,
                           "aggregate": self.aggregate()}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        return cls(per_run=data["per_run"], n_runs=data["n_runs"])
