"""Contact-map CVAE: a point-set encoder with a learned input transform,
a contact encoder producing a 64-d latent, and a per-point decoder that maps
(object features, scale, text embedding, latent) to contact probabilities.

Feature widths are derived from the configured point count N; at N=1024 the
decoder input is per-point 1024 + 64 + 1 + 512 + 64 = 1665 wide.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .textenc import TEXT_EMBED_DIM

CONTACT_LATENT_DIM = 64
GLOBAL_FEAT_DIM = 1024
LOCAL_FEAT_DIM = 64


class ContactError(ValueError):
    pass


def decoder_input_width(n_points: int) -> int:  # noqa: ARG001 - width is N-independent per point
    return GLOBAL_FEAT_DIM + LOCAL_FEAT_DIM + 1 + TEXT_EMBED_DIM + CONTACT_LATENT_DIM


class InputTransform(nn.Module):
    """Learned k x k spatial transform with residual identity init (x = x + I)."""

    def __init__(self, k: int):
        super().__init__()
        self.k = k
        self.conv = nn.Sequential(
            nn.Conv1d(k, 64, 1), nn.BatchNorm1d(64), nn.ReLU(),
            nn.Conv1d(64, 128, 1), nn.BatchNorm1d(128), nn.ReLU(),
            nn.Conv1d(128, 1024, 1), nn.BatchNorm1d(1024), nn.ReLU(),
        )
        self.fc = nn.Sequential(
            nn.Linear(1024, 512), nn.BatchNorm1d(512), nn.ReLU(),
            nn.Linear(512, 256), nn.BatchNorm1d(256), nn.ReLU(),
            nn.Linear(256, k * k),
        )
        nn.init.zeros_(self.fc[-1].weight)
        nn.init.zeros_(self.fc[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, N, k) -> transform matrix (B, k, k)."""
        h = self.conv(x.transpose(1, 2))
        h = h.max(dim=2).values
        mat = self.fc(h).view(-1, self.k, self.k)
        eye = torch.eye(self.k, device=x.device, dtype=x.dtype)
        return mat + eye


class PointFeatureNet(nn.Module):
    """Point-set encoder: input transform, then per-point convs 64->128->1024
    with max-pooling to the global feature.  Local features come from the
    64-channel stage."""

    def __init__(self):
        super().__init__()
        self.stn = InputTransform(3)
        self.conv1 = nn.Sequential(nn.Conv1d(3, 64, 1), nn.BatchNorm1d(64), nn.ReLU())
        self.conv2 = nn.Sequential(nn.Conv1d(64, 128, 1), nn.BatchNorm1d(128), nn.ReLU())
        self.conv3 = nn.Sequential(nn.Conv1d(128, 1024, 1), nn.BatchNorm1d(1024))

    def forward(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """points: (B, N, 3) -> (global (B, 1024), local (B, N, 64))."""
        if points.ndim != 3 or points.shape[-1] != 3:
            raise ContactError(f"expected (B,N,3) point cloud, got {tuple(points.shape)}")
        trans = self.stn(points)
        x = torch.bmm(points, trans).transpose(1, 2)
        local = self.conv1(x)                       # (B, 64, N)
        h = self.conv3(self.conv2(local))
        global_feat = h.max(dim=2).values           # (B, 1024)
        return global_feat, local.transpose(1, 2)


class ContactEncoder(nn.Module):
    """CVAE posterior over the 64-d contact latent from (points, gt map)."""

    def __init__(self):
        super().__init__()
        self.stn = InputTransform(4)
        self.conv = nn.Sequential(
            nn.Conv1d(4, 64, 1), nn.BatchNorm1d(64), nn.ReLU(),
            nn.Conv1d(64, 128, 1), nn.BatchNorm1d(128), nn.ReLU(),
            nn.Conv1d(128, 1024, 1), nn.BatchNorm1d(1024),
        )
        self.fc = nn.Sequential(
            nn.Linear(1024, 512), nn.BatchNorm1d(512), nn.ReLU(),
            nn.Linear(512, 256), nn.BatchNorm1d(256), nn.ReLU(),
            nn.Linear(256, 2 * CONTACT_LATENT_DIM),
        )

    def forward(self, points: torch.Tensor, contact: torch.Tensor):
        """(B,N,3) points + (B,N) gt map -> (mu, logvar), each (B, 64)."""
        x = torch.cat([points, contact.unsqueeze(-1)], dim=-1)
        trans = self.stn(x)
        x = torch.bmm(x, trans).transpose(1, 2)
        h = self.conv(x).max(dim=2).values
        h = self.fc(h)
        return h[:, :CONTACT_LATENT_DIM], h[:, CONTACT_LATENT_DIM:]


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor | None = None):
    if eps is None:
        eps = torch.randn_like(mu)
    return mu + torch.exp(0.5 * logvar) * eps


class ContactDecoder(nn.Module):
    """Per-point MLP over the concatenated conditioning features -> sigmoid."""

    def __init__(self):
        super().__init__()
        width = decoder_input_width(0)
        self.net = nn.Sequential(
            nn.Linear(width, 512), nn.LeakyReLU(0.2),
            nn.Linear(512, 256), nn.LeakyReLU(0.2),
            nn.Linear(256, 128), nn.LeakyReLU(0.2),
            nn.Linear(128, 1),
        )

    def forward(self, global_feat, local_feat, scale, text_emb, z) -> torch.Tensor:
        """Broadcast global conditioning per point; returns probabilities (B, N)."""
        B, N, _ = local_feat.shape
        feat = torch.cat([
            global_feat.unsqueeze(1).expand(B, N, -1),
            local_feat,
            scale.reshape(B, 1, 1).expand(B, N, 1),
            text_emb.unsqueeze(1).expand(B, N, -1),
            z.unsqueeze(1).expand(B, N, -1),
        ], dim=-1)
        if feat.shape[-1] != decoder_input_width(N):
            raise ContactError(f"decoder input width {feat.shape[-1]} != {decoder_input_width(N)}")
        return torch.sigmoid(self.net(feat).squeeze(-1))


class ContactNet(nn.Module):
    """Full contact predictor: point features + CVAE encoder/decoder."""

    def __init__(self, n_points: int = 1024):
        super().__init__()
        self.n_points = n_points
        self.point_net = PointFeatureNet()
        self.encoder = ContactEncoder()
        self.decoder = ContactDecoder()

    def encode_object(self, points: torch.Tensor):
        if points.shape[1] != self.n_points:
            raise ContactError(f"configured for N={self.n_points}, got {points.shape[1]} points")
        return self.point_net(points)

    def forward(self, points, scale, text_emb, gt_contact=None, z=None, eps=None):
        """Training path when gt_contact is given (posterior z), else prior z.

        Returns dict with contact map, features, and latent stats.
        """
        global_feat, local_feat = self.encode_object(points)
        mu = logvar = None
        if gt_contact is not None:
            mu, logvar = self.encoder(points, gt_contact)
            z = reparameterize(mu, logvar, eps)
        elif z is None:
            z = torch.randn(points.shape[0], CONTACT_LATENT_DIM,
                            device=points.device, dtype=points.dtype)
        contact = self.decoder(global_feat, local_feat, scale, text_emb, z)
        return {"contact": contact, "global_feat": global_feat, "local_feat": local_feat,
                "mu": mu, "logvar": logvar, "z": z}


def build_gt_contact_map(deformed_points, hand_vertices_seq, tau: float = 0.02) -> torch.Tensor:
    """Binary contact map over object points: 1 iff a point comes within tau
    of any hand vertex at any frame.

    deformed_points: (L, N, 3) per-frame object points in the global frame.
    hand_vertices_seq: (L, V, 3) or list of per-frame (V_i, 3) vertex sets.
    """
    if isinstance(deformed_points, torch.Tensor):
        P = deformed_points
    else:
        P = torch.as_tensor(deformed_points, dtype=torch.float64)
    L = P.shape[0]
    if L == 0:
        raise ContactError("empty sequence")
    mind = torch.full((P.shape[1],), float("inf"), dtype=P.dtype)
    for l in range(L):
        V = hand_vertices_seq[l]
        V = V if isinstance(V, torch.Tensor) else torch.as_tensor(V, dtype=P.dtype)
        if len(V) == 0:
            continue
        d = torch.cdist(P[l].to(V.dtype), V)
        mind = torch.minimum(mind, d.min(dim=1).values.to(mind.dtype))
    return (mind <= tau).to(P.dtype)


def contact_losses(pred, target, mu, logvar, kl_weight: float = 1e-3,
                   eps: float = 1e-7):
    """(bce, dice, kl, total) for a predicted contact map.

    BCE is the per-element mean; dice = 1 - 2*sum(pq)/(sum(p)+sum(q)+eps);
    KL is against the standard normal (sum over latent dims, mean over batch).
    """
    if ((pred < 0) | (pred > 1)).any() or ((target < 0) | (target > 1)).any():
        raise ContactError("contact probabilities must lie in [0, 1]")
    p = pred.clamp(eps, 1 - eps)
    bce = F.binary_cross_entropy(p, target)
    inter = (pred * target).sum()
    dice = 1 - 2 * inter / (pred.sum() + target.sum() + eps)
    if mu is not None and logvar is not None:
        kl = (-0.5 * (1 + logvar - mu.pow(2) - logvar.exp()).sum(dim=-1)).mean()
    else:
        kl = torch.zeros((), dtype=pred.dtype)
    total = bce + dice + kl_weight * kl
    return bce, dice, kl, total
