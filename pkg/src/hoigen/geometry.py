"""Deterministic geometric primitives: rotations, sampling, deformation,
distance fields and penetration/contact queries.

Everything here is a pure function of its inputs.  Functions accept numpy
arrays or torch tensors; torch inputs keep gradients where the operation is
differentiable (rotation decoding, deformation, distance maps, attention map).
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

ORTHONORMAL_TOL = 1e-4
DEGENERATE_EPS = 1e-8


class GeometryError(ValueError):
    pass


class DegenerateRotationError(GeometryError):
    pass


def _as_tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# 6D rotation representation (first two matrix columns, Gram-Schmidt decode)
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r6) -> torch.Tensor:
    """Decode a 6D rotation (..., 6) into rotation matrices (..., 3, 3).

    The two 3-vectors are interpreted as the first two columns of a rotation
    matrix; Gram-Schmidt plus a cross product yields an orthonormal frame with
    determinant +1.
    """
    r6 = _as_tensor(r6)
    if r6.shape[-1] != 6:
        raise GeometryError(f"expected trailing dimension 6, got {r6.shape}")
    if not torch.isfinite(r6).all():
        raise DegenerateRotationError("non-finite 6D rotation input")
    a = r6[..., 0:3]
    b = r6[..., 3:6]
    na = torch.linalg.norm(a, dim=-1)
    if (na < DEGENERATE_EPS).any():
        raise DegenerateRotationError("first column has (near-)zero norm")
    c1 = a / na[..., None]
    proj = (c1 * b).sum(-1, keepdim=True)
    b_orth = b - proj * c1
    nb = torch.linalg.norm(b_orth, dim=-1)
    if (nb < DEGENERATE_EPS).any():
        raise DegenerateRotationError("second column is parallel to the first")
    c2 = b_orth / nb[..., None]
    c3 = torch.cross(c1, c2, dim=-1)
    return torch.stack([c1, c2, c3], dim=-1)


def matrix_to_rot6d(R) -> torch.Tensor:
    """Encode rotation matrices (..., 3, 3) as 6D vectors (first two columns)."""
    R = _as_tensor(R)
    if R.shape[-2:] != (3, 3):
        raise GeometryError(f"expected (...,3,3), got {R.shape}")
    _validate_rotation(R)
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def _validate_rotation(R: torch.Tensor, tol: float = ORTHONORMAL_TOL):
    eye = torch.eye(3, dtype=R.dtype, device=R.device).expand(R.shape)
    err = torch.linalg.norm(R.transpose(-1, -2) @ R - eye, dim=(-2, -1))
    if (err > 10 * tol).any():
        raise GeometryError("matrix is not orthonormal within tolerance")
    if (torch.det(R) < 0).any():
        raise GeometryError("matrix has negative determinant (reflection)")


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrices (n, 3, 3) via QR of Gaussian samples."""
    A = rng.standard_normal((n, 3, 3))
    Q, Rd = np.linalg.qr(A)
    # fix signs so the distribution is Haar and det = +1
    d = np.sign(np.einsum("nii->ni", Rd))
    Q = Q * d[:, None, :]
    neg = np.linalg.det(Q) < 0
    Q[neg, :, 2] *= -1.0
    return Q


# ---------------------------------------------------------------------------
# Object canonicalization
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Articulation:
    axis: np.ndarray          # unit 3-vector, canonical frame
    origin: np.ndarray        # 3-vector, meters
    part_labels: np.ndarray   # (N,) bool over sampled points
    indicator: bool


@dataclasses.dataclass
class ObjectSpec:
    vertices: np.ndarray      # (M, 3) meters
    faces: np.ndarray         # (F, 3) int
    scale: float              # meters
    points: np.ndarray        # (N, 3) meters
    points_norm: np.ndarray   # (N, 3) unitless
    point_indices: np.ndarray  # (N,) indices into vertices
    normals: Optional[np.ndarray] = None      # (N, 3) outward unit
    articulation: Optional[Articulation] = None

    @property
    def num_points(self) -> int:
        return len(self.points)


def farthest_point_sample(points, n: int, allow_replacement: bool = False) -> np.ndarray:
    """Greedy max-min farthest point sampling; returns n indices.

    Deterministic: starts at the point farthest from the centroid, ties broken
    by lowest index.  With ``allow_replacement`` and n > M the FPS ordering is
    repeated cyclically to pad to n.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeometryError(f"expected (M,3) points, got {pts.shape}")
    m = len(pts)
    if m == 0:
        raise GeometryError("empty point set")
    if n < 1:
        raise GeometryError("n must be >= 1")
    if n > m and not allow_replacement:
        raise GeometryError(f"requested {n} samples from {m} points")

    centroid = pts.mean(axis=0)
    start = int(np.argmax(np.linalg.norm(pts - centroid, axis=1)))
    k = min(n, m)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    if n > m:
        reps = int(np.ceil(n / m))
        chosen = np.tile(chosen, reps)[:n]
    return chosen


def mesh_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; falls back to radial directions when a
    vertex touches no face (or the mesh has no faces)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    normals = np.zeros_like(vertices)
    if faces is not None and len(faces):
        faces = np.asarray(faces, dtype=np.int64)
        fn = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]],
                      vertices[faces[:, 2]] - vertices[faces[:, 0]])
        for i in range(3):
            np.add.at(normals, faces[:, i], fn)
    lengths = np.linalg.norm(normals, axis=1)
    bad = lengths < 1e-12
    if bad.any():
        radial = vertices - vertices.mean(axis=0)
        rl = np.linalg.norm(radial, axis=1)
        rl[rl < 1e-12] = 1.0
        normals[bad] = (radial / rl[:, None])[bad]
        lengths = np.linalg.norm(normals, axis=1)
        lengths[lengths < 1e-12] = 1.0
    return normals / lengths[:, None]


def canonicalize_object(vertices, faces=None, n: int = 1024,
                        articulation: Optional[dict] = None) -> ObjectSpec:
    """Build an ObjectSpec: scale, FPS point cloud, normalized points.

    Scale is the maximum distance from the vertex centroid to any vertex.
    Meshes with fewer than n vertices are sampled with replacement.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[1] != 3 or len(vertices) == 0:
        raise GeometryError("mesh must have at least one (x,y,z) vertex")
    faces = np.asarray(faces, dtype=np.int64) if faces is not None else np.zeros((0, 3), np.int64)
    centroid = vertices.mean(axis=0)
    scale = float(np.linalg.norm(vertices - centroid, axis=1).max())
    if scale <= 0:
        raise GeometryError("all vertices coincide; object has zero scale")
    idx = farthest_point_sample(vertices, n, allow_replacement=True)
    points = vertices[idx]
    normals = mesh_vertex_normals(vertices, faces)[idx]
    art = None
    if articulation is not None:
        labels = np.zeros(len(vertices), dtype=bool)
        labels[np.asarray(articulation["part_vertex_ids"], dtype=np.int64)] = True
        axis = np.asarray(articulation["axis"], dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        art = Articulation(
            axis=axis,
            origin=np.asarray(articulation["origin"], dtype=np.float64),
            part_labels=labels[idx],
            indicator=bool(articulation.get("enabled", True)),
        )
    return ObjectSpec(vertices=vertices, faces=faces, scale=scale,
                      points=points, points_norm=points / scale,
                      point_indices=idx, normals=normals, articulation=art)


# ---------------------------------------------------------------------------
# Point-cloud deformation
# ---------------------------------------------------------------------------

def axis_angle_matrix(axis, angle) -> torch.Tensor:
    """Rodrigues rotation matrix for a unit axis and angle (radians)."""
    axis = _as_tensor(axis)
    angle = angle if isinstance(angle, torch.Tensor) else torch.as_tensor(angle, dtype=axis.dtype)
    k = axis / torch.linalg.norm(axis)
    K = torch.zeros(3, 3, dtype=axis.dtype)
    K[0, 1], K[0, 2] = -k[2], k[1]
    K[1, 0], K[1, 2] = k[2], -k[0]
    K[2, 0], K[2, 1] = -k[1], k[0]
    eye = torch.eye(3, dtype=axis.dtype)
    return eye + torch.sin(angle) * K + (1 - torch.cos(angle)) * (K @ K)


def deform_points(points, part_labels, articulation_axis, articulation_origin,
                  indicator, t_o, r6, alpha) -> torch.Tensor:
    """Apply articulation (labeled points only, when the indicator is set)
    followed by the rigid transform R p + t to a canonical point cloud."""
    P = _as_tensor(points)
    t = _as_tensor(t_o)
    R = rot6d_to_matrix(r6)
    if indicator:
        if articulation_axis is None or part_labels is None:
            raise GeometryError("articulation requested but spec carries no articulation data")
        A = axis_angle_matrix(articulation_axis, alpha).to(P.dtype)
        origin = _as_tensor(articulation_origin).to(P.dtype)
        moved = (P - origin) @ A.T + origin
        mask = _as_tensor(part_labels, dtype=torch.bool)
        P = torch.where(mask[:, None], moved, P)
    return P @ R.T.to(P.dtype) + t.to(P.dtype)


def deform_point_cloud(spec: ObjectSpec, t_o, r6, alpha) -> torch.Tensor:
    """Deform an ObjectSpec's sampled point cloud into the global frame."""
    art = spec.articulation
    indicator = bool(art.indicator) if art is not None else False
    return deform_points(
        spec.points,
        art.part_labels if art is not None else None,
        art.axis if art is not None else None,
        art.origin if art is not None else None,
        indicator, t_o, r6, alpha,
    )


# ---------------------------------------------------------------------------
# Distance maps, relative orientation, penetration, attention
# ---------------------------------------------------------------------------

def distance_map(joints, points) -> torch.Tensor:
    """Pairwise Euclidean distances: joints (L,J,3) x points (L,N,3) -> (L,J,N)."""
    J = _as_tensor(joints)
    P = _as_tensor(points)
    if J.ndim != 3 or P.ndim != 3 or J.shape[0] != P.shape[0]:
        raise GeometryError(f"shape mismatch: joints {tuple(J.shape)} vs points {tuple(P.shape)}")
    diff = J[:, :, None, :] - P[:, None, :, :].to(J.dtype)
    return torch.sqrt((diff * diff).sum(-1).clamp_min(0))


def relative_orientation(R_hand, R_obj) -> torch.Tensor:
    """Hand orientation expressed in the object frame: R_obj^T R_hand."""
    Rh = _as_tensor(R_hand)
    Ro = _as_tensor(R_obj)
    _validate_rotation(Rh)
    _validate_rotation(Ro.to(Rh.dtype))
    return Ro.transpose(-1, -2).to(Rh.dtype) @ Rh


@dataclasses.dataclass
class PenetrationReport:
    indices: np.ndarray        # penetrating vertex ids
    depths: np.ndarray         # per-penetrating-vertex depth, meters
    nearest_points: np.ndarray  # (V, 3) nearest object point for every vertex
    signed: np.ndarray         # (V,) signed distance (negative inside)

    @property
    def max_depth(self) -> float:
        return float(self.depths.max()) if len(self.depths) else 0.0

    @property
    def mean_depth(self) -> float:
        return float(self.depths.mean()) if len(self.depths) else 0.0


def penetration_query(hand_vertices, object_points, object_normals) -> PenetrationReport:
    """Classify hand vertices as inside/outside the object surface sampling.

    A vertex penetrates iff (v - p*) . n(p*) < 0 where p* is its nearest
    object point and n the outward unit normal there.  Depth is the distance
    to p*.  Known failure mode near thin shells: the nearest-sample normal
    may not be the facing surface.
    """
    v = np.asarray(hand_vertices, dtype=np.float64)
    p = np.asarray(object_points, dtype=np.float64)
    n = np.asarray(object_normals, dtype=np.float64)
    if len(p) == 0:
        raise GeometryError("empty object point set")
    if v.ndim != 2 or v.shape[1] != 3:
        raise GeometryError(f"expected (V,3) vertices, got {v.shape}")
    tree = cKDTree(p)
    dist, idx = tree.query(v)
    signed = np.einsum("ij,ij->i", v - p[idx], n[idx])
    inside = signed < 0
    # boundary convention: depth 0 vertices are not listed
    inside &= dist > 0
    return PenetrationReport(
        indices=np.nonzero(inside)[0],
        depths=dist[inside],
        nearest_points=p[idx],
        signed=np.where(inside, -dist, dist),
    )


def attention_map(displacements) -> torch.Tensor:
    """Distance-based attention weights exp(-50 d) for per-axis absolute
    displacements to the nearest object point; values in (0, 1]."""
    D = _as_tensor(displacements)
    if not torch.isfinite(D).all():
        raise GeometryError("non-finite displacement input")
    if (D < 0).any():
        raise GeometryError("displacements must be non-negative magnitudes")
    return torch.exp(-50.0 * D)


def nearest_point_displacement(joints, points) -> torch.Tensor:
    """Per-axis absolute displacement (J,3) from each joint to its nearest
    object point (differentiable; the nearest index is detached)."""
    J = _as_tensor(joints)
    P = _as_tensor(points).to(J.dtype)
    d2 = ((J[:, None, :] - P[None, :, :]) ** 2).sum(-1)
    idx = d2.argmin(dim=1).detach()
    return (J - P[idx]).abs()
