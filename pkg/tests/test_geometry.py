import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hoigen import geometry, primitives
from hoigen.geometry import (
    DegenerateRotationError,
    GeometryError,
    attention_map,
    axis_angle_matrix,
    canonicalize_object,
    deform_point_cloud,
    distance_map,
    farthest_point_sample,
    matrix_to_rot6d,
    mesh_vertex_normals,
    nearest_point_displacement,
    penetration_query,
    random_rotations,
    relative_orientation,
    rot6d_to_matrix,
)


# ---------------------------------------------------------------------------
# 6D rotations
# ---------------------------------------------------------------------------

def test_rot6d_roundtrip_1000_random():
    rng = np.random.default_rng(0)
    R = torch.as_tensor(random_rotations(1000, rng))
    back = rot6d_to_matrix(matrix_to_rot6d(R))
    assert (back - R).abs().max().item() < 1e-6


def test_rot6d_identity():
    r6 = torch.tensor([1.0, 0, 0, 0, 1.0, 0])
    R = rot6d_to_matrix(r6)
    assert torch.allclose(R, torch.eye(3, dtype=R.dtype))


def test_rot6d_decode_is_orthonormal_for_generic_input():
    rng = np.random.default_rng(1)
    r6 = torch.as_tensor(rng.standard_normal((200, 6)))
    R = rot6d_to_matrix(r6)
    eye = torch.eye(3, dtype=R.dtype)
    assert ((R.transpose(-1, -2) @ R) - eye).abs().max() < 1e-9
    assert torch.allclose(torch.det(R), torch.ones(200, dtype=R.dtype))


def test_rot6d_degenerate_inputs_raise():
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix(torch.zeros(6))
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix(torch.tensor([1.0, 0, 0, 2.0, 0, 0]))  # parallel columns
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix(torch.tensor([float("nan")] * 6))


def test_matrix_to_rot6d_rejects_non_rotation():
    with pytest.raises(GeometryError):
        matrix_to_rot6d(2 * torch.eye(3))
    with pytest.raises(GeometryError):
        matrix_to_rot6d(torch.diag(torch.tensor([-1.0, 1.0, 1.0])))  # reflection


def test_rot6d_decode_gradients_flow():
    r6 = torch.randn(6, dtype=torch.float64, requires_grad=True)
    R = rot6d_to_matrix(r6)
    R.sum().backward()
    assert r6.grad is not None and torch.isfinite(r6.grad).all()


# ---------------------------------------------------------------------------
# Farthest point sampling (brute-force oracle)
# ---------------------------------------------------------------------------

def fps_oracle(points, n):
    pts = np.asarray(points, dtype=np.float64)
    centroid = pts.mean(axis=0)
    d0 = np.linalg.norm(pts - centroid, axis=1)
    start = int(np.argmax(d0))
    chosen = [start]
    for _ in range(n - 1):
        best_i, best_d = None, -1.0
        for i in range(len(pts)):
            d = min(float(np.linalg.norm(pts[i] - pts[j])) for j in chosen)
            if d > best_d:
                best_i, best_d = i, d
        chosen.append(best_i)
    return np.asarray(chosen)


def test_fps_matches_bruteforce_oracle_200_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = int(rng.integers(2, 65))
        n = int(rng.integers(1, m + 1))
        pts = rng.standard_normal((m, 3))
        assert np.array_equal(farthest_point_sample(pts, n), fps_oracle(pts, n))


def test_fps_collinear_tiebreak():
    # points at x = 0,1,2,3: centroid 1.5, tie between 0 and 3 -> lowest index
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    idx = farthest_point_sample(pts, 2)
    assert idx.tolist() == [0, 3]


def test_fps_replacement_cycles_order():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    base = farthest_point_sample(pts, 3)
    padded = farthest_point_sample(pts, 7, allow_replacement=True)
    assert np.array_equal(padded, np.tile(base, 3)[:7])


def test_fps_errors():
    pts = np.zeros((3, 3))
    with pytest.raises(GeometryError):
        farthest_point_sample(pts, 5)
    with pytest.raises(GeometryError):
        farthest_point_sample(np.zeros((0, 3)), 1)
    with pytest.raises(GeometryError):
        farthest_point_sample(pts, 0)


# ---------------------------------------------------------------------------
# Canonicalization
# ---------------------------------------------------------------------------

def test_canonicalize_scale_and_normalization():
    verts, faces = primitives.sphere_mesh(radius=0.07)
    spec = canonicalize_object(verts, faces, n=64)
    assert spec.scale == pytest.approx(0.07, rel=1e-6)
    assert np.linalg.norm(spec.points_norm, axis=1).max() == pytest.approx(1.0, rel=1e-6)
    assert spec.points.shape == (64, 3)
    assert np.allclose(spec.points, verts[spec.point_indices])


def test_canonicalize_degenerate_mesh_raises():
    with pytest.raises(GeometryError):
        canonicalize_object(np.zeros((5, 3)))
    with pytest.raises(GeometryError):
        canonicalize_object(np.zeros((0, 3)))


def test_sphere_normals_point_outward():
    verts, faces = primitives.sphere_mesh(radius=0.05)
    spec = canonicalize_object(verts, faces, n=128)
    radial = spec.points / np.linalg.norm(spec.points, axis=1, keepdims=True)
    cos = np.einsum("ij,ij->i", spec.normals, radial)
    assert cos.min() > 0.9


def test_cylinder_normals_point_outward():
    verts, faces = primitives.cylinder_mesh()
    normals = mesh_vertex_normals(verts, faces)
    side = np.abs(verts[:, 2]) < 0.059
    side &= np.linalg.norm(verts[:, :2], axis=1) > 1e-6
    radial = np.zeros_like(verts)
    radial[:, :2] = verts[:, :2]
    radial = radial[side] / np.linalg.norm(radial[side], axis=1, keepdims=True)
    assert np.einsum("ij,ij->i", normals[side], radial).min() > 0.5


# ---------------------------------------------------------------------------
# Deformation
# ---------------------------------------------------------------------------

def test_deform_rigid_alpha_independent():
    verts, faces = primitives.box_mesh()
    spec = canonicalize_object(verts, faces, n=32)
    r6 = matrix_to_rot6d(torch.as_tensor(random_rotations(1, np.random.default_rng(0))[0]))
    t = torch.tensor([0.1, -0.2, 0.3], dtype=torch.float64)
    outs = [deform_point_cloud(spec, t, r6, a).numpy() for a in (0.0, 1.0, np.pi)]
    assert np.array_equal(outs[0], outs[1])
    assert np.array_equal(outs[0], outs[2])


def test_deform_articulated_moves_only_labeled_points():
    verts, faces, art = primitives.articulated_box_mesh()
    spec = canonicalize_object(verts, faces, n=64, articulation=art)
    ident = torch.tensor([1.0, 0, 0, 0, 1.0, 0], dtype=torch.float64)
    base = deform_point_cloud(spec, torch.zeros(3), ident, 0.0).numpy()
    opened = deform_point_cloud(spec, torch.zeros(3), ident, 0.7).numpy()
    moved = np.linalg.norm(base - opened, axis=1) > 1e-12
    assert np.array_equal(moved, spec.articulation.part_labels)
    assert moved.any() and not moved.all()


def test_deform_matches_manual_rigid_transform():
    verts, faces = primitives.sphere_mesh()
    spec = canonicalize_object(verts, faces, n=16)
    R = random_rotations(1, np.random.default_rng(3))[0]
    t = np.array([0.05, 0.02, -0.01])
    out = deform_point_cloud(spec, torch.as_tensor(t),
                             matrix_to_rot6d(torch.as_tensor(R)), 0.0).numpy()
    assert np.allclose(out, spec.points @ R.T + t, atol=1e-12)


def test_axis_angle_matrix_quarter_turn():
    R = axis_angle_matrix(torch.tensor([0.0, 0, 1.0]), torch.tensor(np.pi / 2))
    assert torch.allclose(R @ torch.tensor([1.0, 0, 0]), torch.tensor([0.0, 1.0, 0]),
                          atol=1e-12)


# ---------------------------------------------------------------------------
# Distance map
# ---------------------------------------------------------------------------

def test_distance_map_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    J = rng.standard_normal((4, 5, 3))
    P = rng.standard_normal((4, 7, 3))
    out = distance_map(J, P).numpy()
    oracle = np.zeros((4, 5, 7))
    for l in range(4):
        for j in range(5):
            for n in range(7):
                oracle[l, j, n] = np.linalg.norm(J[l, j] - P[l, n])
    assert np.abs(out - oracle).max() < 1e-9


def test_distance_map_shape_mismatch_raises():
    with pytest.raises(GeometryError):
        distance_map(np.zeros((2, 5, 3)), np.zeros((3, 7, 3)))


def test_distance_map_differentiable():
    J = torch.randn(2, 4, 3, dtype=torch.float64, requires_grad=True)
    P = torch.randn(2, 6, 3, dtype=torch.float64)
    distance_map(J, P).sum().backward()
    assert torch.isfinite(J.grad).all()


# ---------------------------------------------------------------------------
# Relative orientation
# ---------------------------------------------------------------------------

def test_relative_orientation_identity_and_closed_form():
    R = torch.as_tensor(random_rotations(1, np.random.default_rng(0))[0])
    assert torch.allclose(relative_orientation(R, R), torch.eye(3, dtype=R.dtype),
                          atol=1e-12)
    Rz = torch.as_tensor(axis_angle_matrix(torch.tensor([0.0, 0, 1.0]),
                                           torch.tensor(np.pi / 2)), dtype=torch.float64)
    assert torch.allclose(relative_orientation(Rz, torch.eye(3, dtype=torch.float64)), Rz,
                          atol=1e-12)


def test_relative_orientation_global_invariance():
    rng = np.random.default_rng(1)
    Rh = torch.as_tensor(random_rotations(50, rng))
    Ro = torch.as_tensor(random_rotations(50, rng))
    G = torch.as_tensor(random_rotations(1, rng)[0])
    a = relative_orientation(Rh, Ro)
    b = relative_orientation(G @ Rh, G @ Ro)
    assert (a - b).abs().max() < 1e-9


# ---------------------------------------------------------------------------
# Penetration
# ---------------------------------------------------------------------------

def sphere_sampling(n=2048, r=0.05, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r, v


def test_penetration_sphere_oracle_agreement():
    r = 0.05
    pts, normals = sphere_sampling()
    rng = np.random.default_rng(1)
    q = rng.uniform(-2 * r, 2 * r, size=(10000, 3))
    rep = penetration_query(q, pts, normals)
    flagged = np.zeros(len(q), dtype=bool)
    flagged[rep.indices] = True
    truth = np.linalg.norm(q, axis=1) < r
    agreement = (flagged == truth).mean()
    assert agreement >= 0.99
    # disagreements stay near the surface (one sampling-resolution band)
    band = 2 * np.sqrt(4 * np.pi * r * r / len(pts))
    dis = flagged != truth
    assert np.all(np.abs(np.linalg.norm(q[dis], axis=1) - r) < band + 1e-9)


def test_penetration_box_oracle_agreement():
    verts, faces = primitives.box_mesh(grid=16)
    normals = mesh_vertex_normals(verts, faces)
    sx, sy, sz = 0.08, 0.06, 0.1
    rng = np.random.default_rng(2)
    q = rng.uniform(-0.1, 0.1, size=(10000, 3))
    rep = penetration_query(q, verts, normals)
    flagged = np.zeros(len(q), dtype=bool)
    flagged[rep.indices] = True
    truth = ((np.abs(q[:, 0]) < sx / 2) & (np.abs(q[:, 1]) < sy / 2)
             & (np.abs(q[:, 2]) < sz / 2))
    assert (flagged == truth).mean() >= 0.99


def test_penetration_examples():
    pts, normals = sphere_sampling()
    rep = penetration_query(np.array([[0.2, 0, 0]]), pts, normals)
    assert len(rep.indices) == 0
    rep = penetration_query(np.array([[0.0, 0, 0]]), pts, normals)
    assert rep.indices.tolist() == [0]
    assert rep.depths[0] == pytest.approx(0.05, rel=1e-6)
    # vertex exactly on a sampled point: depth 0, not listed
    rep = penetration_query(pts[:1], pts, normals)
    assert len(rep.indices) == 0


def test_penetration_empty_points_raises():
    with pytest.raises(GeometryError):
        penetration_query(np.zeros((1, 3)), np.zeros((0, 3)), np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# Attention map
# ---------------------------------------------------------------------------

def test_attention_map_closed_forms():
    assert attention_map(torch.zeros(2, 3)).max() == 1.0
    val = attention_map(torch.full((1, 3), 0.02))
    assert torch.allclose(val, torch.full((1, 3), np.exp(-1.0), dtype=val.dtype))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3),
       st.floats(0, 0.5))
def test_attention_map_monotone(d, bump):
    d1 = torch.tensor([d], dtype=torch.float64)
    d2 = d1 + bump
    assert (attention_map(d1) >= attention_map(d2)).all()


def test_attention_map_negative_raises():
    with pytest.raises(GeometryError):
        attention_map(torch.tensor([[-0.1, 0.0, 0.0]]))
    with pytest.raises(GeometryError):
        attention_map(torch.tensor([[float("inf"), 0.0, 0.0]]))


def test_nearest_point_displacement_differentiable():
    J = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    P = torch.randn(30, 3, dtype=torch.float64)
    out = nearest_point_displacement(J, P)
    assert out.shape == (5, 3)
    out.sum().backward()
    assert torch.isfinite(J.grad).all()
