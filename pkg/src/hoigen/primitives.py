"""Procedural primitive meshes used by the synthetic data generator and tests."""

from __future__ import annotations

import numpy as np

PRIMITIVES = ("sphere", "box", "cylinder", "articulated-box")


def sphere_mesh(radius: float = 0.05, subdiv: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """UV sphere centered at the origin."""
    us = np.linspace(0.0, 2 * np.pi, subdiv, endpoint=False)
    vs = np.linspace(0.0, np.pi, subdiv + 1)[1:-1]
    verts = [(0.0, 0.0, radius)]
    for v in vs:
        for u in us:
            verts.append((radius * np.sin(v) * np.cos(u),
                          radius * np.sin(v) * np.sin(u),
                          radius * np.cos(v)))
    verts.append((0.0, 0.0, -radius))
    verts = np.asarray(verts, dtype=np.float64)
    faces = []
    ring = lambda r, i: 1 + r * subdiv + (i % subdiv)
    for i in range(subdiv):  # top cap
        faces.append([0, ring(0, i), ring(0, i + 1)])
    for r in range(len(vs) - 1):
        for i in range(subdiv):
            a, b = ring(r, i), ring(r, i + 1)
            c, d = ring(r + 1, i), ring(r + 1, i + 1)
            faces.append([a, c, d])
            faces.append([a, d, b])
    bottom = len(verts) - 1
    for i in range(subdiv):
        faces.append([bottom, ring(len(vs) - 1, i + 1), ring(len(vs) - 1, i)])
    return verts, np.asarray(faces, dtype=np.int64)


def box_mesh(size=(0.08, 0.06, 0.1), grid: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box centered at the origin with gridded faces."""
    sx, sy, sz = size
    verts = []
    faces = []
    lin = np.linspace(-0.5, 0.5, grid + 1)

    def add_face(origin, du, dv):
        base = len(verts)
        for i in lin:
            for j in lin:
                verts.append(origin + du * i + dv * j)
        n = grid + 1
        for i in range(grid):
            for j in range(grid):
                a = base + i * n + j
                faces.append([a, a + n, a + n + 1])
                faces.append([a, a + n + 1, a + 1])

    ex = np.array([sx, 0, 0.0])
    ey = np.array([0, sy, 0.0])
    ez = np.array([0, 0, sz])
    add_face(np.array([sx / 2, 0, 0.0]), ey, ez)    # +x
    add_face(np.array([-sx / 2, 0, 0.0]), ez, ey)   # -x
    add_face(np.array([0, sy / 2, 0.0]), ez, ex)    # +y
    add_face(np.array([0, -sy / 2, 0.0]), ex, ez)   # -y
    add_face(np.array([0, 0, sz / 2]), ex, ey)      # +z
    add_face(np.array([0, 0, -sz / 2]), ey, ex)     # -z
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    # merge duplicated edge/corner vertices so vertex normals average across
    # the adjoining faces
    keys = np.round(verts / 1e-9).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return verts[first[order]], rank[inverse[faces]]


def cylinder_mesh(radius: float = 0.03, height: float = 0.12,
                  segments: int = 24, rings: int = 8) -> tuple[np.ndarray, np.ndarray]:
    us = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    zs = np.linspace(-height / 2, height / 2, rings + 1)
    verts = []
    for z in zs:
        for u in us:
            verts.append((radius * np.cos(u), radius * np.sin(u), z))
    top = len(verts)
    verts.append((0.0, 0.0, height / 2))
    bottom = len(verts)
    verts.append((0.0, 0.0, -height / 2))
    faces = []
    for r in range(rings):
        for i in range(segments):
            a = r * segments + i
            b = r * segments + (i + 1) % segments
            c, d = a + segments, b + segments
            faces.append([a, d, c])
            faces.append([a, b, d])
    last = rings * segments
    for i in range(segments):
        faces.append([top, last + i, last + (i + 1) % segments])
        faces.append([bottom, (i + 1) % segments, i])
    return np.asarray(np.asarray(verts, dtype=np.float64)), np.asarray(faces, dtype=np.int64)


def articulated_box_mesh(size=(0.1, 0.08, 0.06), grid: int = 5):
    """Box whose upper half is a 'lid' hinged on an edge-aligned y axis.

    Returns (vertices, faces, articulation_dict) where the articulation dict
    matches the sidecar schema.
    """
    verts, faces = box_mesh(size, grid=grid)
    lid_ids = np.nonzero(verts[:, 2] > 1e-9)[0]
    articulation = {
        "axis": [0.0, 1.0, 0.0],
        "origin": [-size[0] / 2, 0.0, 0.0],
        "part_vertex_ids": [int(i) for i in lid_ids],
        "enabled": True,
    }
    return verts, faces, articulation


def primitive_mesh(name: str, scale: float = 1.0):
    """Build a named primitive; returns (vertices, faces, articulation-or-None)."""
    if name == "sphere":
        v, f = sphere_mesh(radius=0.05 * scale)
        return v, f, None
    if name == "box":
        v, f = box_mesh(size=(0.08 * scale, 0.06 * scale, 0.1 * scale))
        return v, f, None
    if name == "cylinder":
        v, f = cylinder_mesh(radius=0.03 * scale, height=0.12 * scale)
        return v, f, None
    if name == "articulated-box":
        return articulated_box_mesh(size=(0.1 * scale, 0.08 * scale, 0.06 * scale))
    raise ValueError(f"unknown primitive '{name}'; expected one of {PRIMITIVES}")
