"""Triangle-mesh import (OBJ / PLY) and the articulation sidecar format.

The articulation sidecar lives next to the mesh as ``<mesh>.articulation.json``
with fields {axis:[3], origin:[3], part_vertex_ids:[...], enabled:bool}.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class MeshFormatError(ValueError):
    pass


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    vertices, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: malformed vertex line")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                if len(idx) < 3:
                    raise MeshFormatError(f"{path}:{lineno}: face with <3 vertices")
                for k in range(1, len(idx) - 1):  # fan-triangulate
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not vertices:
        raise MeshFormatError(f"{path}: no vertices found")
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def save_obj(path, vertices, faces=None):
    with open(path, "w") as fh:
        for v in np.asarray(vertices):
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        if faces is not None:
            for f in np.asarray(faces, dtype=np.int64):
                fh.write(f"f {f[0]+1} {f[1]+1} {f[2]+1}\n")


def load_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """ASCII PLY loader (vertex x/y/z properties + face vertex_indices)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MeshFormatError(f"{path}: only ASCII PLY is supported") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError(f"{path}: missing ply magic")
    n_vert = n_face = 0
    vert_props = []
    current = None
    body_at = None
    for i, line in enumerate(lines[1:], 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise MeshFormatError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vert_props.append(parts[-1])
        elif parts[0] == "end_header":
            body_at = i + 1
            break
    if body_at is None:
        raise MeshFormatError(f"{path}: unterminated header")
    try:
        xi, yi, zi = vert_props.index("x"), vert_props.index("y"), vert_props.index("z")
    except ValueError as exc:
        raise MeshFormatError(f"{path}: vertex element lacks x/y/z") from exc
    body = [ln.split() for ln in lines[body_at:] if ln.strip()]
    if len(body) < n_vert + n_face:
        raise MeshFormatError(f"{path}: truncated body")
    verts = np.array([[float(row[xi]), float(row[yi]), float(row[zi])]
                      for row in body[:n_vert]], dtype=np.float64)
    faces = []
    for row in body[n_vert:n_vert + n_face]:
        k = int(row[0])
        idx = [int(tok) for tok in row[1:1 + k]]
        for j in range(1, k - 1):
            faces.append([idx[0], idx[j], idx[j + 1]])
    return verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def load_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise MeshFormatError(f"unsupported mesh format: {path.suffix}")


def articulation_sidecar_path(mesh_path) -> Path:
    p = Path(mesh_path)
    return p.with_name(p.name + ".articulation.json")


def load_articulation_sidecar(mesh_path) -> dict | None:
    sidecar = articulation_sidecar_path(mesh_path)
    if not sidecar.exists():
        return None
    with open(sidecar) as fh:
        data = json.load(fh)
    for key in ("axis", "origin", "part_vertex_ids"):
        if key not in data:
            raise MeshFormatError(f"{sidecar}: missing field '{key}'")
    data.setdefault("enabled", True)
    return data


def save_articulation_sidecar(mesh_path, axis, origin, part_vertex_ids, enabled=True):
    sidecar = articulation_sidecar_path(mesh_path)
    with open(sidecar, "w") as fh:
        json.dump({
            "axis": list(map(float, axis)),
            "origin": list(map(float, origin)),
            "part_vertex_ids": [int(i) for i in part_vertex_ids],
            "enabled": bool(enabled),
        }, fh)
    return sidecar
