"""Wavefront OBJ with the ``v x y z r g b`` vertex-color extension."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_obj(path, vertices: np.ndarray, faces: np.ndarray, colors: np.ndarray | None = None) -> None:
    """Write a triangle mesh; colors are RGB floats in [0, 1] per vertex."""
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    lines = []
    if colors is None:
        lines.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in vertices.tolist())
    else:
        colors = np.asarray(colors, dtype=float)
        if colors.shape != vertices.shape:
            raise ValueError("colors must be (N, 3) like the vertices")
        lines.extend(f"v {x!r} {y!r} {z!r} {r!r} {g!r} {b!r}"
                     for (x, y, z), (r, g, b) in zip(vertices.tolist(), colors.tolist()))
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Vertices, triangle faces (polygons fan-triangulated) and optional colors."""
    verts, cols, faces = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:
                    cols.append([float(x) for x in parts[4:7]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    v = np.asarray(verts, dtype=float).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise ValueError(f"{path}: face index out of range")
    c = np.asarray(cols, dtype=float) if cols and len(cols) == len(verts) else None
    return v, f, c
