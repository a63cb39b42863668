"""Mesh alignment, vertex-to-surface errors and error heatmaps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles (a, b, c) to points p; all (..., 3), broadcasting.

    Uses the Voronoi-region classification (vertex, edge and face regions).
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (p, a, b, c)))
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(p.shape[:-1], dtype=bool)

    def put(cond, value):
        nonlocal done
        sel = cond & ~done
        out[sel] = value[sel] if value.shape == out.shape else value
        done |= sel

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[..., None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[..., None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[..., None] * (c - b))
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        interior = a + v[..., None] * ab + w[..., None] * ac
    put(np.ones_like(done), interior)
    return out


def point_triangle_distance(p, a, b, c) -> np.ndarray:
    return np.linalg.norm(np.asarray(p) - closest_point_on_triangles(p, a, b, c), axis=-1)


def point_to_surface_bruteforce(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray,
                                chunk: int = 256) -> np.ndarray:
    """O(P * T) reference distances from points to the nearest triangle."""
    tri = vertices[faces]
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        q = points[s:s + chunk, None, :]
        d = point_triangle_distance(q, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        out[s:s + chunk] = d.min(axis=1)
    return out


class SurfaceQuery:
    """Exact nearest-surface distances accelerated by a k-d tree over triangles.

    Triangle ``t`` is represented by its centroid ``c_t`` and bounding radius
    ``R_t``. Any triangle closer than an upper bound ``u`` to a query point has
    ``|p - c_t| <= u + R_max``, so testing those candidates exactly is enough.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        self.vertices = np.asarray(vertices, dtype=float)
        self.faces = np.asarray(faces, dtype=np.int64)
        tri = self.vertices[self.faces]
        self.tri = tri
        self.centroids = tri.mean(axis=1)
        self.radius = np.linalg.norm(tri - self.centroids[:, None], axis=2).max()
        self.tree = cKDTree(self.centroids)

    def closest(self, points: np.ndarray, k: int = 8) -> tuple[np.ndarray, np.ndarray]:
        """Distances and closest surface points for (P, 3) queries."""
        points = np.asarray(points, dtype=float)
        k = min(k, len(self.centroids))
        _, near = self.tree.query(points, k=k)
        near = near.reshape(len(points), k)
        t = self.tri[near]
        cp = closest_point_on_triangles(points[:, None, :], t[:, :, 0], t[:, :, 1], t[:, :, 2])
        d = np.linalg.norm(cp - points[:, None, :], axis=2)
        best = d.argmin(axis=1)
        upper = d[np.arange(len(points)), best]
        closest = cp[np.arange(len(points)), best]
        cand = self.tree.query_ball_point(points, upper + self.radius + 1e-12)
        for i, c in enumerate(cand):
            if len(c) <= k:
                continue
            c = np.asarray(c)
            tt = self.tri[c]
            q = closest_point_on_triangles(points[i], tt[:, 0], tt[:, 1], tt[:, 2])
            dd = np.linalg.norm(q - points[i], axis=1)
            j = int(dd.argmin())
            if dd[j] < upper[i]:
                upper[i] = dd[j]
                closest[i] = q[j]
        return upper, closest


@dataclass
class ErrorReport:
    """Bidirectional vertex-to-surface statistics in millimeters."""

    mean_mm: float
    std_mm: float
    recon_to_gt: np.ndarray
    gt_to_recon: np.ndarray

    def formatted(self) -> str:
        return f"{self.mean_mm:.2f} ±{self.std_mm:.2f}"

    def to_dict(self) -> dict:
        return {"mean_mm": self.mean_mm, "std_mm": self.std_mm, "formatted": self.formatted(),
                "recon_to_gt_mean_mm": float(self.recon_to_gt.mean() * 1000),
                "gt_to_recon_mean_mm": float(self.gt_to_recon.mean() * 1000)}


def bidirectional_error(recon_vertices, recon_faces, gt_vertices, gt_faces) -> ErrorReport:
    """Mean and std (mm) over both directions of vertex-to-surface distances."""
    a = SurfaceQuery(gt_vertices, gt_faces).closest(np.asarray(recon_vertices, dtype=float))[0]
    b = SurfaceQuery(recon_vertices, recon_faces).closest(np.asarray(gt_vertices, dtype=float))[0]
    both = np.concatenate([a, b]) * 1000.0
    return ErrorReport(float(both.mean()), float(both.std()), a, b)


@dataclass
class Similarity:
    """``x -> scale * R x + t``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> Similarity:
        rt = self.rotation.T
        return Similarity(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def compose(self, other: Similarity) -> Similarity:
        """``self`` after ``other``."""
        return Similarity(self.scale * other.scale, self.rotation @ other.rotation,
                          self.scale * self.rotation @ other.translation + self.translation)

    @classmethod
    def identity(cls) -> Similarity:
        return cls(1.0, np.eye(3), np.zeros(3))


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Similarity:
    """Least-squares similarity mapping ``src`` onto ``dst`` (corresponding rows)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, s, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rot = u @ sign @ vt
    var = (xs * xs).sum() / len(src)
    scale = float(np.trace(np.diag(s) @ sign) / var) if with_scale else 1.0
    return Similarity(scale, rot, mu_d - scale * rot @ mu_s)


def align(recon_vertices, gt_vertices, gt_faces=None, iterations: int = 20) -> Similarity:
    """Similarity transform taking the reconstruction onto the ground truth.

    Same vertex count: closed-form Procrustes with scale. Otherwise an ICP
    refinement against the ground-truth surface, ``iterations`` rounds.
    """
    recon_vertices = np.asarray(recon_vertices, dtype=float)
    gt_vertices = np.asarray(gt_vertices, dtype=float)
    if len(recon_vertices) == len(gt_vertices):
        return umeyama(recon_vertices, gt_vertices)
    if gt_faces is None:
        raise ValueError("aligning meshes of different topology needs the ground-truth faces")
    query = SurfaceQuery(gt_vertices, gt_faces)
    transform = Similarity(1.0, np.eye(3), gt_vertices.mean(axis=0) - recon_vertices.mean(axis=0))
    for _ in range(iterations):
        moved = transform.apply(recon_vertices)
        _, target = query.closest(moved)
        transform = umeyama(recon_vertices, target)
    return transform


def error_heatmap(distances_m: np.ndarray, max_mm: float = 20.0) -> np.ndarray:
    """Linear blue (0 mm) to red (>= max_mm) per-vertex RGB in [0, 1]."""
    t = np.clip(np.asarray(distances_m, dtype=float) * 1000.0 / max_mm, 0.0, 1.0)
    return np.stack([t, np.zeros_like(t), 1.0 - t], axis=-1)
