"""Silhouette ray association and unposing into the canonical frame."""
from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import (EmptySilhouetteError, PinholeCamera, PluckerRay, ray_through_pixel,
                       rim_vertices, silhouette_boundary)
from .model import (DET_EPS, SingularTransformError, SkinnedModel, forward_kinematics,
                    pose_displacement, skin, vertex_transforms)

log = logging.getLogger(__name__)

TIE_EPS = 1e-12
DROP_REASONS = ("no_match", "singular")


@dataclass
class UnposeConfig:
    max_points: int | None = 1500
    d_max: float = 0.05
    rim_only: bool = False
    threads: int = 1
    subpixel: bool = True


@dataclass
class Association:
    """Rays matched to posed vertices; ``ray_index`` points into the input rays."""

    ray_index: np.ndarray
    vertex: np.ndarray
    distance: np.ndarray
    warning: str | None = None


def _line_distances_sq(vertices: np.ndarray, ray: PluckerRay) -> np.ndarray:
    # |v x n - m|^2 = |v|^2 - (v.n)^2 - 2 v.(n x m) + |m|^2 for unit n
    vn = vertices @ ray.direction.T
    vq = vertices @ np.cross(ray.direction, ray.moment).T
    out = (vertices * vertices).sum(axis=1)[:, None] - vn * vn - 2.0 * vq
    out += (ray.moment * ray.moment).sum(axis=1)[None, :]
    return out


def associate_rays(posed_vertices: np.ndarray, rays: PluckerRay, d_max: float = 0.05,
                   rim_only: bool = False, camera: PinholeCamera | None = None,
                   faces: np.ndarray | None = None, chunk: int = 2048) -> Association:
    """Match every ray to the posed vertex closest to its line.

    Matches farther than ``d_max`` are dropped. Distances within ``TIE_EPS`` of
    the minimum count as ties and go to the lowest vertex index. With
    ``rim_only`` only vertices on the model's own rim for ``camera`` compete.
    """
    posed_vertices = np.asarray(posed_vertices, dtype=float)
    n_rays = len(rays.direction)
    candidates = np.arange(len(posed_vertices))
    if rim_only:
        if camera is None or faces is None:
            raise ValueError("rim_only association needs the camera and the mesh faces")
        candidates = np.flatnonzero(rim_vertices(posed_vertices, faces, camera.center))
    verts = posed_vertices[candidates]
    best = np.empty(n_rays, dtype=np.int64)
    best_d = np.empty(n_rays)
    for s in range(0, n_rays, chunk):
        sub = rays[s:s + chunk]
        d2 = _line_distances_sq(verts, sub)
        lo = d2.min(axis=0)
        # exact re-check of everything that could tie with the minimum
        near = d2 <= lo[None, :] + 1e-9 + 1e-9 * np.abs(lo)[None, :]
        vi, ri = np.nonzero(near)
        exact = np.linalg.norm(np.cross(verts[vi], sub.direction[ri]) - sub.moment[ri], axis=1)
        dmin = np.full(len(sub.direction), np.inf)
        np.minimum.at(dmin, ri, exact)
        ok = exact <= dmin[ri] + TIE_EPS
        pick = np.full(len(sub.direction), np.iinfo(np.int64).max)
        np.minimum.at(pick, ri[ok], vi[ok])
        best[s:s + chunk] = candidates[pick]
        best_d[s:s + chunk] = dmin
    keep = best_d <= d_max
    warning = None
    if n_rays and keep.sum() < 0.5 * n_rays:
        warning = f"pose mismatch: only {keep.sum()} of {n_rays} rays within {d_max} m"
    idx = np.flatnonzero(keep)
    return Association(idx, best[idx], best_d[idx], warning)


def _map_rays(transforms: np.ndarray, shift: np.ndarray, rays: PluckerRay) -> PluckerRay:
    """Map lines through inverse affine transforms by two-point reconstruction."""
    p0 = rays.closest_point_to_origin()
    p1 = p0 + rays.direction
    inv = np.linalg.inv(transforms)
    q0 = np.einsum("nab,nb->na", inv[:, :3, :3], p0) + inv[:, :3, 3] - shift
    q1 = np.einsum("nab,nb->na", inv[:, :3, :3], p1) + inv[:, :3, 3] - shift
    return PluckerRay.from_points(q0, q1)


def unpose_ray(model: SkinnedModel, beta: np.ndarray, theta: np.ndarray, vertex_index: int,
               ray: PluckerRay, eps: float = DET_EPS) -> PluckerRay:
    """Carry a posed ray into the canonical frame through vertex ``vertex_index``.

    Raises:
        SingularTransformError: if the vertex's blended transform is not invertible.
    """
    fk = forward_kinematics(model, beta, theta)
    a = np.einsum("k,kab->ab", model.weights[vertex_index], fk.matrices)
    det = np.linalg.det(a[:3, :3])
    if abs(det) < eps:
        raise SingularTransformError(f"vertex {vertex_index}: determinant {det:.3g}")
    shift = pose_displacement(model, theta)[vertex_index]
    out = _map_rays(a[None], shift[None], PluckerRay(ray.direction[None], ray.moment[None]))
    return out[0]


def unpose_rays(model: SkinnedModel, beta: np.ndarray, theta: np.ndarray, vertices: np.ndarray,
                rays: PluckerRay, eps: float = DET_EPS) -> tuple[PluckerRay, np.ndarray]:
    """Batched :func:`unpose_ray`; returns the unposed rays and a validity mask."""
    a = vertex_transforms(model, beta, theta)[vertices]
    det = np.linalg.det(a[:, :3, :3])
    ok = np.abs(det) >= eps
    shift = pose_displacement(model, theta)[vertices]
    out = PluckerRay(np.full((len(vertices), 3), np.nan), np.full((len(vertices), 3), np.nan))
    if ok.any():
        mapped = _map_rays(a[ok], shift[ok], rays[ok])
        out.direction[ok] = mapped.direction
        out.moment[ok] = mapped.moment
    return out, ok


@dataclass
class UnposedCloud:
    """Fused correspondences from all frames (a multiset, in frame order).

    Attributes:
        frame, vertex: (M,) frame and vertex index per correspondence.
        direction, moment: (M, 3) unposed Plücker rays.
        orig_direction, orig_moment: (M, 3) rays as cast in the frame.
        distance: (M,) association distance in meters.
        counts: (F,) surviving correspondences per frame.
        cast: (F,) rays cast per frame.
        drops: per-reason drop counts.
        skipped: frames without a usable silhouette.
        warnings: per-frame warnings.
    """

    frame: np.ndarray
    vertex: np.ndarray
    direction: np.ndarray
    moment: np.ndarray
    orig_direction: np.ndarray
    orig_moment: np.ndarray
    distance: np.ndarray
    counts: np.ndarray
    cast: np.ndarray
    drops: dict[str, int] = field(default_factory=lambda: {r: 0 for r in DROP_REASONS})
    skipped: list[int] = field(default_factory=list)
    warnings: dict[int, str] = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.counts)

    def __len__(self) -> int:
        return len(self.vertex)

    @property
    def rays(self) -> PluckerRay:
        return PluckerRay(self.direction, self.moment)

    def summary(self) -> dict:
        return {"frames": self.n_frames, "correspondences": len(self), "cast": int(self.cast.sum()),
                "drops": dict(self.drops), "skipped": list(self.skipped),
                "warnings": {str(k): v for k, v in self.warnings.items()}}


def contour_normals(mask: np.ndarray, pixels: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Unit outward normals (u, v) of the silhouette at integer boundary pixels."""
    smooth = ndimage.gaussian_filter(np.asarray(mask, dtype=float), sigma)
    gv, gu = np.gradient(smooth)
    g = -np.stack([gu[pixels[:, 1], pixels[:, 0]], gv[pixels[:, 1], pixels[:, 0]]], axis=1)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    return np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)


def frame_rays(mask: np.ndarray, camera: PinholeCamera, max_points: int | None = 1500,
               subpixel: bool = True) -> PluckerRay:
    """Rays through the (subsampled) silhouette boundary of a mask.

    Boundary pixel centers lie on average half a pixel inside the true
    contour; with ``subpixel`` each ray is moved that half pixel outward
    along the contour normal.
    """
    pix = silhouette_boundary(mask, max_points)
    pts = pix.astype(float)
    if subpixel:
        pts = pts + 0.5 * contour_normals(mask, pix)
    return ray_through_pixel(camera, pts)


@dataclass
class _FrameResult:
    vertex: np.ndarray
    direction: np.ndarray
    moment: np.ndarray
    orig_direction: np.ndarray
    orig_moment: np.ndarray
    distance: np.ndarray
    cast: int
    drops: dict
    warning: str | None


def unpose_frame(model: SkinnedModel, beta: np.ndarray, theta: np.ndarray, rays: PluckerRay,
                 config: UnposeConfig, offsets: np.ndarray | None = None,
                 camera: PinholeCamera | None = None) -> _FrameResult:
    """Associate one frame's rays to the posed model and unpose the survivors."""
    posed = skin(model, beta, theta, offsets)
    assoc = associate_rays(posed, rays, config.d_max, config.rim_only, camera, model.faces)
    matched = rays[assoc.ray_index]
    unposed, ok = unpose_rays(model, beta, theta, assoc.vertex, matched)
    drops = {"no_match": len(rays.direction) - len(assoc.vertex), "singular": int((~ok).sum())}
    return _FrameResult(assoc.vertex[ok], unposed.direction[ok], unposed.moment[ok],
                        matched.direction[ok], matched.moment[ok], assoc.distance[ok],
                        len(rays.direction), drops, assoc.warning)


def build_unposed_cloud(model: SkinnedModel, beta: np.ndarray, poses, masks=None, cameras=None,
                        config: UnposeConfig | None = None, offsets: np.ndarray | None = None,
                        rays: list | None = None) -> UnposedCloud:
    """Unpose the silhouette cones of all frames into one correspondence set.

    Either ``masks`` (boundary rays are extracted) or precomputed per-frame
    ``rays`` must be given. Frames with empty silhouettes are skipped.

    Raises:
        EmptySilhouetteError: if every frame is skipped.
    """
    config = config or UnposeConfig()
    n = len(poses)
    if cameras is None or len(cameras) != n or (rays is None and (masks is None or len(masks) != n)):
        raise ValueError("poses, masks and cameras must have equal lengths")
    if n < 1:
        raise ValueError("need at least one frame")

    def work(f):
        try:
            fr = rays[f] if rays is not None else frame_rays(masks[f], cameras[f], config.max_points, config.subpixel)
        except EmptySilhouetteError:
            return None
        if fr is None or len(fr.direction) == 0:
            return None
        return unpose_frame(model, beta, poses[f], fr, config, offsets, cameras[f])

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(work, range(n)))
    else:
        results = [work(f) for f in range(n)]
    skipped = [f for f, r in enumerate(results) if r is None]
    if len(skipped) == n:
        raise EmptySilhouetteError("all frames have empty silhouettes")
    parts = {k: [] for k in ("frame", "vertex", "direction", "moment", "orig_direction", "orig_moment", "distance")}
    counts = np.zeros(n, dtype=np.int64)
    cast = np.zeros(n, dtype=np.int64)
    drops = {r: 0 for r in DROP_REASONS}
    warns = {}
    for f, r in enumerate(results):
        if r is None:
            warns[f] = "empty silhouette, frame skipped"
            continue
        counts[f] = len(r.vertex)
        cast[f] = r.cast
        for key in drops:
            drops[key] += r.drops[key]
        if r.warning:
            warns[f] = r.warning
            log.warning("frame %d: %s", f, r.warning)
        parts["frame"].append(np.full(len(r.vertex), f, dtype=np.int64))
        for key in ("vertex", "direction", "moment", "orig_direction", "orig_moment", "distance"):
            parts[key].append(getattr(r, key))
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    return UnposedCloud(cat["frame"], cat["vertex"], cat["direction"], cat["moment"], cat["orig_direction"],
                        cat["orig_moment"], cat["distance"], counts, cast, drops, skipped, warns)


# ---------------------------------------------------------------------------
# binary sidecar
#
# header  : b"UPCL" | u32 version | u32 F | u64 M | u64 drops[no_match] | u64 drops[singular]
# per frame: u64 count | u64 cast
# records : u32 frame | u32 vertex | f64 dir[3] | f64 moment[3] | f64 orig_dir[3] | f64 orig_moment[3] | f64 dist

_RECORD = np.dtype([("frame", "<u4"), ("vertex", "<u4"), ("direction", "<f8", 3), ("moment", "<f8", 3),
                    ("orig_direction", "<f8", 3), ("orig_moment", "<f8", 3), ("distance", "<f8")])
_HEADER = struct.Struct("<4sIIQQQ")


def save_cloud(cloud: UnposedCloud, path) -> None:
    rec = np.zeros(len(cloud), dtype=_RECORD)
    for key in ("frame", "vertex", "direction", "moment", "orig_direction", "orig_moment", "distance"):
        rec[key] = getattr(cloud, key)
    per = np.stack([cloud.counts, cloud.cast], axis=1).astype("<u8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"UPCL", 1, cloud.n_frames, len(cloud), cloud.drops["no_match"], cloud.drops["singular"]))
        fh.write(per.tobytes())
        fh.write(rec.tobytes())


def load_cloud(path) -> UnposedCloud:
    data = Path(path).read_bytes()
    magic, version, n_frames, m, no_match, singular = _HEADER.unpack_from(data, 0)
    if magic != b"UPCL" or version != 1:
        raise ValueError(f"{path}: not an unposed-cloud file")
    off = _HEADER.size
    per = np.frombuffer(data, dtype="<u8", count=2 * n_frames, offset=off).reshape(n_frames, 2)
    off += per.nbytes
    rec = np.frombuffer(data, dtype=_RECORD, count=m, offset=off)
    return UnposedCloud(rec["frame"].astype(np.int64), rec["vertex"].astype(np.int64), rec["direction"].copy(),
                        rec["moment"].copy(), rec["orig_direction"].copy(), rec["orig_moment"].copy(),
                        rec["distance"].copy(), per[:, 0].astype(np.int64), per[:, 1].astype(np.int64),
                        {"no_match": int(no_match), "singular": int(singular)},
                        [f for f in range(n_frames) if per[f, 1] == 0])
