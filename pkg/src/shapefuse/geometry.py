"""Cameras, Plücker rays, masks, rasterization and mesh Laplacians."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage


class EmptySilhouetteError(ValueError):
    """A mask or rendering has no foreground pixels."""


class IsolatedVertexWarning(UserWarning):
    """Vertices not referenced by any face."""


# ---------------------------------------------------------------------------
# rays


@dataclass
class PluckerRay:
    """Oriented 3D lines ``(direction, moment)``; arrays may be batched (..., 3).

    The moment is ``p x direction`` for any point ``p`` on the line.
    """

    direction: np.ndarray
    moment: np.ndarray

    @classmethod
    def from_points(cls, p0, p1) -> PluckerRay:
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        d = p1 - p0
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return cls(d, np.cross(p0, d))

    @classmethod
    def from_point_direction(cls, point, direction) -> PluckerRay:
        point = np.asarray(point, dtype=float)
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return cls(d, np.cross(point, d))

    def closest_point_to_origin(self) -> np.ndarray:
        return np.cross(self.direction, self.moment)

    def __len__(self) -> int:
        return 1 if self.direction.ndim == 1 else self.direction.shape[0]

    def __getitem__(self, idx) -> PluckerRay:
        return PluckerRay(self.direction[idx], self.moment[idx])

    def transform(self, rot: np.ndarray, trans: np.ndarray) -> PluckerRay:
        """Apply the rigid map ``x -> R x + t``."""
        d = self.direction @ np.asarray(rot).T
        m = self.moment @ np.asarray(rot).T + np.cross(trans, d)
        return PluckerRay(d, m)


def point_line_distance(ray: PluckerRay, point: np.ndarray) -> np.ndarray:
    """Distance ``|p x n - m|`` between points and unit-direction lines (broadcasts)."""
    point = np.asarray(point, dtype=float)
    return np.linalg.norm(np.cross(point, ray.direction) - ray.moment, axis=-1)


# ---------------------------------------------------------------------------
# camera


@dataclass
class PinholeCamera:
    """Pinhole camera with world-to-camera extrinsics ``x_c = R x_w + t``.

    Pixel ``(u, v)`` has its center at integer coordinates; ``v`` grows
    downwards (camera y axis points down, z forward).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, focal: float, width: int, height: int,
                up=(0.0, 1.0, 0.0)) -> PinholeCamera:
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        y = -np.asarray(up, dtype=float)
        y = y - (y @ z) * z
        y /= np.linalg.norm(y)
        x = np.cross(y, z)
        rot = np.stack([x, y, z])
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, rot, -rot @ eye, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (..., 2) and camera depths (...,)."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        uv = np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def project_jacobian(self, points: np.ndarray) -> np.ndarray:
        """(..., 2, 3) derivative of pixel coordinates w.r.t. world points."""
        pc = self.to_camera(points)
        x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
        j = np.zeros(pc.shape[:-1] + (2, 3))
        j[..., 0, 0] = self.fx / z
        j[..., 0, 2] = -self.fx * x / z**2
        j[..., 1, 1] = self.fy / z
        j[..., 1, 2] = -self.fy * y / z**2
        return j @ self.R

    def scaled(self, factor: float) -> PinholeCamera:
        """Camera for an image resampled by ``factor`` (pixel centers preserved)."""
        return PinholeCamera(self.fx * factor, self.fy * factor, (self.cx + 0.5) * factor - 0.5,
                             (self.cy + 0.5) * factor - 0.5, self.R, self.t,
                             int(round(self.width * factor)), int(round(self.height * factor)))

    def mirrored(self) -> PinholeCamera:
        """Camera imaging the x-mirrored world as the horizontally flipped image."""
        flip = np.diag([-1.0, 1.0, 1.0])
        return PinholeCamera(self.fx, self.fy, self.width - 1 - self.cx, self.cy,
                             flip @ self.R @ flip, flip @ self.t, self.width, self.height)

    def to_dict(self) -> dict:
        ext = np.hstack([self.R, self.t[:, None]])
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "extrinsics": ext.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> PinholeCamera:
        ext = np.asarray(data["extrinsics"], dtype=float)
        return cls(float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]),
                   ext[:, :3], ext[:, 3], int(data["width"]), int(data["height"]))


def ray_through_pixel(camera: PinholeCamera, pixel) -> PluckerRay:
    """World-space rays from the camera center through pixel coordinates (..., 2)."""
    pixel = np.asarray(pixel, dtype=float)
    dc = np.stack([(pixel[..., 0] - camera.cx) / camera.fx, (pixel[..., 1] - camera.cy) / camera.fy,
                   np.ones(pixel.shape[:-1])], axis=-1)
    d = dc @ camera.R
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return PluckerRay(d, np.cross(camera.center, d))


def save_cameras(cameras: list[PinholeCamera], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path) -> list[PinholeCamera]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [PinholeCamera.from_dict(d) for d in data]


# ---------------------------------------------------------------------------
# masks

_NEIGHBORS8 = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        raise EmptySilhouetteError("mask has no foreground")
    if count == 1:
        return labels == 1
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 8-neighbor (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    eroded = ndimage.binary_erosion(padded, structure=np.ones((3, 3), dtype=bool), border_value=0)[1:-1, 1:-1]
    return mask & ~eroded


def _trace_order(boundary: np.ndarray) -> np.ndarray:
    """Order boundary pixels along chains of 8-connected neighbors."""
    rows, cols = np.nonzero(boundary)
    h, w = boundary.shape
    remaining = boundary.copy()
    order = []
    # raster order for restarts
    for r0, c0 in zip(rows.tolist(), cols.tolist()):
        if not remaining[r0, c0]:
            continue
        r, c = r0, c0
        remaining[r, c] = False
        order.append((r, c))
        while True:
            nxt = None
            for dr, dc in _NEIGHBORS8[1::2] + _NEIGHBORS8[0::2]:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and remaining[rr, cc]:
                    nxt = (rr, cc)
                    break
            if nxt is None:
                break
            r, c = nxt
            remaining[r, c] = False
            order.append(nxt)
    return np.array(order, dtype=np.int64).reshape(-1, 2)


def silhouette_boundary(mask: np.ndarray, max_points: int | None = 1500) -> np.ndarray:
    """Ordered boundary pixels ``(u, v)`` of the largest foreground component.

    When there are more than ``max_points`` boundary pixels, a uniform stride
    through the traced order is kept.

    Raises:
        EmptySilhouetteError: if the mask has no foreground.
    """
    comp = largest_component(np.asarray(mask, dtype=bool))
    order = _trace_order(boundary_mask(comp))
    n = len(order)
    if max_points is not None and n > max_points:
        order = order[(np.arange(max_points) * n) // max_points]
    return order[:, ::-1].copy()


def distance_transform(mask: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Exact Euclidean distance (pixels) to the nearest foreground pixel.

    With ``inverse=True`` the distance to the nearest background pixel is
    returned instead, i.e. the transform of the complement mask.
    """
    mask = np.asarray(mask, dtype=bool)
    target = ~mask if inverse else mask
    if not target.any():
        raise EmptySilhouetteError("distance transform needs at least one target pixel")
    if target.all():
        return np.zeros(mask.shape)
    return ndimage.distance_transform_edt(~target)


def write_pgm(path, mask: np.ndarray) -> None:
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return img > maxval // 2


def read_mask(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    from PIL import Image

    img = np.asarray(Image.open(path).convert("L"))
    return img > 127


def write_mask(path, mask: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, mask)
        return
    from PIL import Image

    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def write_float_grid(path, grid: np.ndarray) -> None:
    """Raw float32 grid with a 16-byte header: magic ``DIST``, width, height, version."""
    grid = np.asarray(grid, dtype="<f4")
    h, w = grid.shape
    header = np.array([w, h, 1], dtype="<u4").tobytes()
    Path(path).write_bytes(b"DIST" + header + grid.tobytes())


def read_float_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"DIST":
        raise ValueError(f"{path}: bad float grid header")
    w, h, _ = np.frombuffer(data, dtype="<u4", count=3, offset=4)
    return np.frombuffer(data, dtype="<f4", count=int(w) * int(h), offset=16).reshape(int(h), int(w)).astype(float)


# ---------------------------------------------------------------------------
# rasterization

_CHUNK = 1 << 21


@dataclass
class Fragments:
    """Rasterized fragments: flat pixel index, face, screen barycentrics, depth."""

    pixel: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    depth: np.ndarray


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _rasterize_fragments(uv: np.ndarray, z: np.ndarray, faces: np.ndarray, width: int, height: int,
                         near: float = 1e-6) -> Fragments:
    tri_uv = uv[faces]
    tri_z = z[faces]
    ok = (tri_z > near).all(axis=1)
    idx = np.flatnonzero(ok)
    tri_uv, tri_z = tri_uv[idx], tri_z[idx]
    ax, ay = tri_uv[:, 0, 0], tri_uv[:, 0, 1]
    bx, by = tri_uv[:, 1, 0], tri_uv[:, 1, 1]
    cx, cy = tri_uv[:, 2, 0], tri_uv[:, 2, 1]
    area = _edge(ax, ay, bx, by, cx, cy)
    # orient every triangle counter-clockwise in pixel coordinates
    flip = area < 0
    bx2, by2 = np.where(flip, cx, bx), np.where(flip, cy, by)
    cx2, cy2 = np.where(flip, bx, cx), np.where(flip, by, cy)
    bz = np.where(flip, tri_z[:, 2], tri_z[:, 1])
    cz = np.where(flip, tri_z[:, 1], tri_z[:, 2])
    area = np.abs(area)
    keep = area > 0
    umin = np.maximum(np.ceil(np.minimum(np.minimum(ax, bx), cx)), 0)
    umax = np.minimum(np.floor(np.maximum(np.maximum(ax, bx), cx)), width - 1)
    vmin = np.maximum(np.ceil(np.minimum(np.minimum(ay, by), cy)), 0)
    vmax = np.minimum(np.floor(np.maximum(np.maximum(ay, by), cy)), height - 1)
    keep &= (umax >= umin) & (vmax >= vmin)
    size = np.maximum(umax - umin, vmax - vmin) + 1
    tri = np.stack([ax, ay, bx2, by2, cx2, cy2], axis=1)
    inv_z = np.stack([1.0 / tri_z[:, 0], 1.0 / bz, 1.0 / cz], axis=1)
    out = []
    lo = 0
    for hi in (2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 4096, 1 << 20):
        sel = np.flatnonzero(keep & (size > lo) & (size <= hi))
        lo = hi
        if sel.size == 0:
            continue
        per = hi * hi
        step = max(1, _CHUNK // per)
        off = np.arange(hi, dtype=float)
        for s in range(0, sel.size, step):
            t = sel[s:s + step]
            pu = umin[t, None, None] + off[None, None, :]
            pv = vmin[t, None, None] + off[None, :, None]
            inside = (pu <= umax[t, None, None]) & (pv <= vmax[t, None, None])
            a = tri[t]
            e0 = _edge(a[:, 2, None, None], a[:, 3, None, None], a[:, 4, None, None], a[:, 5, None, None], pu, pv)
            e1 = _edge(a[:, 4, None, None], a[:, 5, None, None], a[:, 0, None, None], a[:, 1, None, None], pu, pv)
            e2 = _edge(a[:, 0, None, None], a[:, 1, None, None], a[:, 2, None, None], a[:, 3, None, None], pu, pv)
            # top-left rule: a zero edge value counts only on top or left edges
            inside &= _covers(e0, a[:, 2], a[:, 3], a[:, 4], a[:, 5])
            inside &= _covers(e1, a[:, 4], a[:, 5], a[:, 0], a[:, 1])
            inside &= _covers(e2, a[:, 0], a[:, 1], a[:, 2], a[:, 3])
            ti, yy, xx = np.nonzero(inside)
            if ti.size == 0:
                continue
            tt = t[ti]
            ar = area[tt]
            b0 = e0[ti, yy, xx] / ar
            b1 = e1[ti, yy, xx] / ar
            b2 = 1.0 - b0 - b1
            px = (umin[tt] + xx).astype(np.int64)
            py = (vmin[tt] + yy).astype(np.int64)
            iz = inv_z[tt]
            depth = 1.0 / (b0 * iz[:, 0] + b1 * iz[:, 1] + b2 * iz[:, 2])
            bary = np.stack([b0, b1, b2], axis=1)
            fl = flip[tt]
            bary[fl] = bary[fl][:, [0, 2, 1]]
            out.append((py * width + px, idx[tt], bary, depth))
    if not out:
        return Fragments(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0))
    return Fragments(*(np.concatenate(parts) for parts in zip(*out)))


def _covers(e, ax, ay, bx, by):
    # for counter-clockwise triangles in a y-down frame, "top" edges are
    # horizontal with the interior below, "left" edges go downwards
    ax, ay, bx, by = (v[:, None, None] for v in (ax, ay, bx, by))
    dx, dy = bx - ax, by - ay
    top_left = ((dy == 0) & (dx < 0)) | (dy > 0)
    return (e > 0) | ((e == 0) & top_left)


def rasterize_silhouette(vertices: np.ndarray, faces: np.ndarray, camera: PinholeCamera) -> np.ndarray:
    """Binary coverage mask (height, width) of all projected triangles.

    Raises:
        EmptySilhouetteError: if no pixel center is covered.
    """
    uv, z = camera.project(vertices)
    frags = _rasterize_fragments(uv, z, np.asarray(faces), camera.width, camera.height)
    mask = np.zeros(camera.height * camera.width, dtype=bool)
    mask[frags.pixel] = True
    if not mask.any():
        raise EmptySilhouetteError("mesh does not cover any pixel")
    return mask.reshape(camera.height, camera.width)


@dataclass
class DepthRender:
    """Nearest-surface buffers; ``face`` is -1 on background."""

    depth: np.ndarray
    face: np.ndarray
    bary: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.face >= 0


def render_depth(vertices: np.ndarray, faces: np.ndarray, camera: PinholeCamera) -> DepthRender:
    """Z-buffered rasterization with per-pixel face ids and barycentrics."""
    uv, z = camera.project(vertices)
    frags = _rasterize_fragments(uv, z, np.asarray(faces), camera.width, camera.height)
    n = camera.width * camera.height
    depth = np.full(n, np.inf)
    face = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 3))
    if frags.pixel.size:
        order = np.lexsort((frags.face, frags.depth, frags.pixel))
        pix = frags.pixel[order]
        first = np.ones(pix.size, dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        sel = order[first]
        depth[frags.pixel[sel]] = frags.depth[sel]
        face[frags.pixel[sel]] = frags.face[sel]
        bary[frags.pixel[sel]] = frags.bary[sel]
    shape = (camera.height, camera.width)
    return DepthRender(depth.reshape(shape), face.reshape(shape), bary.reshape(shape + (3,)))


def render_vertex_colors(vertices: np.ndarray, faces: np.ndarray, colors: np.ndarray,
                         camera: PinholeCamera, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Flat render where each pixel takes the color of its dominant triangle corner."""
    buf = render_depth(vertices, faces, camera)
    img = np.empty(buf.face.shape + (3,))
    img[:] = np.asarray(background, dtype=float)
    fg = buf.mask
    corner = np.argmax(buf.bary[fg], axis=1)
    vid = np.asarray(faces)[buf.face[fg], corner]
    img[fg] = np.asarray(colors, dtype=float)[vid]
    return img


# ---------------------------------------------------------------------------
# mesh operators


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def adjacency(faces: np.ndarray, n_vertices: int) -> sp.csr_matrix:
    e = mesh_edges(faces)
    data = np.ones(2 * len(e))
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((data, (rows, cols)), shape=(n_vertices, n_vertices))


def uniform_laplacian(faces: np.ndarray, n_vertices: int) -> sp.csr_matrix:
    """Graph Laplacian with rows ``v_i - mean(one-ring of i)``.

    Vertices referenced by no face get a zero row and are reported through an
    :class:`IsolatedVertexWarning`.
    """
    adj = adjacency(faces, n_vertices)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    isolated = np.flatnonzero(deg == 0)
    if isolated.size:
        warnings.warn(IsolatedVertexWarning(f"isolated vertices: {isolated.tolist()}"), stacklevel=2)
    inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
    diag = sp.diags((deg > 0).astype(float))
    lap = diag - sp.diags(inv) @ adj
    return sp.csr_matrix(lap)


def rim_vertices(vertices: np.ndarray, faces: np.ndarray, eye: np.ndarray) -> np.ndarray:
    """Boolean mask of vertices touching both front- and back-facing triangles."""
    tri = vertices[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    front = np.einsum("fa,fa->f", normal, np.asarray(eye) - tri[:, 0]) > 0
    n = len(vertices)
    has_front = np.zeros(n, dtype=bool)
    has_back = np.zeros(n, dtype=bool)
    for c in range(3):
        has_front[faces[front, c]] = True
        has_back[faces[~front, c]] = True
    return has_front & has_back
