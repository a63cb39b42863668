"""Per-frame offset refinement in a sliding window and median color fusion."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .consensus import EnergyConfig, ResidualBlock, gm_weight
from .geometry import EmptySilhouetteError, adjacency, render_depth, uniform_laplacian
from .model import SkinnedModel, rest_vertices, skin, vertex_normals
from .solver import TrustRegionParams, solve_dogleg
from .unpose import UnposeConfig, frame_rays, unpose_frame

log = logging.getLogger(__name__)


@dataclass
class RefineConfig:
    """Sliding-window refinement settings.

    ``m`` is the window half-width; neighbours enter the data term with weight
    ``w_neigh`` and the previous frame's offsets are tied with ``w_last``.
    """

    m: int = 1
    w_neigh: float = 0.3
    w_last: float = 0.5
    rounds: int = 2
    iterations: int = 20

    def validate(self) -> None:
        if self.m < 0:
            raise ValueError("window half-width m must be >= 0")
        if not 0.0 < self.w_neigh < 1.0:
            raise ValueError("w_neigh must lie in (0, 1)")
        if self.w_last < 0:
            raise ValueError("w_last must be >= 0")
        if self.rounds < 1 or self.iterations < 1:
            raise ValueError("rounds and iterations must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameData:
    theta: np.ndarray
    camera: object
    rays: object  # PluckerRay or None for frames without a silhouette


class RefineProblem:
    """Least squares over one frame's offsets ``D_f`` (the shape is frozen).

    The body-model and Laplacian terms are anchored to the consensus shape so
    that a frame agreeing with the consensus is a fixed point.
    """

    def __init__(self, model: SkinnedModel, beta, anchor_offsets, last_offsets, vertex, direction, moment,
                 weights, energy: EnergyConfig, refine: RefineConfig, laplacian=None):
        self.model = model
        self.base = rest_vertices(model, beta)
        self.anchor = np.asarray(anchor_offsets, dtype=float)
        self.last = np.asarray(last_offsets, dtype=float)
        self.vertex, self.direction, self.moment = vertex, direction, moment
        self.weights = weights
        self.energy = energy
        self.refine = refine
        self.laplacian = uniform_laplacian(model.faces, model.n_vertices) if laplacian is None else laplacian
        self.n = model.n_vertices

    def data_block(self, d) -> ResidualBlock:
        v = (self.base + d)[self.vertex]
        sw = np.sqrt(self.weights)
        res = sw[:, None] * (np.cross(v, self.direction) - self.moment)
        m = len(self.vertex)
        nrm = self.direction
        rows = np.repeat(3 * np.arange(m), 6) + np.tile([0, 0, 1, 1, 2, 2], m)
        cols = 3 * np.repeat(self.vertex, 6) + np.tile([1, 2, 0, 2, 0, 1], m)
        vals = np.stack([nrm[:, 2], -nrm[:, 1], -nrm[:, 2], nrm[:, 0], nrm[:, 1], -nrm[:, 0]], axis=1) * sw[:, None]
        return ResidualBlock(res.ravel(), sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(3 * m, 3 * self.n)),
                             "data")

    def _diag_block(self, d, target, scale, name) -> ResidualBlock:
        s = np.broadcast_to(np.asarray(scale, dtype=float), (self.n,))
        res = s[:, None] * (d - target)
        return ResidualBlock(res.ravel(), sp.diags(np.repeat(s, 3), format="csr"), name)

    def blocks(self, d) -> list[ResidualBlock]:
        e, r = self.energy, self.refine
        s_lp = np.sqrt(e.w_lp * self.model.lap_weights)
        lap3 = sp.kron(sp.diags(s_lp) @ self.laplacian, sp.identity(3), format="csr")
        lap_res = s_lp[:, None] * np.asarray(self.laplacian @ (d - self.anchor))
        out = [self.data_block(d),
               ResidualBlock(lap_res.ravel(), lap3, "laplacian"),
               self._diag_block(d, self.anchor, np.sqrt(e.w_var * self.model.var_weights), "model")]
        if r.w_last > 0:
            out.append(self._diag_block(d, self.last, np.sqrt(r.w_last), "last"))
        return out

    def residuals(self, x):
        blocks = self.blocks(x.reshape(-1, 3))
        return np.concatenate([b.residual for b in blocks]), sp.vstack([b.jacobian for b in blocks], format="csr")


def _window_correspondences(model, beta, d, frames: list[FrameData], center: int, cfg: RefineConfig,
                            unpose_cfg: UnposeConfig, sigma: float):
    parts = []
    for j in range(max(0, center - cfg.m), min(len(frames), center + cfg.m + 1)):
        fr = frames[j]
        if fr.rays is None:
            continue
        res = unpose_frame(model, beta, fr.theta, fr.rays, unpose_cfg, d, fr.camera)
        if len(res.vertex) == 0:
            continue
        psi = 1.0 if j == center else cfg.w_neigh
        parts.append((res.vertex, res.direction, res.moment, np.full(len(res.vertex), psi)))
    if not parts:
        return None
    vertex = np.concatenate([p[0] for p in parts])
    direction = np.concatenate([p[1] for p in parts])
    moment = np.concatenate([p[2] for p in parts])
    psi = np.concatenate([p[3] for p in parts])
    v = (rest_vertices(model, beta) + d)[vertex]
    e = np.linalg.norm(np.cross(v, direction) - moment, axis=1)
    return vertex, direction, moment, psi * gm_weight(e, sigma)


def refine_frame(model: SkinnedModel, beta, consensus_offsets, frames: list[FrameData], center: int,
                 last_offsets, energy: EnergyConfig, config: RefineConfig, laplacian=None):
    """Offsets of frame ``center`` from the window ``center - m .. center + m``.

    Returns ``(offsets, energies)``; the window is truncated at the sequence
    ends without renormalizing the neighbour weights.
    """
    config.validate()
    unpose_cfg = energy.unpose_config()
    d = np.array(last_offsets, dtype=float)
    energies = []
    for _ in range(config.rounds):
        corr = _window_correspondences(model, beta, d, frames, center, config, unpose_cfg, energy.sigma_gm)
        if corr is None:
            vertex = np.zeros(0, dtype=np.int64)
            direction = moment = np.zeros((0, 3))
            weights = np.zeros(0)
        else:
            vertex, direction, moment, weights = corr
        prob = RefineProblem(model, beta, consensus_offsets, last_offsets, vertex, direction, moment, weights,
                             energy, config, laplacian)
        result = solve_dogleg(prob.residuals, d.ravel(),
                              TrustRegionParams(initial_radius=energy.initial_radius, max_iterations=config.iterations))
        energies.append(result.energies)
        d = result.x.reshape(-1, 3)
    return d, energies


def refine_sequence(model: SkinnedModel, beta, consensus_offsets, poses, cameras, masks=None, rays=None,
                    energy: EnergyConfig | None = None, config: RefineConfig | None = None) -> list[np.ndarray]:
    """Refine all frames in order; each frame starts from and is tied to its predecessor."""
    energy = energy or EnergyConfig()
    config = config or RefineConfig()
    if rays is None:
        rays = []
        for mask, cam in zip(masks, cameras):
            try:
                rays.append(frame_rays(mask, cam, energy.max_points, energy.subpixel))
            except EmptySilhouetteError:
                rays.append(None)
    frames = [FrameData(np.asarray(t, dtype=float), c, r) for t, c, r in zip(poses, cameras, rays)]
    lap = uniform_laplacian(model.faces, model.n_vertices)
    out = []
    last = np.asarray(consensus_offsets, dtype=float)
    for f in range(len(frames)):
        d, _ = refine_frame(model, beta, consensus_offsets, frames, f, last, energy, config, lap)
        out.append(d)
        last = d
    return out


# ---------------------------------------------------------------------------
# texture


@dataclass
class VertexColorSamples:
    """Flat sample table; row ``k`` is a color seen at ``vertex[k]`` in ``frame[k]``."""

    n_vertices: int
    vertex: np.ndarray
    color: np.ndarray
    orthogonality: np.ndarray
    frame: np.ndarray

    def counts(self) -> np.ndarray:
        return np.bincount(self.vertex, minlength=self.n_vertices)

    def for_vertex(self, i: int):
        sel = self.vertex == i
        return self.color[sel], self.orthogonality[sel], self.frame[sel]


def _bilinear_exact(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup in lerp form, so equal footprint colors are returned unchanged."""
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    tu = (u - u0)[:, None]
    tv = (v - v0)[:, None]
    h, w = img.shape[:2]
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    c00, c01 = img[v0, u0], img[v0, u1]
    c10, c11 = img[v1, u0], img[v1, u1]
    top = c00 + tu * (c01 - c00)
    bottom = c10 + tu * (c11 - c10)
    return top + tv * (bottom - top)


def backproject_frame(vertices: np.ndarray, faces: np.ndarray, image: np.ndarray, camera,
                      eps_z: float = 0.01):
    """Visible vertices of one posed mesh with their sampled colors and orthogonality.

    A vertex is visible when it faces the camera, projects inside the image
    and its depth is within ``eps_z`` (relative) of the z-buffer at its
    nearest pixel. Samples whose bilinear footprint touches a pixel of
    another surface (or the background) are discarded.
    """
    img = np.asarray(image, dtype=float)
    if img.dtype.kind != "f" or img.max() > 1.0:
        img = img / 255.0
    buf = render_depth(vertices, faces, camera)
    uv, z = camera.project(vertices)
    normals = vertex_normals(vertices, faces)
    view = camera.center[None, :] - vertices
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    orth = (normals * view).sum(axis=1)
    h, w = buf.depth.shape
    ok = (z > 0) & (orth > 0) & (uv[:, 0] >= 0) & (uv[:, 1] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] <= h - 1)
    idx = np.flatnonzero(ok)
    u, v = uv[idx, 0], uv[idx, 1]
    pu = np.rint(u).astype(int)
    pv = np.rint(v).astype(int)
    zbuf = buf.depth[pv, pu]
    vis = np.isfinite(zbuf) & (np.abs(z[idx] - zbuf) <= eps_z * z[idx])
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    tol = eps_z * z[idx]
    for vv, uu in ((v0, u0), (v0, u1), (v1, u0), (v1, u1)):
        # every footprint pixel must show this surface, not a background or occluder
        zz = buf.depth[vv, uu]
        vis &= np.isfinite(zz) & (np.abs(z[idx] - zz) <= tol)
    idx = idx[vis]
    colors = _bilinear_exact(img, uv[idx, 0], uv[idx, 1])
    return idx, colors, np.minimum(orth[idx], 1.0)


def backproject_colors(model: SkinnedModel, beta, offsets, poses, images, cameras, eps_z: float = 0.01,
                       threads: int = 1) -> VertexColorSamples:
    """Color samples from every frame; ``offsets`` is one (N, 3) array or one per frame."""
    n_frames = len(poses)
    per_frame = isinstance(offsets, (list, tuple))

    def work(f):
        d = offsets[f] if per_frame else offsets
        verts = skin(model, beta, poses[f], d)
        return backproject_frame(verts, model.faces, images[f], cameras[f], eps_z)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, range(n_frames)))
    else:
        results = [work(f) for f in range(n_frames)]
    vertex = np.concatenate([r[0] for r in results]).astype(np.int64)
    color = np.concatenate([r[1] for r in results]).reshape(-1, 3)
    orth = np.concatenate([r[2] for r in results])
    frame = np.concatenate([np.full(len(r[0]), f, dtype=np.int64) for f, r in enumerate(results)])
    return VertexColorSamples(model.n_vertices, vertex, color, orth, frame)


@dataclass
class FusedTexture:
    colors: np.ndarray
    coverage: np.ndarray  # samples available per vertex
    inpainted: np.ndarray  # bool, filled from neighbours

    def coverage_report(self) -> dict:
        return {"vertices": int(len(self.coverage)), "covered": int((self.coverage > 0).sum()),
                "inpainted": int(self.inpainted.sum()), "samples": self.coverage.tolist()}


def fuse_texture(samples: VertexColorSamples, faces: np.ndarray, top_q: int = 5) -> FusedTexture:
    """Channel-wise median of the ``top_q`` most orthogonal samples per vertex.

    Vertices without samples are filled by repeated averaging over colored
    one-ring neighbours.

    Raises:
        ValueError: if no vertex has a sample.
    """
    n = samples.n_vertices
    if len(samples.vertex) == 0:
        raise ValueError("no color samples: the mesh is never visible")
    # order by vertex, then most orthogonal first; ties broken by frame, then color
    order = np.lexsort((samples.color[:, 2], samples.color[:, 1], samples.color[:, 0], samples.frame,
                        -samples.orthogonality, samples.vertex))
    vtx = samples.vertex[order]
    col = samples.color[order]
    starts = np.searchsorted(vtx, np.arange(n))
    ends = np.searchsorted(vtx, np.arange(n), side="right")
    colors = np.zeros((n, 3))
    coverage = ends - starts
    for i in np.flatnonzero(coverage):
        s = starts[i]
        colors[i] = np.median(col[s:min(ends[i], s + top_q)], axis=0)
    have = coverage > 0
    inpainted = np.zeros(n, dtype=bool)
    adj = adjacency(faces, n)
    while not have.all():
        counts = adj @ have.astype(float)
        grow = (~have) & (counts > 0)
        if not grow.any():
            break
        sums = adj @ (colors * have[:, None])
        colors[grow] = sums[grow] / counts[grow, None]
        have = have | grow
        inpainted |= grow
    return FusedTexture(colors, coverage, inpainted)
