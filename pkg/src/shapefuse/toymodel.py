"""Procedural capsule-limb body model used as the test substrate.

The surface is the zero level set of a smooth union of capsules, meshed by
marching cubes on the ``x >= 0`` half of a grid and mirrored, so the mesh is
exactly symmetric about the ``x = 0`` plane (vertex coordinates, faces,
weights, regressor and shape basis).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import nnls
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .geometry import adjacency, mesh_edges
from .model import SkinnedModel

MIRROR = np.array([-1.0, 1.0, 1.0])

JOINT_NAMES = [
    "root", "spine", "neck", "head",
    "L_shoulder", "L_elbow", "L_wrist",
    "R_shoulder", "R_elbow", "R_wrist",
    "L_hip", "L_knee", "L_ankle",
    "R_hip", "R_knee", "R_ankle",
]
PARENTS = [-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14]

# design skeleton for a 1.75 m body, x > 0 is the body's left side, face +z
_JOINTS = {
    "root": (0.0, 0.0, 0.0),
    "spine": (0.0, 0.26, 0.0),
    "neck": (0.0, 0.52, 0.0),
    "head": (0.0, 0.62, 0.0),
    "L_shoulder": (0.17, 0.46, 0.0),
    "L_elbow": (0.45, 0.46, 0.0),
    "L_wrist": (0.69, 0.46, 0.0),
    "L_hip": (0.10, -0.06, 0.0),
    "L_knee": (0.10, -0.48, 0.0),
    "L_ankle": (0.10, -0.84, 0.0),
}
# bone end points of leaf joints
_ENDS = {"head": (0.0, 0.84, 0.0), "L_wrist": (0.80, 0.46, 0.0), "L_ankle": (0.10, -0.865, 0.14)}


@dataclass
class ToyModelSpec:
    """Parameters of the procedural body.

    ``radii`` scales all limb and torso radii; ``height`` rescales the whole
    body (the design skeleton is 1.75 m tall).
    """

    vertex_target: int = 3000
    n_joints: int = 16
    height: float = 1.75
    radii: float = 1.0
    blend: float = 0.025

    def validate(self) -> None:
        if self.n_joints != 16:
            raise ValueError("the toy model has exactly 16 joints")
        if not 200 <= self.vertex_target <= 200000:
            raise ValueError("vertex_target must lie in [200, 200000]")
        if self.height <= 0.5 or self.radii <= 0.2 or self.radii > 2.0:
            raise ValueError("height or radii out of range")

    def to_dict(self) -> dict:
        return asdict(self)


def _mirror_name(name: str) -> str:
    if name.startswith("L_"):
        return "R_" + name[2:]
    if name.startswith("R_"):
        return "L_" + name[2:]
    return name


def design_joints(scale: float = 1.0) -> np.ndarray:
    out = []
    for name in JOINT_NAMES:
        key = name if name in _JOINTS else _mirror_name(name)
        p = np.array(_JOINTS[key])
        if key != name:
            p = p * MIRROR
        out.append(p)
    return np.array(out) * scale


def bone_segments(joints: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """(K, 2, 3) segment per joint: from the joint to its child or leaf end."""
    segs = np.zeros((len(JOINT_NAMES), 2, 3))
    child = {"root": "spine", "spine": "neck", "neck": "head", "L_shoulder": "L_elbow",
             "L_elbow": "L_wrist", "L_hip": "L_knee", "L_knee": "L_ankle"}
    for k, name in enumerate(JOINT_NAMES):
        base = name if not name.startswith("R_") else _mirror_name(name)
        segs[k, 0] = joints[k]
        if base in child:
            target = child[base] if base == name else _mirror_name(child[base])
            segs[k, 1] = joints[JOINT_NAMES.index(target)]
        else:
            end = np.array(_ENDS[base]) * scale
            segs[k, 1] = end * MIRROR if base != name else end
    return segs


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1), closest


def _capsules(scale: float, r: float):
    s = scale
    caps = [
        # (a, b, radius, z-squash)
        ((0.0, -0.10, 0.0), (0.0, 0.40, 0.0), 0.135 * r, 0.62),
        ((0.0, 0.36, 0.0), (0.12, 0.44, 0.0), 0.085 * r, 0.75),
        ((0.10, -0.07, 0.0), (0.0, -0.04, 0.0), 0.11 * r, 0.8),
        ((0.0, 0.44, 0.0), (0.0, 0.63, 0.0), 0.052 * r, 1.0),
        ((0.0, 0.70, 0.01), (0.0, 0.74, 0.01), 0.095 * r, 1.0),
        ((0.17, 0.46, 0.0), (0.45, 0.46, 0.0), 0.048 * r, 1.0),
        ((0.45, 0.46, 0.0), (0.69, 0.46, 0.0), 0.039 * r, 1.0),
        ((0.69, 0.46, 0.0), (0.77, 0.46, 0.0), 0.035 * r, 0.7),
        ((0.10, -0.08, 0.0), (0.10, -0.48, 0.0), 0.068 * r, 1.0),
        ((0.10, -0.48, 0.0), (0.10, -0.84, 0.0), 0.048 * r, 1.0),
        ((0.10, -0.835, -0.02), (0.10, -0.835, 0.12), 0.032 * r, 1.0),
    ]
    out = []
    for a, b, rad, squash in caps:
        a = np.array(a) * s
        b = np.array(b) * s
        out.append((a, b, rad * s, squash))
        if a[0] != 0.0 or b[0] != 0.0:
            out.append((a * MIRROR, b * MIRROR, rad * s, squash))
    return out


def body_sdf(points: np.ndarray, scale: float = 1.0, radii: float = 1.0, blend: float = 0.025) -> np.ndarray:
    """Smooth-union capsule field; negative inside the body."""
    caps = _capsules(scale, radii)
    k = blend * scale
    d = None
    for a, b, rad, squash in caps:
        q = points.copy()
        center = 0.5 * (a + b)
        q[..., 2] = center[2] + (q[..., 2] - center[2]) / squash
        di = _segment_distance(q, a, b)[0] - rad
        if d is None:
            d = di
        else:
            h = np.clip(0.5 + 0.5 * (di - d) / k, 0.0, 1.0)
            d = di * (1 - h) + d * h - k * h * (1 - h)
    return d


def _half_mesh(spacing: float, scale: float, radii: float, blend: float):
    lo = np.array([0.0, -0.95, -0.25]) * scale
    hi = np.array([0.90, 0.90, 0.25]) * scale
    # grid x starts exactly at 0 so the cut plane carries grid vertices
    nx = int(np.ceil((hi[0] - lo[0]) / spacing)) + 2
    ny = int(np.ceil((hi[1] - lo[1]) / spacing)) + 2
    nz = int(np.ceil((hi[2] - lo[2]) / spacing)) + 2
    # shift y/z grids by an irrational fraction so no sample lands on the surface
    y0 = lo[1] - spacing * 0.5 * (np.sqrt(5) - 1)
    z0 = -spacing * (nz - 1) / 2.0
    xs = np.arange(nx) * spacing
    ys = y0 + np.arange(ny) * spacing
    zs = z0 + np.arange(nz) * spacing
    grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
    vol = body_sdf(grid, scale, radii, blend)
    verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=(spacing,) * 3, allow_degenerate=False)
    verts = verts + np.array([0.0, y0, z0])
    return verts, faces


def _mirror_mesh(verts: np.ndarray, faces: np.ndarray):
    on_plane = verts[:, 0] == 0.0
    off = np.flatnonzero(~on_plane)
    n = len(verts)
    mirror_idx = np.arange(n)
    mirror_idx[off] = n + np.arange(off.size)
    all_verts = np.concatenate([verts, verts[off] * MIRROR])
    mfaces = mirror_idx[faces][:, ::-1]
    all_faces = np.concatenate([faces, mfaces])
    partner = np.arange(len(all_verts))
    partner[off] = n + np.arange(off.size)
    partner[n + np.arange(off.size)] = off
    return all_verts, all_faces, partner


def _clean(verts, faces, partner):
    # drop faces with repeated vertices and unreferenced vertices
    good = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[good]
    used = np.zeros(len(verts), dtype=bool)
    used[faces.ravel()] = True
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(used.sum())
    return verts[used], remap[faces], remap[partner[used]]


def check_manifold(faces: np.ndarray, n_vertices: int) -> dict:
    """Topology summary: closedness, edge manifoldness and Euler characteristic."""
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    n_edges = len(counts)
    # oriented edges appear once each on a consistently oriented closed surface
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    return {
        "closed": bool((counts == 2).all()),
        "oriented": bool((dcounts == 1).all()),
        "euler": int(n_vertices - n_edges + len(faces)),
        "n_vertices": int(n_vertices),
        "n_edges": int(n_edges),
        "n_faces": int(len(faces)),
    }


def _build_mesh(spec: ToyModelSpec):
    scale = spec.height / 1.75
    # vertex count scales roughly with spacing^-2; refine the spacing twice
    spacing = 0.028 * scale * np.sqrt(3000.0 / spec.vertex_target)
    for _ in range(4):
        verts, faces = _half_mesh(spacing, scale, spec.radii, spec.blend)
        verts, faces, partner = _mirror_mesh(verts, faces)
        verts, faces, partner = _clean(verts, faces, partner)
        ratio = len(verts) / spec.vertex_target
        if abs(ratio - 1.0) < 0.04:
            break
        spacing *= np.sqrt(ratio)
    return verts, faces, partner


def _joint_mirror() -> np.ndarray:
    return np.array([JOINT_NAMES.index(_mirror_name(n)) for n in JOINT_NAMES])


def _blend_weights(verts, faces, segs, partner, sharpness, rounds=2, cutoff=0.02):
    n = len(verts)
    k = segs.shape[0]
    dist = np.stack([_segment_distance(verts, segs[j, 0], segs[j, 1])[0] for j in range(k)], axis=1)
    w = np.exp(-(dist - dist.min(axis=1, keepdims=True)) / sharpness)
    w[w < cutoff] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    adj = adjacency(faces, n)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    for _ in range(rounds):
        w = 0.5 * w + 0.5 * (adj @ w) / deg[:, None]
    w[w < cutoff] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    # exact mirror symmetry: w[partner[i]] = w[i] with left/right joints swapped
    jm = _joint_mirror()
    mirrored = w[partner][:, jm]
    w = 0.5 * (w + mirrored)
    w /= w.sum(axis=1, keepdims=True)
    return w


def _regressor(verts, joints, partner, radius):
    """Sparse convex weights reproducing each design joint from nearby vertices."""
    k = len(joints)
    tree = cKDTree(verts)
    rows, cols, vals = [], [], []
    jm = _joint_mirror()
    done = {}
    for j in range(k):
        if jm[j] < j:
            src = done[jm[j]]
            idx = partner[src[0]]
            rows += [j] * len(idx)
            cols += idx.tolist()
            vals += src[1].tolist()
            continue
        r = radius[j]
        idx = np.array(sorted(tree.query_ball_point(joints[j], r)))
        while idx.size < 8:
            r *= 1.3
            idx = np.array(sorted(tree.query_ball_point(joints[j], r)))
        if jm[j] == j:
            idx = np.union1d(idx, partner[idx])
        a = np.vstack([verts[idx].T * 100.0, 100.0 * np.ones(len(idx)), 1e-3 * np.eye(len(idx))])
        b = np.concatenate([joints[j] * 100.0, [100.0], np.zeros(len(idx))])
        wts, _ = nnls(a, b, maxiter=5000)
        if jm[j] == j:
            pos = {v: i for i, v in enumerate(idx)}
            wts = 0.5 * (wts + wts[[pos[p] for p in partner[idx]]])
        wts /= wts.sum()
        keep = wts > 1e-8
        idx, wts = idx[keep], wts[keep] / wts[keep].sum()
        done[j] = (idx, wts)
        rows += [j] * len(idx)
        cols += idx.tolist()
        vals += wts.tolist()
    return sp.csr_matrix((vals, (rows, cols)), shape=(k, len(verts)))


def _shape_basis(verts, weights, segs, partner, joints, scale):
    n = len(verts)
    basis = np.zeros((n, 3, 4))
    y_feet = verts[:, 1].min()
    y_top = verts[:, 1].max()
    # height: stretch along y about the soles, +5 cm at the crown per unit
    basis[:, 1, 0] = 0.05 * (verts[:, 1] - y_feet) / (y_top - y_feet)
    # girth: radial push away from the bone axes
    radial = np.zeros((n, 3))
    for j in range(len(segs)):
        _, closest = _segment_distance(verts, segs[j, 0], segs[j, 1])
        radial += weights[:, j:j + 1] * (verts - closest)
    basis[:, :, 1] = 0.15 * radial
    # limb length: arm and leg points slide along their limb away from its root
    limb = np.zeros((n, 3))
    for root_name, names in (("L_shoulder", ("L_shoulder", "L_elbow", "L_wrist")),
                             ("L_hip", ("L_hip", "L_knee", "L_ankle")),
                             ("R_shoulder", ("R_shoulder", "R_elbow", "R_wrist")),
                             ("R_hip", ("R_hip", "R_knee", "R_ankle"))):
        ids = [JOINT_NAMES.index(nm) for nm in names]
        root = joints[ids[0]]
        w = weights[:, ids].sum(axis=1)
        limb += 0.08 * w[:, None] * (verts - root) / scale
    limb[:, 2] = 0.0
    basis[:, :, 2] = limb
    # torso length: everything above the pelvis rises smoothly
    leg_ids = [JOINT_NAMES.index(nm) for nm in ("L_hip", "L_knee", "L_ankle", "R_hip", "R_knee", "R_ankle")]
    not_leg = 1.0 - weights[:, leg_ids].sum(axis=1)
    t = np.clip((verts[:, 1] - joints[0, 1]) / (joints[2, 1] - joints[0, 1]), 0.0, 1.0)
    basis[:, 1, 3] = 0.04 * not_leg * t * t * (3 - 2 * t)
    # exact mirror symmetry of every column
    basis = 0.5 * (basis + basis[partner] * MIRROR[None, :, None])
    return basis


def generate_toy_model(spec: ToyModelSpec | None = None) -> SkinnedModel:
    """Build the procedural toy body model.

    Raises:
        ValueError: if the spec is invalid or the resulting mesh is not a
            closed genus-0 manifold (e.g. limbs fused by oversized radii).
    """
    spec = spec or ToyModelSpec()
    spec.validate()
    scale = spec.height / 1.75
    verts, faces, partner = _build_mesh(spec)
    topo = check_manifold(faces, len(verts))
    if not (topo["closed"] and topo["oriented"] and topo["euler"] == 2):
        raise ValueError(f"toy body is not a closed genus-0 manifold: {topo}")
    # snap to exact symmetry
    verts = 0.5 * (verts + verts[partner] * MIRROR)
    # rescale so the mesh height equals the requested height exactly
    y_min, y_max = verts[:, 1].min(), verts[:, 1].max()
    stretch = spec.height / (y_max - y_min)
    verts[:, 1] = (verts[:, 1] - y_min) * stretch + y_min
    joints = design_joints(scale)
    segs = bone_segments(joints, scale)
    joints[:, 1] = (joints[:, 1] - y_min) * stretch + y_min
    segs[..., 1] = (segs[..., 1] - y_min) * stretch + y_min
    weights = _blend_weights(verts, faces, segs, partner, sharpness=0.015 * scale)
    radius = np.full(len(joints), 0.16 * scale * spec.radii)
    regressor = _regressor(verts, joints, partner, radius)
    shape_basis = _shape_basis(verts, weights, segs, partner, joints, scale)

    n = len(verts)
    pairs = np.stack([np.arange(n), partner], axis=1)
    pairs = pairs[pairs[:, 0] <= pairs[:, 1]]
    dominant = np.argmax(weights, axis=1)
    hands = np.flatnonzero(np.isin(dominant, [JOINT_NAMES.index("L_wrist"), JOINT_NAMES.index("R_wrist")]))
    feet = np.flatnonzero(np.isin(dominant, [JOINT_NAMES.index("L_ankle"), JOINT_NAMES.index("R_ankle")]))
    head = dominant == JOINT_NAMES.index("head")
    face = np.flatnonzero(head & (verts[:, 2] > 0.04 * scale))
    ears = np.flatnonzero(head & (np.abs(verts[:, 0]) > 0.07 * scale) & (np.abs(verts[:, 2]) < 0.04 * scale))
    lap_w = np.ones(n)
    var_w = np.ones(n)
    for ids in (hands, feet, face, ears):
        lap_w[ids] = 4.0
        var_w[ids] = 10.0
    model = SkinnedModel(
        template_vertices=verts,
        faces=faces,
        parents=np.array(PARENTS),
        joint_regressor=regressor,
        blend_weights=sp.csr_matrix(weights),
        shape_basis=shape_basis,
        symmetry_pairs=pairs,
        lap_weights=lap_w,
        var_weights=var_w,
        sym_weights=np.ones(n),
        joint_names=list(JOINT_NAMES),
        regions={"hands": hands, "feet": feet, "face": face, "ears": ears},
    )
    model.validate(sym_tol=1e-12)
    return model


def symmetry_partner(model: SkinnedModel) -> np.ndarray:
    """Full involution ``i -> mirror(i)`` (on-plane vertices map to themselves)."""
    partner = np.arange(model.n_vertices)
    i, j = model.symmetry_pairs.T
    partner[i] = j
    partner[j] = i
    return partner


def a_pose(model: SkinnedModel, abduction_deg: float = 60.0) -> np.ndarray:
    """Pose with the arms lowered from the T-pose to the given shoulder abduction."""
    theta = model.zero_pose()
    drop = np.deg2rad(90.0 - abduction_deg)
    names = model.joint_names
    theta[3 * names.index("L_shoulder") + 2] = -drop
    theta[3 * names.index("R_shoulder") + 2] = drop
    return theta


def mean_edge_length(model: SkinnedModel) -> float:
    e = mesh_edges(model.faces)
    v = model.template_vertices
    return float(np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1).mean())
