"""Skinned body model with free-form vertex offsets.

The model follows the usual SMPL layout: a rest template, a linear shape
basis, an optional linear pose-corrective basis, a joint regressor acting on
the shaped rest mesh, and per-vertex linear blend skinning weights. On top of
that every vertex carries a free 3D offset, so the rest pose is

    template + shape_basis @ beta + pose_basis @ features(theta) + offsets

Poses are flat vectors of length ``3 * K + 3``: one axis-angle triple per
joint followed by the global root translation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

SMALL_ANGLE = 1e-8
DET_EPS = 1e-6


class ModelError(ValueError):
    """Invalid model data or argument dimensions."""


class SingularTransformError(ArithmeticError):
    """A blended skinning transform is too close to singular to invert."""


# ---------------------------------------------------------------------------
# rotations


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for (..., 3) vectors."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rodrigues(rotvec: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 3) axis-angle vectors.

    Below ``SMALL_ANGLE`` the Taylor expansion of the coefficients is used,
    so the zero vector maps to the identity without a division.
    """
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1)
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0 - angle**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - angle**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    k = skew(rotvec)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def left_jacobian(rotvec: np.ndarray) -> np.ndarray:
    """SO(3) left Jacobian: ``exp(theta + d) ~= exp(J_l d) exp(theta)``."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1)
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    b = np.where(small, 0.5 - angle**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    c = np.where(small, 1.0 / 6.0 - angle**2 / 120.0, (safe - np.sin(safe)) / safe**3)
    k = skew(rotvec)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + b[..., None, None] * k + c[..., None, None] * (k @ k)


def rotation_to_rotvec(rot: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rodrigues` for (..., 3, 3) rotations."""
    from scipy.spatial.transform import Rotation

    rot = np.asarray(rot, dtype=float)
    flat = rot.reshape(-1, 3, 3)
    out = Rotation.from_matrix(flat).as_rotvec()
    return out.reshape(rot.shape[:-2] + (3,))


def canonical_rotvec(rotvec: np.ndarray) -> np.ndarray:
    """Wrap axis-angle vectors so that their magnitude is below pi."""
    return rotation_to_rotvec(rodrigues(rotvec))


# ---------------------------------------------------------------------------
# data types


@dataclass
class SkinnedModel:
    """Parametric body model.

    Attributes:
        template_vertices: (N, 3) rest template in meters.
        faces: (F, 3) triangle vertex indices.
        parents: (K,) parent joint index per joint, -1 for the root.
        joint_regressor: (K, N) sparse map from shaped rest vertices to joints.
        blend_weights: (N, K) sparse skinning weights.
        shape_basis: (N, 3, S) shape displacement basis.
        pose_basis: optional (N, 3, 9 * (K - 1)) pose-corrective basis acting
            on the flattened ``R_k - I`` of every non-root joint.
        symmetry_pairs: (P, 2) vertex pairs (i, j) with j the mirror of i; on-plane
            vertices pair with themselves.
        lap_weights, var_weights, sym_weights: per-vertex regularizer weights.
        joint_names: optional joint names.
        regions: named vertex index sets (hands, feet, face, ...).
    """

    template_vertices: np.ndarray
    faces: np.ndarray
    parents: np.ndarray
    joint_regressor: sp.csr_matrix
    blend_weights: sp.csr_matrix
    shape_basis: np.ndarray
    pose_basis: np.ndarray | None = None
    symmetry_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    lap_weights: np.ndarray | None = None
    var_weights: np.ndarray | None = None
    sym_weights: np.ndarray | None = None
    joint_names: list[str] = field(default_factory=list)
    regions: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.template_vertices = np.ascontiguousarray(self.template_vertices, dtype=float)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.joint_regressor = sp.csr_matrix(self.joint_regressor, dtype=float)
        self.blend_weights = sp.csr_matrix(self.blend_weights, dtype=float)
        self.shape_basis = np.asarray(self.shape_basis, dtype=float)
        if self.shape_basis.ndim == 2:
            self.shape_basis = self.shape_basis.reshape(self.n_vertices, 3, -1)
        self.symmetry_pairs = np.asarray(self.symmetry_pairs, dtype=np.int64).reshape(-1, 2)
        n = self.n_vertices
        for name in ("lap_weights", "var_weights", "sym_weights"):
            value = getattr(self, name)
            setattr(self, name, np.ones(n) if value is None else np.asarray(value, dtype=float))
        if self.pose_basis is not None:
            self.pose_basis = np.asarray(self.pose_basis, dtype=float)
        self.regions = {k: np.asarray(v, dtype=np.int64) for k, v in self.regions.items()}
        self._weights_dense = self.blend_weights.toarray()
        self._descendants = _descendant_matrix(self.parents)

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_pose(self) -> int:
        return 3 * self.n_joints + 3

    @property
    def weights(self) -> np.ndarray:
        """Dense (N, K) blend weights."""
        return self._weights_dense

    def zero_pose(self) -> np.ndarray:
        return np.zeros(self.n_pose)

    def validate(self, sym_tol: float = 1e-6) -> None:
        """Check the structural invariants; raises :class:`ModelError`."""
        n, k = self.n_vertices, self.n_joints
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ModelError("face index out of range")
        if self.joint_regressor.shape != (k, n):
            raise ModelError(f"joint_regressor has shape {self.joint_regressor.shape}, expected {(k, n)}")
        if self.blend_weights.shape != (n, k):
            raise ModelError(f"blend_weights has shape {self.blend_weights.shape}, expected {(n, k)}")
        if self.shape_basis.shape[:2] != (n, 3):
            raise ModelError("shape_basis must have shape (N, 3, S)")
        w = self.weights
        if (w < 0).any():
            raise ModelError("negative blend weight")
        if not np.allclose(w.sum(axis=1), 1.0, atol=1e-9):
            raise ModelError("blend weights do not sum to one")
        roots = np.flatnonzero(self.parents < 0)
        if roots.size != 1:
            raise ModelError(f"kinematic tree needs exactly one root, found {roots.size}")
        for j in range(k):
            seen, p = set(), j
            while p >= 0:
                if p in seen or p >= k:
                    raise ModelError(f"kinematic tree has a cycle or bad parent at joint {j}")
                seen.add(p)
                p = self.parents[p]
        if self.pose_basis is not None and self.pose_basis.shape != (n, 3, 9 * (k - 1)):
            raise ModelError("pose_basis must have shape (N, 3, 9 * (K - 1))")
        if self.symmetry_pairs.size:
            v = self.template_vertices
            i, j = self.symmetry_pairs.T
            err = np.abs(v[i] * np.array([-1.0, 1.0, 1.0]) - v[j]).max()
            if err > sym_tol:
                raise ModelError(f"symmetry pair mismatch of {err:.3g} m")
        for name in ("lap_weights", "var_weights", "sym_weights"):
            value = getattr(self, name)
            if value.shape != (n,) or (value < 0).any():
                raise ModelError(f"{name} must be N nonnegative values")

    def joint_mirror(self) -> np.ndarray:
        """Index map swapping left and right joints, derived from names."""
        names = self.joint_names or [str(i) for i in range(self.n_joints)]
        lookup = {name: i for i, name in enumerate(names)}
        out = np.arange(self.n_joints)
        for i, name in enumerate(names):
            for a, b in (("L_", "R_"), ("R_", "L_"), ("left_", "right_"), ("right_", "left_")):
                if name.startswith(a) and b + name[len(a):] in lookup:
                    out[i] = lookup[b + name[len(a):]]
        return out


@dataclass
class BodyState:
    """Shape coefficients, free-form offsets and per-frame poses."""

    shape: np.ndarray
    offsets: np.ndarray
    poses: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros(cls, model: SkinnedModel, n_frames: int = 0) -> BodyState:
        return cls(np.zeros(model.n_shape), np.zeros((model.n_vertices, 3)),
                   [model.zero_pose() for _ in range(n_frames)])


@dataclass
class JointTransforms:
    """Global joint transforms relative to the rest pose.

    Attributes:
        matrices: (K, 4, 4) transforms ``G_k``; ``G_k(0) = I``.
        rotations: (K, 3, 3) global joint rotations.
        local_rotations: (K, 3, 3) per-joint rotations.
        posed_joints: (K, 3) joint positions after posing.
        rest_joints: (K, 3) joint positions of the shaped rest model.
    """

    matrices: np.ndarray
    rotations: np.ndarray
    local_rotations: np.ndarray
    posed_joints: np.ndarray
    rest_joints: np.ndarray


# ---------------------------------------------------------------------------
# evaluation


def _descendant_matrix(parents: np.ndarray) -> np.ndarray:
    k = len(parents)
    desc = np.eye(k)
    for j in range(k):
        p = parents[j]
        while p >= 0:
            desc[p, j] = 1.0
            p = parents[p]
    return desc


def _topological_order(parents: np.ndarray) -> list[int]:
    order, placed = [], set()
    while len(order) < len(parents):
        for j, p in enumerate(parents):
            if j not in placed and (p < 0 or p in placed):
                order.append(j)
                placed.add(j)
    return order


def split_pose(model: SkinnedModel, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.n_pose,):
        raise ModelError(f"pose must have {model.n_pose} entries, got {theta.shape}")
    return theta[:-3].reshape(model.n_joints, 3), theta[-3:]


def make_pose(rotvecs: np.ndarray, translation=(0.0, 0.0, 0.0)) -> np.ndarray:
    return np.concatenate([np.asarray(rotvecs, dtype=float).ravel(), np.asarray(translation, dtype=float)])


def _check_shape(model: SkinnedModel, beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (model.n_shape,):
        raise ModelError(f"beta must have {model.n_shape} entries, got {beta.shape}")
    return beta


def _check_offsets(model: SkinnedModel, offsets) -> np.ndarray:
    if offsets is None:
        return np.zeros((model.n_vertices, 3))
    offsets = np.asarray(offsets, dtype=float)
    if offsets.shape != (model.n_vertices, 3):
        raise ModelError(f"offsets must have shape ({model.n_vertices}, 3), got {offsets.shape}")
    return offsets


def shape_displacement(model: SkinnedModel, beta: np.ndarray) -> np.ndarray:
    beta = _check_shape(model, beta)
    return model.shape_basis @ beta


def rest_vertices(model: SkinnedModel, beta: np.ndarray, offsets=None) -> np.ndarray:
    """Rest-pose vertices ``template + B_s beta + D`` (pose correctives zero)."""
    return model.template_vertices + shape_displacement(model, beta) + _check_offsets(model, offsets)


def joint_locations(model: SkinnedModel, beta: np.ndarray) -> np.ndarray:
    """Rest joint positions regressed from the shaped mesh without offsets."""
    return np.asarray(model.joint_regressor @ rest_vertices(model, beta))


def pose_features(model: SkinnedModel, local_rotations: np.ndarray) -> np.ndarray:
    return (local_rotations[1:] - np.eye(3)).reshape(-1)


def pose_displacement(model: SkinnedModel, theta: np.ndarray) -> np.ndarray:
    """Pose-corrective displacements; zero when the model has no pose basis."""
    if model.pose_basis is None:
        return np.zeros((model.n_vertices, 3))
    rotvecs, _ = split_pose(model, theta)
    return model.pose_basis @ pose_features(model, rodrigues(rotvecs))


def forward_kinematics(model: SkinnedModel, beta: np.ndarray, theta: np.ndarray,
                       joints: np.ndarray | None = None) -> JointTransforms:
    """Global rest-relative joint transforms ``G_k``.

    ``G_k`` maps a rest-pose point rigidly attached to joint ``k`` to its posed
    position; the root translation is applied to every joint.
    """
    rotvecs, trans = split_pose(model, theta)
    if joints is None:
        joints = joint_locations(model, beta)
    local = rodrigues(rotvecs)
    k = model.n_joints
    glob = np.empty((k, 3, 3))
    posed = np.empty((k, 3))
    for j in _topological_order(model.parents):
        p = model.parents[j]
        if p < 0:
            glob[j] = local[j]
            posed[j] = joints[j] + trans
        else:
            glob[j] = glob[p] @ local[j]
            posed[j] = posed[p] + glob[p] @ (joints[j] - joints[p])
    mats = np.zeros((k, 4, 4))
    mats[:, :3, :3] = glob
    mats[:, :3, 3] = posed - np.einsum("kab,kb->ka", glob, joints)
    mats[:, 3, 3] = 1.0
    return JointTransforms(mats, glob, local, posed, joints)


def _posed_rest(model, beta, theta, offsets):
    return (rest_vertices(model, beta, offsets) + pose_displacement(model, theta))


def skin(model: SkinnedModel, beta: np.ndarray, theta: np.ndarray, offsets=None) -> np.ndarray:
    """Linear blend skinning of the offset model, (N, 3) posed vertices."""
    fk = forward_kinematics(model, beta, theta)
    blended = np.einsum("nk,kab->nab", model.weights, fk.matrices[:, :3, :])
    x = _posed_rest(model, beta, theta, offsets)
    return np.einsum("nab,nb->na", blended[:, :, :3], x) + blended[:, :, 3]


def vertex_transforms(model: SkinnedModel, beta: np.ndarray, theta: np.ndarray,
                      fk: JointTransforms | None = None) -> np.ndarray:
    """Blended 4x4 transforms ``A_i = sum_k w_ki G_k`` for all vertices."""
    if fk is None:
        fk = forward_kinematics(model, beta, theta)
    return np.einsum("nk,kab->nab", model.weights, fk.matrices)


def vertex_transform(model: SkinnedModel, beta: np.ndarray, theta: np.ndarray, i: int,
                     eps: float = DET_EPS) -> tuple[np.ndarray, bool]:
    """Blended transform of vertex ``i`` and whether it is safely invertible.

    Raises:
        SingularTransformError: if ``|det| < eps`` for the linear part.
    """
    if not 0 <= i < model.n_vertices:
        raise ModelError(f"vertex index {i} out of range")
    fk = forward_kinematics(model, beta, theta)
    a = np.einsum("k,kab->ab", model.weights[i], fk.matrices)
    det = np.linalg.det(a[:3, :3])
    if abs(det) < eps:
        raise SingularTransformError(f"vertex {i}: blended transform determinant {det:.3g}")
    return a, True


@dataclass
class SkinJacobians:
    """Derivatives of posed vertices.

    Attributes:
        vertices: (N, 3) posed vertices.
        d_shape: (N, 3, S) derivative w.r.t. beta.
        d_pose: (N, 3, 3K + 3) derivative w.r.t. the flat pose vector.
        d_offsets: (N, 3, 3) derivative of vertex i w.r.t. its own offset.
    """

    vertices: np.ndarray
    d_shape: np.ndarray
    d_pose: np.ndarray
    d_offsets: np.ndarray


def skin_jacobians(model: SkinnedModel, beta: np.ndarray, theta: np.ndarray, offsets=None,
                   with_shape: bool = True) -> SkinJacobians:
    """Posed vertices with analytic Jacobians w.r.t. shape, pose and offsets."""
    beta = _check_shape(model, beta)
    rotvecs, _ = split_pose(model, theta)
    fk = forward_kinematics(model, beta, theta)
    w = model.weights
    k = model.n_joints
    n = model.n_vertices
    x = _posed_rest(model, beta, theta, offsets)
    # per-joint images of every vertex, (N, K, 3)
    y = np.einsum("kab,nb->nka", fk.matrices[:, :3, :3], x) + fk.matrices[None, :, :3, 3]
    verts = np.einsum("nk,nka->na", w, y)
    blended_rot = np.einsum("nk,kab->nab", w, fk.rotations)

    # pose: rotating joint a by d(theta_a) turns every descendant about the
    # posed joint location with world angular velocity R_parent J_l e_c
    desc = model._descendants
    jl = left_jacobian(rotvecs)
    parent_rot = np.array([fk.rotations[p] if p >= 0 else np.eye(3) for p in model.parents])
    omega = np.einsum("kab,kbc->kca", parent_rot, jl)  # (K, c, 3)
    s = np.einsum("ak,nk,nkx->nax", desc, w, y)
    wa = w @ desc.T
    arm = s - wa[:, :, None] * fk.posed_joints[None]
    d_rot = np.cross(omega[None, :, :, :], arm[:, :, None, :])  # (N, K, c, 3)
    d_pose = np.zeros((n, 3, 3 * k + 3))
    d_pose[:, :, : 3 * k] = d_rot.reshape(n, 3 * k, 3).transpose(0, 2, 1)
    d_pose[:, :, 3 * k:] = np.eye(3)[None]
    if model.pose_basis is not None:
        # d(R_k)/d(theta_k^c) = [J_l e_c]_x R_k
        dr = np.einsum("kcab,kbd->kcad", skew(np.swapaxes(jl, 1, 2)), fk.local_rotations)
        feat = np.zeros((9 * (k - 1), k, 3))
        for j in range(1, k):
            feat[9 * (j - 1): 9 * j, j, :] = dr[j].reshape(3, 9).T
        dbp = np.einsum("nxf,fkc->nxkc", model.pose_basis, feat).reshape(n, 3, 3 * k)
        d_pose[:, :, : 3 * k] += np.einsum("nab,nbq->naq", blended_rot, dbp)

    d_shape = np.zeros((n, 3, model.n_shape))
    if with_shape and model.n_shape:
        # joint motion: posed_k = posed_parent + Rg_parent (j_k - j_parent), tau_k = posed_k - Rg_k j_k
        dposed = np.zeros((k, k, 3, 3))
        for j in _topological_order(model.parents):
            p = model.parents[j]
            if p < 0:
                dposed[j, j] = np.eye(3)
            else:
                dposed[j] = dposed[p]
                dposed[j, j] += fk.rotations[p]
                dposed[j, p] -= fk.rotations[p]
        dtau = dposed.copy()
        dtau[np.arange(k), np.arange(k)] -= fk.rotations
        dj = np.asarray(model.joint_regressor @ model.shape_basis.reshape(n, -1)).reshape(k, 3, -1)
        dtau_beta = np.einsum("kmab,mbq->kaq", dtau, dj)
        d_shape = np.einsum("nab,nbq->naq", blended_rot, model.shape_basis)
        d_shape += np.einsum("nk,kaq->naq", w, dtau_beta)
    return SkinJacobians(verts, d_shape, d_pose, blended_rot)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(normals, faces[:, c], fn)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(norm > 0, norm, 1.0)


def mirror_pose(model: SkinnedModel, theta: np.ndarray) -> np.ndarray:
    """Pose of the body reflected across the x = 0 plane."""
    rotvecs, trans = split_pose(model, theta)
    perm = model.joint_mirror()
    mirrored = rotvecs[perm] * np.array([1.0, -1.0, -1.0])
    return make_pose(mirrored, trans * np.array([-1.0, 1.0, 1.0]))


# ---------------------------------------------------------------------------
# file format


def _triplets(mat: sp.spmatrix) -> dict:
    coo = sp.coo_matrix(mat)
    order = np.lexsort((coo.col, coo.row))
    return {"shape": list(coo.shape),
            "triplets": [[int(r), int(c), float(v)] for r, c, v in
                         zip(coo.row[order], coo.col[order], coo.data[order])]}


def _from_triplets(obj: dict) -> sp.csr_matrix:
    trip = np.asarray(obj["triplets"], dtype=float).reshape(-1, 3)
    return sp.csr_matrix((trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))),
                         shape=tuple(obj["shape"]))


def model_to_dict(model: SkinnedModel) -> dict:
    out = {
        "format": "shapefuse-model",
        "version": 1,
        "units": "meters",
        "template_vertices": model.template_vertices.tolist(),
        "faces": model.faces.tolist(),
        "parents": model.parents.tolist(),
        "joint_names": list(model.joint_names),
        "joint_regressor": _triplets(model.joint_regressor),
        "blend_weights": _triplets(model.blend_weights),
        "shape_basis": model.shape_basis.tolist(),
        "symmetry_pairs": model.symmetry_pairs.tolist(),
        "regularization_weights": {
            "laplacian": model.lap_weights.tolist(),
            "model": model.var_weights.tolist(),
            "symmetry": model.sym_weights.tolist(),
        },
        "regions": {k: v.tolist() for k, v in model.regions.items()},
    }
    if model.pose_basis is not None:
        out["pose_basis"] = model.pose_basis.tolist()
    return out


def model_from_dict(data: dict) -> SkinnedModel:
    if data.get("units", "meters") != "meters":
        raise ModelError(f"unsupported units {data.get('units')!r}")
    try:
        reg = data.get("regularization_weights", {})
        model = SkinnedModel(
            template_vertices=np.asarray(data["template_vertices"], dtype=float),
            faces=np.asarray(data["faces"], dtype=np.int64),
            parents=np.asarray(data["parents"], dtype=np.int64),
            joint_regressor=_from_triplets(data["joint_regressor"]),
            blend_weights=_from_triplets(data["blend_weights"]),
            shape_basis=np.asarray(data["shape_basis"], dtype=float),
            pose_basis=np.asarray(data["pose_basis"], dtype=float) if data.get("pose_basis") is not None else None,
            symmetry_pairs=np.asarray(data.get("symmetry_pairs", []), dtype=np.int64),
            lap_weights=reg.get("laplacian"),
            var_weights=reg.get("model"),
            sym_weights=reg.get("symmetry"),
            joint_names=list(data.get("joint_names", [])),
            regions={k: np.asarray(v, dtype=np.int64) for k, v in data.get("regions", {}).items()},
        )
    except KeyError as exc:
        raise ModelError(f"model file is missing field {exc.args[0]!r}") from None
    model.validate()
    return model


def save_model(model: SkinnedModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> SkinnedModel:
    return model_from_dict(json.loads(Path(path).read_text()))
