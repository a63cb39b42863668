"""Silhouette-driven pose refinement on a mask pyramid."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import (EmptySilhouetteError, PinholeCamera, distance_transform, rasterize_silhouette,
                       rim_vertices)
from .model import SkinnedModel, skin, skin_jacobians
from .solver import dogleg_step

log = logging.getLogger(__name__)


@dataclass
class PoseFitConfig:
    """Weights and schedule for silhouette pose refinement.

    ``prior_mean`` defaults to the model's A-pose when left as None.
    ``reinit_factor`` triggers a restart from the zero pose when a frame's
    final energy exceeds that multiple of the median energy so far.
    """

    w_outside: float = 1.0
    w_inside: float = 1.0
    levels: int = 4
    iterations: int = 20
    prior_mean: list | None = None
    prior_precision: float = 1.0
    temporal_weight: float = 1.0
    reinit_factor: float = 3.0
    initial_radius: float = 0.05
    refine_translation: bool = True

    def validate(self) -> None:
        if self.w_outside < 0 or self.w_inside < 0:
            raise ValueError("silhouette weights must be nonnegative")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.prior_precision < 0 or self.temporal_weight < 0:
            raise ValueError("prior and temporal weights must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _default_prior(model: SkinnedModel) -> np.ndarray:
    from .toymodel import a_pose
    try:
        return a_pose(model)
    except ValueError:
        return np.zeros(model.n_pose)


@dataclass
class MaskLevel:
    """Observed mask and its distance fields at one pyramid level."""

    level: int
    mask: np.ndarray
    outside: np.ndarray  # C: distance to the observed foreground
    inside: np.ndarray  # C-bar: distance to the observed background
    camera: PinholeCamera  # projection into this level's pixel grid
    full_camera: PinholeCamera

    @property
    def signed(self) -> np.ndarray:
        return self.outside - self.inside


def downsample_mask(mask: np.ndarray, level: int) -> np.ndarray:
    """Gaussian-smoothed, block-averaged and re-thresholded mask."""
    mask = np.asarray(mask, dtype=bool)
    if level == 0:
        return mask.copy()
    s = 2**level
    h, w = mask.shape
    hh, ww = h // s, w // s
    smooth = ndimage.gaussian_filter(mask.astype(float), sigma=0.5 * s, mode="constant")
    block = smooth[:hh * s, :ww * s].reshape(hh, s, ww, s).mean(axis=(1, 3))
    return block >= 0.5


def build_pyramid(mask: np.ndarray, camera: PinholeCamera, levels: int) -> list[MaskLevel]:
    """Levels ordered fine (0) to coarse."""
    out = []
    for lv in range(levels):
        m = downsample_mask(mask, lv)
        cam = camera if lv == 0 else camera.scaled(1.0 / 2**lv)
        cam = PinholeCamera(cam.fx, cam.fy, cam.cx, cam.cy, cam.R, cam.t, m.shape[1], m.shape[0])
        if not m.any():
            raise EmptySilhouetteError(f"observed mask vanishes at pyramid level {lv}")
        out.append(MaskLevel(lv, m, distance_transform(m),
                             distance_transform(m, inverse=True) if not m.all() else np.zeros(m.shape), cam,
                             camera))
    return out


def render_level(vertices: np.ndarray, faces: np.ndarray, level: MaskLevel) -> np.ndarray:
    """Model silhouette rendered at full resolution and reduced like the observation."""
    return downsample_mask(rasterize_silhouette(vertices, faces, level.full_camera), level.level)


def _bilinear(field_: np.ndarray, uv: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(field_, [uv[:, 1], uv[:, 0]], order=1, mode="nearest")


def silhouette_energy_level(rendered: np.ndarray, level: MaskLevel, w_outside: float, w_inside: float) -> float:
    """Pixel sum of ``w_o I C + w_i (1 - I) C-bar``."""
    return float(w_outside * level.outside[rendered].sum() + w_inside * level.inside[~rendered].sum())


@dataclass
class SilhouetteLinearization:
    energy: float
    gradient: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray
    rendered: np.ndarray | None


def _linearize(model, beta, theta, offsets, level: MaskLevel, w_outside, w_inside) -> SilhouetteLinearization:
    """Silhouette energy plus a Gauss-Newton model from boundary rim vertices.

    A rendered boundary segment of length ``ds`` lying at signed distance
    ``s`` from the observed contour costs about ``w ds s^2 / 2``, so every rim
    vertex on the rendered contour contributes a residual ``sqrt(w ds / 2) s``
    whose derivative follows the vertex motion through the projection.
    """
    cam = level.camera
    n_pose = model.n_pose
    verts = skin(model, beta, theta, offsets)
    try:
        rendered = render_level(verts, model.faces, level)
    except EmptySilhouetteError:
        return SilhouetteLinearization(np.inf, np.zeros(n_pose), np.zeros(0), np.zeros((0, n_pose)), None)
    energy = silhouette_energy_level(rendered, level, w_outside, w_inside)
    if energy == 0.0 or (w_outside == 0 and w_inside == 0) or not rendered.any():
        return SilhouetteLinearization(energy, np.zeros(n_pose), np.zeros(0), np.zeros((0, n_pose)), rendered)
    rim = rim_vertices(verts, model.faces, cam.center)
    uv, z = cam.project(verts)
    inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 1] >= 0) & (uv[:, 0] <= cam.width - 1) & (uv[:, 1] <= cam.height - 1)
    cand = np.flatnonzero(rim & inside)
    if cand.size == 0:
        return SilhouetteLinearization(energy, np.zeros(n_pose), np.zeros(0), np.zeros((0, n_pose)), rendered)
    ren_out = distance_transform(rendered)
    ren_in = distance_transform(rendered, inverse=True) if not rendered.all() else np.zeros(rendered.shape)
    near = np.abs(_bilinear(ren_out - ren_in, uv[cand])) <= 1.0
    cand = cand[near]
    if cand.size == 0:
        return SilhouetteLinearization(energy, np.zeros(n_pose), np.zeros(0), np.zeros((0, n_pose)), rendered)
    border = rendered & ~ndimage.binary_erosion(rendered, structure=np.ones((3, 3), bool), border_value=0)
    ds = border.sum() / cand.size
    signed = level.signed
    s = _bilinear(signed, uv[cand])
    gy, gx = np.gradient(signed)
    grad_s = np.stack([_bilinear(gx, uv[cand]), _bilinear(gy, uv[cand])], axis=1)
    w = np.where(s > 0, w_outside, w_inside)
    scale = np.sqrt(w * ds / 2.0)
    jac = skin_jacobians(model, beta, theta, offsets, with_shape=False)
    d_uv = np.einsum("nab,nbp->nap", cam.project_jacobian(verts[cand]), jac.d_pose[cand])
    rows = scale[:, None] * np.einsum("na,nap->np", grad_s, d_uv)
    res = scale * s
    return SilhouetteLinearization(energy, rows.T @ res, res, rows, rendered)


def silhouette_energy(model: SkinnedModel, beta, theta, offsets, mask, camera: PinholeCamera, level: int = 0,
                      w_outside: float = 1.0, w_inside: float = 1.0) -> tuple[float, np.ndarray]:
    """Silhouette energy at a pyramid level and its boundary-motion gradient w.r.t. the pose.

    Returns ``inf`` with a zero gradient when the model renders no pixels.
    """
    lv = build_pyramid(mask, camera, level + 1)[level]
    lin = _linearize(model, np.asarray(beta, float), np.asarray(theta, float), offsets, lv, w_outside, w_inside)
    return lin.energy, lin.gradient


def silhouette_iou(model: SkinnedModel, beta, theta, offsets, mask, camera: PinholeCamera) -> float:
    try:
        ren = rasterize_silhouette(skin(model, beta, theta, offsets), model.faces, camera)
    except EmptySilhouetteError:
        return 0.0
    mask = np.asarray(mask, dtype=bool)
    union = (ren | mask).sum()
    return float((ren & mask).sum() / union) if union else 1.0


@dataclass
class PoseFitResult:
    theta: np.ndarray
    energy: float
    failed: bool = False
    reinitialized: bool = False
    level_energies: list = field(default_factory=list)


class _Objective:
    """Silhouette energy plus Gaussian prior and temporal terms at one level."""

    def __init__(self, model, beta, offsets, level, config, prior_mean, theta_prev, free):
        self.model, self.beta, self.offsets, self.level = model, beta, offsets, level
        self.config = config
        self.prior_mean = prior_mean
        self.theta_prev = theta_prev
        self.free = free

    def regularizer(self, theta):
        """Residuals and Jacobian (rows over the free variables) of prior and temporal terms."""
        rot = np.zeros(self.model.n_pose, dtype=bool)
        rot[:3 * self.model.n_joints] = True
        res, jac = [], []
        eye = np.eye(self.model.n_pose)[:, self.free]
        if self.config.prior_precision > 0:
            a = np.sqrt(self.config.prior_precision)
            res.append(a * (theta - self.prior_mean)[rot])
            jac.append(a * eye[rot])
        if self.theta_prev is not None and self.config.temporal_weight > 0:
            a = np.sqrt(self.config.temporal_weight)
            res.append(a * (theta - self.theta_prev))
            jac.append(a * eye)
        if not res:
            return np.zeros(0), np.zeros((0, int(self.free.sum())))
        return np.concatenate(res), np.vstack(jac)

    def evaluate(self, theta, linearize: bool):
        cfg = self.config
        if linearize:
            lin = _linearize(self.model, self.beta, theta, self.offsets, self.level, cfg.w_outside, cfg.w_inside)
            e_sil = lin.energy
        else:
            try:
                ren = render_level(skin(self.model, self.beta, theta, self.offsets), self.model.faces, self.level)
                e_sil = silhouette_energy_level(ren, self.level, cfg.w_outside, cfg.w_inside)
            except EmptySilhouetteError:
                e_sil = np.inf
            lin = None
        r_reg, j_reg = self.regularizer(theta)
        total = e_sil + 0.5 * float(r_reg @ r_reg)
        if not linearize:
            return total, None
        res = np.concatenate([lin.residuals, r_reg])
        jac = np.vstack([lin.jacobian[:, self.free], j_reg])
        return total, (res, jac)


def _descend(obj: _Objective, theta, iterations, radius):
    energy, lin = obj.evaluate(theta, True)
    if not np.isfinite(energy):
        return theta, energy
    for _ in range(iterations):
        res, jac = lin
        if res.size == 0:
            break
        g = jac.T @ res
        if not np.any(g):
            break
        jtj = jac.T @ jac
        try:
            h_gn = np.linalg.solve(jtj + 1e-9 * np.eye(len(g)), -g)
        except np.linalg.LinAlgError:
            h_gn = None
        jg = jac @ g
        accepted = False
        for _ in range(6):
            h, _ = dogleg_step(g, float(jg @ jg), h_gn, radius)
            trial = theta.copy()
            trial[obj.free] += h
            e_trial, _ = obj.evaluate(trial, False)
            if e_trial < energy:
                theta = trial
                energy, lin = obj.evaluate(theta, True)
                radius = min(2.0 * radius, 1.0)
                accepted = True
                break
            radius *= 0.25
        if not accepted or energy == 0.0:
            break
    return theta, energy


def refine_pose(model: SkinnedModel, beta, offsets, theta_init, theta_prev, mask, camera: PinholeCamera,
                config: PoseFitConfig | None = None, reference_energy: float | None = None) -> PoseFitResult:
    """Coarse-to-fine silhouette fit of one frame's pose.

    ``reference_energy`` (typically the running median of frame energies)
    enables the restart from the zero pose when the result is ``reinit_factor``
    times worse; the better of the two runs is kept.
    """
    config = config or PoseFitConfig()
    config.validate()
    beta = np.asarray(beta, dtype=float)
    theta_init = np.asarray(theta_init, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return PoseFitResult(theta_init.copy(), np.inf, failed=True)
    pyramid = build_pyramid(mask, camera, config.levels)
    prior = np.asarray(config.prior_mean, dtype=float) if config.prior_mean is not None else _default_prior(model)
    prev = None if theta_prev is None else np.asarray(theta_prev, dtype=float)
    free = np.ones(model.n_pose, dtype=bool)
    if not config.refine_translation:
        free[3 * model.n_joints:] = False

    def run(start):
        theta = start.copy()
        energies = []
        for lv in reversed(range(config.levels)):
            obj = _Objective(model, beta, offsets, pyramid[lv], config, prior, prev, free)
            theta, e = _descend(obj, theta, config.iterations, config.initial_radius)
            energies.append(e)
        return theta, energies

    theta, energies = run(theta_init)
    result = PoseFitResult(theta, energies[-1], failed=not np.isfinite(energies[-1]), level_energies=energies)
    if result.failed:
        result.theta = theta_init.copy()
    if reference_energy is not None and (result.failed or result.energy > config.reinit_factor * reference_energy):
        zero = np.zeros_like(theta_init)
        zero[3 * model.n_joints:] = theta_init[3 * model.n_joints:]
        theta2, energies2 = run(zero)
        if np.isfinite(energies2[-1]) and (result.failed or energies2[-1] < result.energy):
            result = PoseFitResult(theta2, energies2[-1], reinitialized=True, level_energies=energies2)
        else:
            result.reinitialized = True
    return result


def refine_sequence(model: SkinnedModel, beta, offsets, poses_init, masks, cameras,
                    config: PoseFitConfig | None = None) -> tuple[list[np.ndarray], list[PoseFitResult]]:
    """Refine frames in order, chaining each result into the next frame's temporal term."""
    config = config or PoseFitConfig()
    results = []
    prev = None
    finals: list[float] = []
    for f, (theta0, mask, cam) in enumerate(zip(poses_init, masks, cameras)):
        ref = float(np.median(finals)) if len(finals) >= 3 else None
        res = refine_pose(model, beta, offsets, theta0, prev, mask, cam, config, reference_energy=ref)
        if res.failed:
            log.warning("frame %d: pose refinement failed, keeping the initial pose", f)
        elif res.reinitialized:
            log.info("frame %d: tracker re-initialized", f)
        results.append(res)
        if np.isfinite(res.energy):
            finals.append(res.energy)
        prev = res.theta
    return [r.theta for r in results], results


def save_poses(poses, path) -> None:
    """Poses as JSON: per frame, per-joint axis-angle triples plus the root translation."""
    out = []
    for theta in poses:
        theta = np.asarray(theta, dtype=float)
        out.append({"rotations": theta[:-3].reshape(-1, 3).tolist(), "translation": theta[-3:].tolist()})
    Path(path).write_text(json.dumps(out, indent=1))


def load_poses(path) -> list[np.ndarray]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValueError("poses file must hold a list of frames")
    poses = []
    for i, frame in enumerate(data):
        try:
            rot = np.asarray(frame["rotations"], dtype=float).reshape(-1)
            trans = np.asarray(frame["translation"], dtype=float).reshape(3)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"poses frame {i}: {exc}") from exc
        poses.append(np.concatenate([rot, trans]))
    return poses
