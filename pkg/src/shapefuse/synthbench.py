"""Synthetic orbit sequences with known ground truth."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (PinholeCamera, PluckerRay, adjacency, load_cameras, rasterize_silhouette, ray_through_pixel, read_pgm,
                       render_vertex_colors, save_cameras, write_pgm)
from .meshio import read_obj, write_obj
from .model import SkinnedModel, rest_vertices, skin, vertex_normals
from .posefit import load_poses, save_poses
from .toymodel import a_pose, symmetry_partner

log = logging.getLogger(__name__)

MOTIONS = ("static", "swing")
COLOR_SCHEMES = ("none", "green", "two_tone", "regions")


class SpecError(ValueError):
    """Invalid sequence specification; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class SequenceSpec:
    """Orbit-camera capture of the body model.

    The camera circles the vertical axis through ``target`` at ``distance``
    meters; frame ``f`` sits at azimuth ``360 f / frames`` degrees. Offsets of
    the ground-truth body are a smooth random normal field with the given
    ``amplitude`` (meters) and ``smoothness`` (1-ring averaging rounds).
    """

    frames: int = 120
    distance: float = 2.5
    width: int = 1080
    height: int = 1080
    focal: float = 1000.0
    target: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    motion: str = "static"
    abduction_deg: float = 60.0
    swing_deg: float = 20.0
    amplitude: float = 0.0
    smoothness: int = 20
    beta: list | None = None
    colors: str = "none"
    seed: int = 0

    def validate(self) -> None:
        if not isinstance(self.frames, int) or self.frames < 1:
            raise SpecError("frames", "must be an integer >= 1")
        if not self.distance > 1.0:
            raise SpecError("distance", "camera distance must exceed the body radius (1 m)")
        for name in ("width", "height"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 8:
                raise SpecError(name, "must be an integer >= 8")
        if not self.focal > 0:
            raise SpecError("focal", "must be positive")
        if len(self.target) != 3:
            raise SpecError("target", "must be a 3-vector")
        if self.motion not in MOTIONS:
            raise SpecError("motion", f"must be one of {MOTIONS}")
        if self.amplitude < 0:
            raise SpecError("amplitude", "must be >= 0")
        if not isinstance(self.smoothness, int) or self.smoothness < 0:
            raise SpecError("smoothness", "must be an integer >= 0")
        if self.colors not in COLOR_SCHEMES:
            raise SpecError("colors", f"must be one of {COLOR_SCHEMES}")
        if not isinstance(self.seed, int):
            raise SpecError("seed", "must be an integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SequenceSpec:
        if not isinstance(data, dict):
            raise SpecError("<root>", "spec must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key in ("intrinsics", "units", "version"):
                continue
            if key not in known:
                raise SpecError(key, "unknown field")
            kwargs[key] = value
        ints = {"frames", "width", "height", "smoothness", "seed"}
        for key in ints & kwargs.keys():
            if isinstance(kwargs[key], bool) or not isinstance(kwargs[key], int):
                raise SpecError(key, f"expected an integer, got {kwargs[key]!r}")
        for key in ("distance", "focal", "abduction_deg", "swing_deg", "amplitude"):
            if key in kwargs and (isinstance(kwargs[key], bool) or not isinstance(kwargs[key], (int, float))):
                raise SpecError(key, f"expected a number, got {kwargs[key]!r}")
        spec = cls(**kwargs)
        spec.validate()
        return spec


def orbit_cameras(spec: SequenceSpec) -> list[PinholeCamera]:
    target = np.asarray(spec.target, dtype=float)
    cams = []
    for f in range(spec.frames):
        az = np.deg2rad(360.0 * f / spec.frames)
        eye = target + spec.distance * np.array([np.sin(az), 0.0, np.cos(az)])
        cams.append(PinholeCamera.look_at(eye, target, spec.focal, spec.width, spec.height))
    return cams


def motion_poses(model: SkinnedModel, spec: SequenceSpec) -> list[np.ndarray]:
    """Per-frame poses of the motion script."""
    base = a_pose(model, spec.abduction_deg)
    if spec.motion == "static":
        return [base.copy() for _ in range(spec.frames)]
    names = model.joint_names
    amp = np.deg2rad(spec.swing_deg)
    poses = []
    for f in range(spec.frames):
        phase = 2.0 * np.pi * f / max(spec.frames, 1)
        th = base.copy()
        for side, sign in (("L", 1.0), ("R", -1.0)):
            th[3 * names.index(f"{side}_shoulder")] += sign * amp * np.sin(phase)
            th[3 * names.index(f"{side}_elbow") + 1] += sign * 0.5 * amp * (1.0 - np.cos(phase))
            th[3 * names.index(f"{side}_hip")] -= sign * 0.5 * amp * np.sin(phase)
            th[3 * names.index(f"{side}_knee")] += 0.5 * amp * (1.0 - np.cos(phase))
        poses.append(th)
    return poses


def _ring_average(faces, n, values, rounds):
    adj = adjacency(faces, n)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    for _ in range(rounds):
        values = 0.5 * values + 0.5 * (adj @ values) / deg[:, None]
    return values


def smooth_offsets(model: SkinnedModel, amplitude: float, smoothness: int = 20, seed: int = 0,
                   beta=None) -> np.ndarray:
    """Smooth, mirror-symmetric normal-direction displacement field with max norm ``amplitude``."""
    n = model.n_vertices
    if amplitude == 0:
        return np.zeros((n, 3))
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((n, 1))
    xi = _ring_average(model.faces, n, xi, smoothness)[:, 0]
    partner = symmetry_partner(model)
    xi = 0.5 * (xi + xi[partner])
    base = rest_vertices(model, np.zeros(model.n_shape) if beta is None else beta)
    d = xi[:, None] * vertex_normals(base, model.faces)
    peak = np.linalg.norm(d, axis=1).max()
    return d * (amplitude / peak) if peak > 0 else d


def vertex_color_scheme(model: SkinnedModel, scheme: str) -> np.ndarray | None:
    v = model.template_vertices
    if scheme == "none":
        return None
    if scheme == "green":
        return np.tile([0.0, 1.0, 0.0], (len(v), 1))
    if scheme == "two_tone":
        return np.where(v[:, :1] >= 0, [[1.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]])
    if scheme == "regions":
        palette = np.array([[0.8, 0.6, 0.5], [0.2, 0.3, 0.8], [0.9, 0.9, 0.2], [0.2, 0.7, 0.3], [0.7, 0.2, 0.2]])
        label = np.zeros(len(v), dtype=int)
        for k, idx in enumerate(model.regions.values(), 1):
            label[np.asarray(idx, dtype=int)] = k % len(palette)
        return palette[label]
    raise ValueError(f"unknown color scheme {scheme!r}")


def contaminate_rays(rays: PluckerRay, camera: PinholeCamera, mask: np.ndarray, fraction: float,
                     rng: np.random.Generator) -> PluckerRay:
    """Replace ``fraction`` of the rays by rays through uniform random pixels.

    Pixels are drawn from the silhouette's bounding box grown by 10% per
    side, so most outliers pass through or near the body.
    """
    n = len(rays)
    k = int(round(fraction * n))
    if k == 0:
        return rays
    vs, us = np.nonzero(mask)
    lo = np.array([us.min(), vs.min()], dtype=float)
    hi = np.array([us.max(), vs.max()], dtype=float)
    pad = 0.1 * (hi - lo)
    pix = rng.uniform(lo - pad, hi + pad, size=(k, 2))
    bad = ray_through_pixel(camera, pix)
    idx = rng.choice(n, size=k, replace=False)
    direction = rays.direction.copy()
    moment = rays.moment.copy()
    direction[idx] = bad.direction
    moment[idx] = bad.moment
    return PluckerRay(direction, moment)


@dataclass
class Sequence:
    spec: SequenceSpec
    masks: list
    poses: list
    cameras: list
    beta: np.ndarray
    offsets: np.ndarray
    gt_vertices: np.ndarray
    faces: np.ndarray
    rgb: list | None = None
    colors: np.ndarray | None = None


def render_sequence(model: SkinnedModel, spec: SequenceSpec, beta=None, offsets=None, threads: int = 1) -> Sequence:
    """Render masks (and optional flat-colored RGB) of the ground-truth body."""
    spec.validate()
    if beta is None:
        beta = np.zeros(model.n_shape) if spec.beta is None else np.asarray(spec.beta, dtype=float)
    if offsets is None:
        offsets = smooth_offsets(model, spec.amplitude, spec.smoothness, spec.seed, beta)
    poses = motion_poses(model, spec)
    cams = orbit_cameras(spec)
    colors = vertex_color_scheme(model, spec.colors)

    def work(f):
        verts = skin(model, beta, poses[f], offsets)
        mask = rasterize_silhouette(verts, model.faces, cams[f])
        rgb = None
        if colors is not None:
            rgb = np.round(render_vertex_colors(verts, model.faces, colors, cams[f]) * 255).astype(np.uint8)
        return mask, rgb

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(work, range(spec.frames)))
    else:
        out = [work(f) for f in range(spec.frames)]
    return Sequence(spec, [o[0] for o in out], poses, cams, np.asarray(beta, dtype=float), offsets,
                    rest_vertices(model, beta, offsets), model.faces.copy(),
                    [o[1] for o in out] if colors is not None else None, colors)


def save_sequence(seq: Sequence, out_dir) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for f, mask in enumerate(seq.masks):
        write_pgm(out / "frames" / f"{f:04d}.pgm", mask)
        if seq.rgb is not None:
            Image.fromarray(seq.rgb[f]).save(out / "frames" / f"{f:04d}.png")
    save_poses(seq.poses, out / "poses.json")
    save_cameras(seq.cameras, out / "cameras.json")
    write_obj(out / "gt_mesh.obj", seq.gt_vertices, seq.faces, seq.colors)
    (out / "gt_offsets.json").write_text(json.dumps({"beta": seq.beta.tolist(), "offsets": seq.offsets.tolist()}))
    meta = seq.spec.to_dict()
    meta["intrinsics"] = {"focal": seq.spec.focal, "width": seq.spec.width, "height": seq.spec.height,
                          "cx": (seq.spec.width - 1) / 2.0, "cy": (seq.spec.height - 1) / 2.0}
    meta["units"] = "meters"
    (out / "spec.json").write_text(json.dumps(meta, indent=1))
    return out


@dataclass
class LoadedSequence:
    masks: list
    poses: list
    cameras: list
    rgb: list | None
    spec: dict | None = None
    gt_vertices: np.ndarray | None = None
    gt_faces: np.ndarray | None = None


def load_sequence(seq_dir) -> LoadedSequence:
    """Read a sequence directory; ground-truth files are optional."""
    root = Path(seq_dir)
    frames = sorted((root / "frames").glob("*.pgm"))
    if not frames:
        raise FileNotFoundError(f"{root / 'frames'}: no mask frames")
    for name in ("poses.json", "cameras.json"):
        if not (root / name).exists():
            raise FileNotFoundError(f"{root / name} is missing")
    masks = [read_pgm(p) for p in frames]
    poses = load_poses(root / "poses.json")
    cams = load_cameras(root / "cameras.json")
    if not len(masks) == len(poses) == len(cams):
        raise ValueError(f"{root}: {len(masks)} masks, {len(poses)} poses and {len(cams)} cameras")
    pngs = [p.with_suffix(".png") for p in frames]
    rgb = [np.asarray(Image.open(p).convert("RGB")) for p in pngs] if all(p.exists() for p in pngs) else None
    spec = json.loads((root / "spec.json").read_text()) if (root / "spec.json").exists() else None
    gv = gf = None
    if (root / "gt_mesh.obj").exists():
        gv, gf, _ = read_obj(root / "gt_mesh.obj")
    return LoadedSequence(masks, poses, cams, rgb, spec, gv, gf)
