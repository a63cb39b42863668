"""Command-line entry point: ``shapefuse synth|reconstruct|refine|texture|evaluate``.

Settings resolve as command-line flag > ``--config`` file > preset > built-in
default. Exit status is 0 on success, 2 for input or configuration errors and
3 for numerical failures (a diagnostic report is still written).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .consensus import PRESETS, ConsensusAbort, EnergyConfig, optimize_consensus, preset
from .geometry import EmptySilhouetteError
from .meshio import read_obj, write_obj
from .metrics import align, bidirectional_error, error_heatmap
from .model import ModelError, load_model, rest_vertices, save_model
from .posefit import PoseFitConfig, refine_sequence as refine_poses, save_poses
from .refine_texture import RefineConfig, backproject_colors, fuse_texture, refine_sequence
from .solver import EnergyIncreaseError
from .synthbench import SequenceSpec, SpecError, load_sequence, render_sequence, save_sequence
from .toymodel import ToyModelSpec, generate_toy_model
from .unpose import build_unposed_cloud, save_cloud

log = logging.getLogger("shapefuse")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "SHAPEFUSE_THREADS"


class InputError(Exception):
    """Bad paths, files or configuration (exit status 2)."""


class JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"time": round(record.created, 3), "level": record.levelname,
                           "logger": record.name, "message": record.getMessage()})


def _setup_logging(args) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if args.log_json else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)


# ---------------------------------------------------------------------------
# configuration


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} {p} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {p}: invalid JSON ({exc})") from exc


def _apply(obj, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in names:
            raise InputError(f"config [{section}]: unknown setting {key!r}")
        setattr(obj, key, value)
    return obj


ENERGY_FLAGS = ("w_lp", "w_var", "w_sym", "sigma_gm", "rounds", "inner_iterations", "height", "w_height",
                "d_max", "max_points")
REFINE_FLAGS = ("m", "w_neigh", "w_last")


def resolve_config(args) -> dict:
    """Energy, pose-fit and refinement settings after applying every layer."""
    file_cfg = _read_json(args.config, "config file") if getattr(args, "config", None) else {}
    if not isinstance(file_cfg, dict):
        raise InputError("config file must hold a JSON object")
    unknown = set(file_cfg) - {"preset", "energy", "posefit", "refine", "threads", "seed"}
    if unknown:
        raise InputError(f"config file: unknown section(s) {sorted(unknown)}")
    name = getattr(args, "preset", None) or file_cfg.get("preset") or "clothed"
    if name not in PRESETS:
        raise InputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    energy = preset(name)
    _apply(energy, file_cfg.get("energy", {}), "energy")
    posefit = _apply(PoseFitConfig(), file_cfg.get("posefit", {}), "posefit")
    refine = _apply(RefineConfig(), file_cfg.get("refine", {}), "refine")
    for key in ENERGY_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(energy, key, value)
    if getattr(args, "all_vertices", False):
        energy.rim_only = False
    for key in REFINE_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(refine, key, value)
    threads = args.threads if args.threads is not None else file_cfg.get("threads")
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    if int(threads) < 1:
        raise InputError("threads must be >= 1")
    energy.threads = int(threads)
    seed = args.seed if getattr(args, "seed", None) is not None else file_cfg.get("seed", 0)
    try:
        energy.validate()
        posefit.validate()
        refine.validate()
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return {"preset": name, "energy": energy, "posefit": posefit, "refine": refine, "threads": int(threads),
            "seed": int(seed)}


def _load_model(path):
    if path is None:
        return generate_toy_model(ToyModelSpec())
    p = Path(path)
    if not p.exists():
        raise InputError(f"model file {p} does not exist")
    try:
        return load_model(p)
    except (ModelError, KeyError, ValueError) as exc:
        raise InputError(f"model file {p}: {exc}") from exc


def _model_for(args):
    """Explicit ``--model``, else the sequence's own model.json, else the toy model."""
    if args.model:
        return _load_model(args.model)
    own = Path(args.sequence) / "model.json"
    return _load_model(own if own.exists() else None)


def _load_sequence(path):
    p = Path(path)
    if not p.is_dir():
        raise InputError(f"sequence directory {p} does not exist")
    try:
        return load_sequence(p)
    except (FileNotFoundError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def _load_consensus(path):
    p = Path(path)
    if p.is_dir():
        p = p / "consensus.json"
    data = _read_json(p, "consensus file")
    try:
        return np.asarray(data["beta"], dtype=float), np.asarray(data["offsets"], dtype=float)
    except KeyError as exc:
        raise InputError(f"consensus file {p}: missing {exc}") from exc


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def perturb_poses(poses, n_joints: int, degrees: float, seed: int) -> list[np.ndarray]:
    """Rotate every joint by ``degrees`` about a random axis (seeded per frame)."""
    from .model import rodrigues, rotation_to_rotvec
    out = []
    for f, theta in enumerate(poses):
        rng = np.random.default_rng([seed, f])
        th = np.array(theta, dtype=float)
        for k in range(n_joints):
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            rot = rodrigues(np.deg2rad(degrees) * axis) @ rodrigues(th[3 * k:3 * k + 3])
            th[3 * k:3 * k + 3] = rotation_to_rotvec(rot)
        out.append(th)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    data = _read_json(args.spec, "sequence spec") if args.spec else {}
    for key in ("frames", "amplitude", "colors", "motion"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        spec = SequenceSpec.from_dict(data)
    except SpecError as exc:
        raise InputError(f"invalid sequence spec: field {exc.field!r}: {exc}") from exc
    except TypeError as exc:
        raise InputError(f"invalid sequence spec: {exc}") from exc
    model = _load_model(args.model)
    threads = args.threads or int(os.environ.get(THREADS_ENV, "1") or 1)
    seq = render_sequence(model, spec, threads=threads)
    out = save_sequence(seq, args.out)
    save_model(model, out / "model.json")
    log.info("wrote %d frames to %s", spec.frames, out)
    return EXIT_OK


def _evaluate(recon_v, recon_f, gt_v, gt_f, out: Path, prefix: str = "") -> dict:
    transform = align(recon_v, gt_v, gt_f)
    aligned = transform.apply(recon_v)
    err = bidirectional_error(aligned, recon_f, gt_v, gt_f)
    from .plotting import error_histogram, heatmap_figure
    write_obj(out / f"{prefix}heatmap.obj", aligned, recon_f, error_heatmap(err.recon_to_gt))
    heatmap_figure(out / f"{prefix}heatmap.png", aligned, recon_f, err.recon_to_gt,
                   title=f"mean {err.formatted()} mm")
    error_histogram(out / f"{prefix}histogram.png", err.recon_to_gt, err.gt_to_recon)
    result = err.to_dict()
    result["scale"] = transform.scale
    return result


def cmd_reconstruct(args) -> int:
    cfg = resolve_config(args)
    energy: EnergyConfig = cfg["energy"]
    seq = _load_sequence(args.sequence)
    model = _model_for(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    beta0 = np.zeros(model.n_shape) if args.beta is None else np.asarray(args.beta, dtype=float)
    poses = seq.poses
    if args.pose_noise:
        poses = perturb_poses(poses, model.n_joints, args.pose_noise, cfg["seed"])
    report = {"version": __version__, "preset": cfg["preset"], "poses": args.poses, "seed": cfg["seed"],
              "threads": cfg["threads"], "energy_config": energy.to_dict()}
    t0 = time.time()
    if args.poses == "refine":
        poses, results = refine_poses(model, beta0, None, poses, seq.masks, seq.cameras, cfg["posefit"])
        report["posefit"] = {"failed": [i for i, r in enumerate(results) if r.failed],
                             "reinitialized": [i for i, r in enumerate(results) if r.reinitialized]}
        save_poses(poses, out / "poses_refined.json")
    try:
        cloud = build_unposed_cloud(model, beta0, poses, seq.masks, seq.cameras, energy.unpose_config())
    except EmptySilhouetteError as exc:
        raise InputError(str(exc)) from exc
    if args.save_cloud:
        save_cloud(cloud, out / "cloud.upcl")
    try:
        result = optimize_consensus(model, beta0, cloud, energy, poses=poses, masks=seq.masks, cameras=seq.cameras)
    except ConsensusAbort as exc:
        report["error"] = str(exc)
        report["consensus"] = exc.report
        _write_json(out / "report.json", report)
        log.error("consensus aborted: %s", exc)
        return EXIT_NUMERIC
    except EnergyIncreaseError as exc:
        report["error"] = f"energy increase: {exc}"
        _write_json(out / "report.json", report)
        log.error("%s", report["error"])
        return EXIT_NUMERIC
    verts = result.vertices(model)
    write_obj(out / "consensus.obj", verts, model.faces)
    _write_json(out / "consensus.json", {"beta": result.beta, "offsets": result.offsets})
    report["consensus"] = result.report
    report["seconds"] = round(time.time() - t0, 3)
    from .plotting import energy_figure
    energy_figure(out / "energy.png", result.report)
    if seq.gt_vertices is not None:
        report["evaluation"] = _evaluate(verts, model.faces, seq.gt_vertices, seq.gt_faces, out)
        log.info("mean bidirectional error %s mm", report["evaluation"]["formatted"])
    _write_json(out / "report.json", report)
    return EXIT_OK


def _texture(model, beta, sample_offsets, mesh_offsets, seq, out: Path, threads: int) -> dict:
    samples = backproject_colors(model, beta, sample_offsets, seq.poses, seq.rgb, seq.cameras, threads=threads)
    try:
        fused = fuse_texture(samples, model.faces)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    write_obj(out / "textured.obj", rest_vertices(model, beta, mesh_offsets), model.faces, fused.colors)
    _write_json(out / "coverage.json", fused.coverage_report())
    return {"covered": int((fused.coverage > 0).sum()), "inpainted": int(fused.inpainted.sum())}


def cmd_refine(args) -> int:
    cfg = resolve_config(args)
    seq = _load_sequence(args.sequence)
    model = _model_for(args)
    beta, offsets = _load_consensus(args.consensus)
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    refined = refine_sequence(model, beta, offsets, seq.poses, seq.cameras, masks=seq.masks,
                              energy=cfg["energy"], config=cfg["refine"])
    for f, d in enumerate(refined):
        write_obj(out / "frames" / f"{f:04d}.obj", rest_vertices(model, beta, d), model.faces)
    _write_json(out / "refined_offsets.json", {"beta": beta, "offsets": [d for d in refined]})
    report = {"frames": len(refined), "refine_config": cfg["refine"].to_dict(),
              "max_drift_m": [float(np.linalg.norm(d - offsets, axis=1).max()) for d in refined]}
    if seq.rgb is not None:
        report["texture"] = _texture(model, beta, refined, offsets, seq, out, cfg["threads"])
    _write_json(out / "report.json", report)
    return EXIT_OK


def cmd_texture(args) -> int:
    cfg = resolve_config(args)
    seq = _load_sequence(args.sequence)
    if seq.rgb is None:
        raise InputError(f"{args.sequence}: no RGB frames (frames/####.png) to texture from")
    model = _model_for(args)
    beta, offsets = _load_consensus(args.consensus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = _texture(model, beta, offsets, offsets, seq, out, cfg["threads"])
    _write_json(out / "report.json", report)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    for p in (args.reconstruction, args.ground_truth):
        if not Path(p).exists():
            raise InputError(f"mesh {p} does not exist")
    try:
        rv, rf, _ = read_obj(args.reconstruction)
        gv, gf, _ = read_obj(args.ground_truth)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = _evaluate(rv, rf, gv, gf, out)
    _write_json(out / "report.json", result)
    print(f"{result['formatted']} mm")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log-json", action="store_true", help="structured JSON-lines logging")
    p.add_argument("-v", "--verbose", action="store_true")


def _config_flags(p):
    p.add_argument("--config", help="JSON config file with preset/energy/posefit/refine sections")
    p.add_argument("--preset", help=f"one of {sorted(PRESETS)}")
    p.add_argument("--model", help="model JSON file (default: <sequence>/model.json or the toy model)")
    for key in ENERGY_FLAGS:
        kind = int if key in ("rounds", "inner_iterations", "max_points") else float
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None)
    p.add_argument("--all-vertices", action="store_true",
                   help="associate rays with any vertex instead of the posed rim only")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shapefuse", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic orbit sequence")
    p.add_argument("--spec", help="sequence spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--model")
    p.add_argument("--frames", type=int)
    p.add_argument("--amplitude", type=float, help="ground-truth offset amplitude in meters")
    p.add_argument("--colors", help="none | green | two_tone | regions")
    p.add_argument("--motion", help="static | swing")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reconstruct", help="estimate the consensus shape of a sequence")
    p.add_argument("sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--poses", choices=("gt", "refine"), default="gt")
    p.add_argument("--pose-noise", type=float, default=0.0, help="perturb every joint by this many degrees")
    p.add_argument("--beta", type=float, nargs="+")
    p.add_argument("--save-cloud", action="store_true", help="write the unposed rays sidecar")
    _config_flags(p)
    _common(p)
    p.set_defaults(func=cmd_reconstruct)

    for name, func, helptext in (("refine", cmd_refine, "per-frame refinement (+ texture when RGB exists)"),
                                 ("texture", cmd_texture, "fuse per-vertex colors onto the consensus shape")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("sequence")
        p.add_argument("--consensus", required=True, help="consensus.json or the reconstruct output directory")
        p.add_argument("--out", required=True)
        if name == "refine":
            for key in REFINE_FLAGS:
                p.add_argument("--" + key.replace("_", "-"), dest=key, type=int if key == "m" else float)
        _config_flags(p)
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="align and score a reconstruction against ground truth")
    p.add_argument("reconstruction")
    p.add_argument("ground_truth")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args)
    try:
        return args.func(args)
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (ConsensusAbort, EnergyIncreaseError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
