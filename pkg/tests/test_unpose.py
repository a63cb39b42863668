import numpy as np
import pytest

from shapefuse.geometry import EmptySilhouetteError, PluckerRay, point_line_distance
from shapefuse.model import forward_kinematics, rest_vertices, skin
from shapefuse.synthbench import SequenceSpec, render_sequence
from shapefuse.toymodel import a_pose
from shapefuse.unpose import (UnposeConfig, associate_rays, build_unposed_cloud, frame_rays, load_cloud,
                              save_cloud, unpose_ray, unpose_rays)

from conftest import chain_model


def random_rays_through(points, rng):
    d = rng.normal(size=points.shape)
    return PluckerRay.from_point_direction(points, d)


def unposing_residuals(model, n_poses, per_pose, seed, offsets_scale=0.01):
    """Distance from unposed rays to the canonical vertices they were cast through."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_poses):
        beta = rng.normal(size=model.n_shape) * 0.3
        theta = rng.normal(size=model.n_pose) * 0.5
        d = rng.normal(size=(model.n_vertices, 3)) * offsets_scale
        posed = skin(model, beta, theta, d)
        idx = rng.choice(model.n_vertices, per_pose, replace=False)
        rays = random_rays_through(posed[idx], rng)
        unposed, ok = unpose_rays(model, beta, theta, idx, rays)
        assert ok.all()
        out.append(point_line_distance(unposed, rest_vertices(model, beta, d)[idx]))
    return np.concatenate(out)


def test_round_trip_unposing_many_draws(toy):
    dist = unposing_residuals(toy, 100, 100, seed=0)
    assert len(dist) == 10_000
    assert dist.max() <= 1e-9


def test_single_bone_unposing_preserves_distances(toy):
    rng = np.random.default_rng(1)
    single = np.flatnonzero(toy.weights.max(axis=1) == 1.0)
    assert single.size > 100
    beta = np.zeros(toy.n_shape)
    for _ in range(20):
        theta = rng.normal(size=toy.n_pose) * 0.5
        i = rng.choice(single)
        posed = skin(toy, beta, theta)
        ray = PluckerRay.from_point_direction(posed[i] + rng.normal(size=3) * 0.05, rng.normal(size=3))
        out = unpose_ray(toy, beta, theta, i, ray)
        # every posed point rigidly attached to the bone keeps its distance to the line
        k = int(np.argmax(toy.weights[i]))
        g = forward_kinematics(toy, beta, theta).matrices[k]
        pts = rng.normal(size=(10, 3))
        posed_pts = pts @ g[:3, :3].T + g[:3, 3]
        assert np.allclose(point_line_distance(out, pts), point_line_distance(ray, posed_pts), atol=1e-9)


def test_unpose_identity_pose_returns_the_ray(toy):
    rng = np.random.default_rng(2)
    ray = PluckerRay.from_point_direction(rng.normal(size=3), rng.normal(size=3))
    out = unpose_ray(toy, np.zeros(toy.n_shape), toy.zero_pose(), 17, ray)
    assert np.allclose(out.direction, ray.direction) and np.allclose(out.moment, ray.moment)


def test_unpose_rigid_bone_matches_two_point_oracle():
    w = np.array([[1, 0], [0, 1], [0, 1.0]])
    m = chain_model(w, joints=((0, 0, 0), (0.5, 0, 0)))
    theta = np.r_[0, 0, 0.3, 0.4, -0.2, 1.1, 0.1, 0.2, 0.3]
    g = forward_kinematics(m, np.zeros(2), theta).matrices[1]
    p0, p1 = np.array([0.1, 0.2, 0.3]), np.array([-0.4, 0.5, 0.9])
    ray = PluckerRay.from_points(p0, p1)
    inv = np.linalg.inv(g)
    ref = PluckerRay.from_points(inv[:3, :3] @ p0 + inv[:3, 3], inv[:3, :3] @ p1 + inv[:3, 3])
    out = unpose_ray(m, np.zeros(2), theta, 2, ray)
    assert np.allclose(out.direction, ref.direction) and np.allclose(out.moment, ref.moment)


# -- association -------------------------------------------------------------

def test_rays_through_vertices_match_their_generators():
    rng = np.random.default_rng(3)
    v = rng.uniform(-1, 1, size=(50, 3))
    idx = np.arange(0, 50, 5)
    rays = PluckerRay.from_point_direction(v[idx], np.tile([0, 0, 1.0], (10, 1)) + rng.normal(size=(10, 3)) * 1e-3)
    a = associate_rays(v, rays, 0.05)
    # other vertices may be near a ray only by chance; generators sit at 0
    assert np.allclose(a.distance, 0, atol=1e-12)
    assert np.array_equal(a.vertex, idx) or np.allclose(point_line_distance(rays[a.ray_index], v[a.vertex]), 0)


def test_far_ray_dropped_and_ties_go_to_lower_index():
    v = np.array([[0.0, 0.0, 0.0], [0.02, 0.0, 0.0], [-0.02, 0.0, 0.0], [5.0, 5.0, 0.0]])
    rays = PluckerRay(np.array([[0, 0, 1.0], [0, 0, 1.0], [0, 0, 1.0]]),
                      np.cross([[0.019, 0, 0], [0.0, 0, 0], [0, 3.0, 0]], [[0, 0, 1.0]] * 3))
    a = associate_rays(v, rays, 0.05)
    assert list(a.ray_index) == [0, 1]
    assert list(a.vertex) == [1, 0]
    # exact tie between vertices 1 and 2
    tie = PluckerRay.from_point_direction([[0.0, 0.5, 0.0]], [[0, 0, 1.0]])
    v2 = np.array([[0.5, 0, 0], [0.0, 0.75, 0.0], [0.0, 0.25, 0.0]])
    b = associate_rays(v2, tie, 0.5)
    assert list(b.vertex) == [1]
    b = associate_rays(v2[[0, 2, 1]], tie, 0.5)
    assert list(b.vertex) == [1]


def test_association_bruteforce(small_toy):
    rng = np.random.default_rng(4)
    v = small_toy.template_vertices
    rays = PluckerRay.from_point_direction(rng.uniform(-0.5, 0.5, size=(300, 3)), rng.normal(size=(300, 3)))
    a = associate_rays(v, rays, 10.0)
    d = np.linalg.norm(np.cross(v[:, None], rays.direction[None]) - rays.moment[None], axis=-1)
    assert np.array_equal(a.vertex, d.argmin(axis=0))
    assert np.allclose(a.distance, d.min(axis=0))


def test_rim_only_candidates(small_toy):
    from shapefuse.geometry import PinholeCamera, rim_vertices
    cam = PinholeCamera.look_at([0, 0, 2.5], [0, 0, 0], 1000, 1080, 1080)
    v = small_toy.template_vertices
    rim = rim_vertices(v, small_toy.faces, cam.center)
    rng = np.random.default_rng(5)
    rays = PluckerRay.from_point_direction(v[rng.choice(len(v), 200)], rng.normal(size=(200, 3)))
    a = associate_rays(v, rays, 0.05, rim_only=True, camera=cam, faces=small_toy.faces)
    assert rim[a.vertex].all()
    with pytest.raises(ValueError):
        associate_rays(v, rays, 0.05, rim_only=True)


# -- clouds ------------------------------------------------------------------

def test_canonical_frame_cloud_keeps_the_rays(small_toy):
    seq = render_sequence(small_toy, SequenceSpec(frames=1, abduction_deg=90.0, width=270, height=270,
                                                   focal=250.0))
    assert np.allclose(seq.poses[0], 0)
    cloud = build_unposed_cloud(small_toy, np.zeros(small_toy.n_shape), seq.poses, seq.masks, seq.cameras)
    assert len(cloud) > 0
    assert np.allclose(cloud.direction, cloud.orig_direction, atol=1e-12)
    assert np.allclose(cloud.moment, cloud.orig_moment, atol=1e-12)


def test_orbit_survival_rate(toy):
    seq = render_sequence(toy, SequenceSpec(frames=120))
    cloud = build_unposed_cloud(toy, np.zeros(toy.n_shape), seq.poses, seq.masks, seq.cameras,
                                UnposeConfig(d_max=0.05))
    assert len(cloud) >= 0.95 * cloud.cast.sum()


def test_duplicate_frames_duplicate_correspondences(small_toy, tmp_path):
    seq = render_sequence(small_toy, SequenceSpec(frames=2, width=270, height=270, focal=250.0))
    one = build_unposed_cloud(small_toy, np.zeros(small_toy.n_shape), seq.poses[:1], seq.masks[:1], seq.cameras[:1])
    two = build_unposed_cloud(small_toy, np.zeros(small_toy.n_shape), seq.poses[:1] * 2, seq.masks[:1] * 2,
                              seq.cameras[:1] * 2)
    assert len(two) == 2 * len(one)
    assert np.array_equal(two.vertex, np.r_[one.vertex, one.vertex])
    save_cloud(two, tmp_path / "c.bin")
    back = load_cloud(tmp_path / "c.bin")
    assert np.array_equal(back.direction, two.direction) and np.array_equal(back.frame, two.frame)
    assert back.drops == two.drops


def test_empty_frames_are_skipped(small_toy):
    seq = render_sequence(small_toy, SequenceSpec(frames=2, width=270, height=270, focal=250.0))
    masks = [seq.masks[0], np.zeros_like(seq.masks[1])]
    cloud = build_unposed_cloud(small_toy, np.zeros(small_toy.n_shape), seq.poses, masks, seq.cameras)
    assert cloud.skipped == [1] and cloud.counts[1] == 0
    with pytest.raises(EmptySilhouetteError):
        build_unposed_cloud(small_toy, np.zeros(small_toy.n_shape), seq.poses, [masks[1]] * 2, seq.cameras)


def test_subpixel_rays_move_outward():
    yy, xx = np.mgrid[:200, :200]
    mask = (xx - 100) ** 2 + (yy - 100) ** 2 <= 60 ** 2
    from shapefuse.geometry import PinholeCamera
    cam = PinholeCamera(100, 100, 100, 100, np.eye(3), np.zeros(3), 200, 200)
    for sub, lo, hi in ((False, 59.0, 60.0), (True, 59.8, 60.6)):
        r = frame_rays(mask, cam, None, subpixel=sub)
        # pixel where the ray crosses z = 1
        p = r.direction[:, :2] / r.direction[:, 2:] * 100 + 100
        rad = np.hypot(p[:, 0] - 100, p[:, 1] - 100)
        assert lo <= rad.mean() <= hi
