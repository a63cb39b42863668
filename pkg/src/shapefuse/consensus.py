"""Consensus shape optimization in the canonical frame.

The unknowns are the body-model shape ``beta_hat`` and per-vertex offsets
``D``. Free-form vertices are ``v = template + B_s beta0 + D`` with ``beta0``
the shape the current round was unposed with; ``beta_hat`` only enters the
body-model term, which ties ``v`` to the naked model ``template + B_s beta_hat``.
After each round the result is re-expressed around ``beta_hat`` (same
vertices), rays are re-associated and re-unposed against the updated model,
and the Laplacian anchor and robust weights are refreshed.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .geometry import uniform_laplacian
from .model import SkinnedModel, rest_vertices
from .solver import EnergyIncreaseError, TrustRegionParams, solve_dogleg
from .unpose import UnposeConfig, UnposedCloud, build_unposed_cloud, frame_rays

log = logging.getLogger(__name__)

MIRROR = np.array([-1.0, 1.0, 1.0])


class ConsensusAbort(RuntimeError):
    """Optimization stopped; ``report`` carries the diagnostics gathered so far."""

    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


@dataclass
class EnergyConfig:
    """Weights and schedule of the consensus energy.

    Presets ``clothed`` and ``minimal`` differ in the robust scale and in
    how strongly offsets are tied to the body model.
    """

    w_lp: float = 2.0
    w_var: float = 0.2
    w_sym: float = 1.0
    sigma_gm: float = 0.01
    rounds: int = 5
    inner_iterations: int = 50
    initial_radius: float = 1.0
    height: float | None = None
    w_height: float = 100.0
    d_max: float = 0.05
    max_points: int | None = 1500
    rim_only: bool = True
    subpixel: bool = True
    threads: int = 1

    def validate(self) -> None:
        for name in ("w_lp", "w_var", "w_sym", "w_height"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.sigma_gm <= 0:
            raise ValueError("sigma_gm must be positive")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")

    def unpose_config(self) -> UnposeConfig:
        return UnposeConfig(self.max_points, self.d_max, self.rim_only, self.threads, self.subpixel)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "clothed": dict(w_lp=2.0, w_var=0.2, w_sym=1.0, sigma_gm=0.01),
    "minimal": dict(w_lp=1.0, w_var=1.0, w_sym=1.0, sigma_gm=0.005),
}


def preset(name: str, **overrides) -> EnergyConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(EnergyConfig(), **{**PRESETS[name], **overrides})


def gm_rho(e, sigma: float):
    """Geman-McClure cost ``sigma^2 e^2 / (e^2 + sigma^2)``."""
    e2 = np.square(e)
    return sigma**2 * e2 / (e2 + sigma**2)


def gm_weight(e, sigma: float):
    """IRLS weight ``rho'(e) / (2 e)``; equals 1 at ``e = 0``."""
    return sigma**4 / (np.square(e) + sigma**2) ** 2


@dataclass
class ResidualBlock:
    residual: np.ndarray
    jacobian: sp.csr_matrix
    name: str = ""

    @property
    def energy(self) -> float:
        return float(self.residual @ self.residual)


@dataclass
class ConsensusProblem:
    """Linearization context of one alternation round.

    ``x = [beta_hat (S), D.ravel() (3N)]``.
    """

    model: SkinnedModel
    beta0: np.ndarray
    vertex: np.ndarray
    direction: np.ndarray
    moment: np.ndarray
    irls: np.ndarray
    config: EnergyConfig
    laplacian: sp.csr_matrix = None
    delta: np.ndarray = None
    base: np.ndarray = field(init=False)

    def __post_init__(self):
        self.beta0 = np.asarray(self.beta0, dtype=float)
        self.base = rest_vertices(self.model, self.beta0)
        if self.laplacian is None:
            self.laplacian = uniform_laplacian(self.model.faces, self.model.n_vertices)
        if self.delta is None:
            self.delta = np.asarray(self.laplacian @ self.base)

    @property
    def n_shape(self) -> int:
        return self.model.n_shape

    @property
    def n_vars(self) -> int:
        return self.n_shape + 3 * self.model.n_vertices

    def pack(self, beta_hat, offsets) -> np.ndarray:
        return np.concatenate([np.asarray(beta_hat, dtype=float), np.asarray(offsets, dtype=float).ravel()])

    def unpack(self, x) -> tuple[np.ndarray, np.ndarray]:
        return x[: self.n_shape], x[self.n_shape:].reshape(-1, 3)

    def vertices(self, x) -> np.ndarray:
        return self.base + self.unpack(x)[1]

    # -- residual blocks ---------------------------------------------------

    def data_residuals(self, x, irls: np.ndarray | None = None) -> ResidualBlock:
        irls = self.irls if irls is None else irls
        v = self.vertices(x)[self.vertex]
        sw = np.sqrt(irls)
        res = sw[:, None] * (np.cross(v, self.direction) - self.moment)
        m = len(self.vertex)
        # d(v x n)/dv = -[n]_x
        n = self.direction
        rows = np.repeat(3 * np.arange(m), 6) + np.tile([0, 0, 1, 1, 2, 2], m)
        cols_local = np.tile([1, 2, 0, 2, 0, 1], m)
        vals = np.stack([n[:, 2], -n[:, 1], -n[:, 2], n[:, 0], n[:, 1], -n[:, 0]], axis=1) * sw[:, None]
        cols = self.n_shape + 3 * np.repeat(self.vertex, 6) + cols_local
        jac = sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(3 * m, self.n_vars))
        return ResidualBlock(res.ravel(), jac, "data")

    def laplacian_residuals(self, x) -> ResidualBlock:
        cfg = self.config
        s = np.sqrt(cfg.w_lp * self.model.lap_weights)
        v = self.vertices(x)
        res = s[:, None] * (np.asarray(self.laplacian @ v) - self.delta)
        lap3 = sp.kron(sp.diags(s) @ self.laplacian, sp.identity(3), format="csr")
        jac = sp.hstack([sp.csr_matrix((3 * self.model.n_vertices, self.n_shape)), lap3], format="csr")
        return ResidualBlock(res.ravel(), jac, "laplacian")

    def model_residuals(self, x) -> ResidualBlock:
        cfg = self.config
        beta_hat, d = self.unpack(x)
        s = np.sqrt(cfg.w_var * self.model.var_weights)
        bs = self.model.shape_basis
        res = s[:, None] * (bs @ (self.beta0 - beta_hat) + d)
        n = self.model.n_vertices
        jb = sp.csr_matrix(-(s[:, None, None] * bs).reshape(3 * n, self.n_shape))
        jd = sp.diags(np.repeat(s, 3))
        return ResidualBlock(res.ravel(), sp.hstack([jb, jd], format="csr"), "model")

    def symmetry_residuals(self, x) -> ResidualBlock:
        cfg = self.config
        pairs = self.model.symmetry_pairs
        _, d = self.unpack(x)
        p = len(pairs)
        if p == 0:
            return ResidualBlock(np.zeros(0), sp.csr_matrix((0, self.n_vars)), "symmetry")
        i, j = pairs.T
        gamma = 0.5 * (self.model.sym_weights[i] + self.model.sym_weights[j])
        s = np.sqrt(cfg.w_sym * gamma)
        res = s[:, None] * (d[i] * MIRROR - d[j])
        rows = np.concatenate([3 * np.arange(p)[:, None] + np.arange(3)] * 2).ravel()
        cols = np.concatenate([3 * i[:, None] + np.arange(3), 3 * j[:, None] + np.arange(3)]).ravel()
        vals = np.concatenate([s[:, None] * MIRROR, -np.repeat(s[:, None], 3, axis=1)]).ravel()
        jac = sp.csr_matrix((vals, (rows, cols + self.n_shape)), shape=(3 * p, self.n_vars))
        return ResidualBlock(res.ravel(), jac, "symmetry")

    def height_residual(self, x) -> ResidualBlock | None:
        cfg = self.config
        if cfg.height is None:
            return None
        v = self.vertices(x)
        top, bottom = int(np.argmax(v[:, 1])), int(np.argmin(v[:, 1]))
        s = np.sqrt(cfg.w_height)
        res = np.array([s * (v[top, 1] - v[bottom, 1] - cfg.height)])
        jac = sp.csr_matrix(([s, -s], ([0, 0], [self.n_shape + 3 * top + 1, self.n_shape + 3 * bottom + 1])),
                            shape=(1, self.n_vars))
        return ResidualBlock(res, jac, "height")

    def blocks(self, x) -> list[ResidualBlock]:
        out = [self.data_residuals(x), self.laplacian_residuals(x), self.model_residuals(x),
               self.symmetry_residuals(x)]
        h = self.height_residual(x)
        if h is not None:
            out.append(h)
        return out

    def residuals(self, x):
        blocks = self.blocks(x)
        r = np.concatenate([b.residual for b in blocks])
        jac = sp.vstack([b.jacobian for b in blocks], format="csr")
        return r, jac

    def robust_energy(self, x) -> dict:
        """Energy terms with the Geman-McClure data cost (not the IRLS surrogate)."""
        v = self.vertices(x)[self.vertex]
        e = np.linalg.norm(np.cross(v, self.direction) - self.moment, axis=1)
        terms = {"data": float(gm_rho(e, self.config.sigma_gm).sum()),
                 "laplacian": self.laplacian_residuals(x).energy,
                 "model": self.model_residuals(x).energy,
                 "symmetry": self.symmetry_residuals(x).energy}
        h = self.height_residual(x)
        if h is not None:
            terms["height"] = h.energy
        terms["total"] = sum(terms.values())
        return terms

    def point_line_errors(self, x) -> np.ndarray:
        v = self.vertices(x)[self.vertex]
        return np.linalg.norm(np.cross(v, self.direction) - self.moment, axis=1)


def make_problem(model: SkinnedModel, beta0, offsets, cloud: UnposedCloud, config: EnergyConfig,
                 laplacian=None, weights: np.ndarray | None = None) -> ConsensusProblem:
    """Problem for the given cloud with IRLS weights evaluated at ``offsets``."""
    prob = ConsensusProblem(model, beta0, cloud.vertex, cloud.direction, cloud.moment,
                            np.ones(len(cloud)), config, laplacian)
    if weights is None:
        if offsets is None:
            offsets = np.zeros((model.n_vertices, 3))
        x = prob.pack(beta0, offsets)
        weights = gm_weight(prob.point_line_errors(x), config.sigma_gm)
    prob.irls = weights
    return prob


@dataclass
class ConsensusResult:
    beta: np.ndarray
    offsets: np.ndarray
    report: dict
    cloud: UnposedCloud | None = None

    def vertices(self, model: SkinnedModel) -> np.ndarray:
        return rest_vertices(model, self.beta, self.offsets)


def solve_round(problem: ConsensusProblem, beta_start, offsets_start, config: EnergyConfig):
    """Inner dog-leg solve; returns (beta_hat, offsets relative to beta0, solve result)."""
    x0 = problem.pack(beta_start, offsets_start)
    params = TrustRegionParams(initial_radius=config.initial_radius, max_iterations=config.inner_iterations)
    result = solve_dogleg(problem.residuals, x0, params)
    if result.energies[-1] > result.energies[0] + 1e-9:
        raise EnergyIncreaseError("inner solve increased the energy")
    beta_hat, d = problem.unpack(result.x)
    return beta_hat, d, result


def optimize_consensus(model: SkinnedModel, beta0, cloud: UnposedCloud, config: EnergyConfig, poses=None,
                       masks=None, cameras=None, rays=None, offsets0=None, callback=None) -> ConsensusResult:
    """Alternate consensus solves with ray re-association and re-unposing.

    ``cloud`` must have been built against ``beta0`` (and ``offsets0``).
    ``callback(round, beta, offsets)`` is invoked after every round. When
    poses and cameras plus masks or precomputed rays are available, rays are
    re-associated against the updated model between rounds; otherwise the
    correspondences stay fixed and only the robust weights are refreshed.

    Raises:
        ConsensusAbort: if correspondences collapse below 10% of round one.
    """
    config.validate()
    beta = np.array(beta0, dtype=float)
    offsets = np.zeros((model.n_vertices, 3)) if offsets0 is None else np.array(offsets0, dtype=float)
    laplacian = uniform_laplacian(model.faces, model.n_vertices)
    can_reassociate = poses is not None and cameras is not None and (masks is not None or rays is not None)
    if can_reassociate and rays is None:
        rays = [frame_rays(m, c, config.max_points, config.subpixel) for m, c in zip(masks, cameras)]
    report = {"config": config.to_dict(), "rounds": []}
    first_count = len(cloud)
    for rnd in range(config.rounds):
        if rnd > 0 and can_reassociate:
            cloud = build_unposed_cloud(model, beta, poses, cameras=cameras, config=config.unpose_config(),
                                        offsets=offsets, rays=rays)
        entry = {"round": rnd + 1, "correspondences": len(cloud), "drops": dict(cloud.drops)}
        if len(cloud) < 0.1 * first_count:
            report["rounds"].append(entry)
            raise ConsensusAbort(f"correspondences collapsed to {len(cloud)} (round one: {first_count})", report)
        problem = make_problem(model, beta, offsets, cloud, config, laplacian)
        x_start = problem.pack(beta, offsets)
        start = problem.robust_energy(x_start)
        beta_hat, d, result = solve_round(problem, beta, offsets, config)
        end = problem.robust_energy(problem.pack(beta_hat, d))
        # same vertices, re-expressed around the fitted body shape
        offsets = d + model.shape_basis @ (beta - beta_hat)
        beta = beta_hat
        entry.update({"energy_start": start["total"], "energy": end["total"], "terms": end,
                      "surrogate_energies": result.energies, "iterations": result.iterations,
                      "status": result.status, "fallbacks": result.fallbacks,
                      "max_offset_m": float(np.linalg.norm(offsets, axis=1).max())})
        log.info("round %d: %d correspondences, energy %.6g -> %.6g (%s, %d it)", rnd + 1, len(cloud),
                 start["total"], end["total"], result.status, result.iterations)
        report["rounds"].append(entry)
        if callback is not None:
            callback(rnd + 1, beta, offsets)
    report["beta"] = beta.tolist()
    report["cloud"] = cloud.summary()
    return ConsensusResult(beta, offsets, report, cloud)
