"""Powell dog-leg trust-region solver for sparse nonlinear least squares."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class EnergyIncreaseError(AssertionError):
    """An accepted step increased the energy (solver bug trap)."""


@dataclass
class TrustRegionParams:
    initial_radius: float = 1e3
    max_radius: float = 1e8
    min_radius: float = 1e-14
    max_iterations: int = 50
    gtol: float = 1e-8
    xtol: float = 1e-10
    ftol: float = 1e-12
    eta: float = 1e-4


@dataclass
class SolveResult:
    x: np.ndarray
    energy: float
    iterations: int
    energies: list[float] = field(default_factory=list)
    status: str = ""
    fallbacks: int = 0


def _normal_solve(jtj, g):
    """Solve ``jtj h = -g``; returns None if the factorization fails."""
    try:
        if sp.issparse(jtj):
            lu = spla.splu(sp.csc_matrix(jtj))
            h = lu.solve(-g)
        else:
            h = np.linalg.solve(jtj, -g)
    except (RuntimeError, np.linalg.LinAlgError):
        return None
    if not np.all(np.isfinite(h)):
        return None
    return h


def dogleg_step(g: np.ndarray, jg_sq: float, h_gn: np.ndarray | None, radius: float) -> tuple[np.ndarray, float]:
    """Dog-leg step and its predicted energy decrease factor inputs.

    Args:
        g: gradient ``J^T r``.
        jg_sq: ``|J g|^2``.
        h_gn: Gauss-Newton step or None to use steepest descent only.
        radius: trust radius.
    """
    gnorm2 = g @ g
    alpha = gnorm2 / jg_sq if jg_sq > 0 else radius / np.sqrt(gnorm2)
    h_sd = -alpha * g
    if h_gn is not None and np.linalg.norm(h_gn) <= radius:
        return h_gn, radius
    sd_norm = alpha * np.sqrt(gnorm2)
    if h_gn is None or sd_norm >= radius:
        return -(radius / np.sqrt(gnorm2)) * g, radius
    # point on the segment from h_sd to h_gn at distance radius
    d = h_gn - h_sd
    a = d @ d
    b = 2.0 * (h_sd @ d)
    c = h_sd @ h_sd - radius**2
    beta = (-b + np.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
    return h_sd + beta * d, radius


def solve_dogleg(residual_fn: Callable[[np.ndarray], tuple[np.ndarray, object]], x0: np.ndarray,
                 params: TrustRegionParams | None = None, assert_monotone: bool = True) -> SolveResult:
    """Minimize ``0.5 |r(x)|^2`` with Powell's dog-leg method.

    ``residual_fn(x)`` returns the residual vector and its Jacobian (dense or
    scipy.sparse). Terminates on ``|J^T r|_inf < gtol``, a step shorter than
    ``xtol``, a relative energy change below ``ftol`` or the iteration cap.
    A failed normal-equation factorization falls back to the steepest
    descent leg for that iteration.
    """
    params = params or TrustRegionParams()
    x = np.array(x0, dtype=float)
    r, jac = residual_fn(x)
    energy = 0.5 * float(r @ r)
    energies = [energy]
    radius = params.initial_radius
    fallbacks = 0
    status = "max_iterations"
    it = 0
    need_lin = True
    while it < params.max_iterations:
        if energy == 0.0:
            status = "zero_residual"
            break
        if need_lin:
            jt = jac.T
            g = np.asarray(jt @ r).ravel()
            if np.max(np.abs(g)) < params.gtol:
                status = "gtol"
                break
            jtj = jt @ jac
            h_gn = _normal_solve(jtj, g)
            if h_gn is None:
                fallbacks += 1
                log.info("normal equations singular; steepest descent leg")
            jg = np.asarray(jac @ g).ravel()
            jg_sq = float(jg @ jg)
            need_lin = False
        it += 1
        h, _ = dogleg_step(g, jg_sq, h_gn, radius)
        hn = np.linalg.norm(h)
        if hn < params.xtol * (np.linalg.norm(x) + params.xtol):
            status = "xtol"
            break
        jh = np.asarray(jac @ h).ravel()
        predicted = -(g @ h) - 0.5 * (jh @ jh)
        x_new = x + h
        r_new, jac_new = residual_fn(x_new)
        e_new = 0.5 * float(r_new @ r_new)
        actual = energy - e_new
        rho = actual / predicted if predicted > 0 else -1.0
        if rho > params.eta and actual >= 0:
            if assert_monotone and e_new > energy:
                raise EnergyIncreaseError(f"energy rose from {energy} to {e_new}")
            converged = actual <= params.ftol * energy
            x, r, jac, energy = x_new, r_new, jac_new, e_new
            energies.append(energy)
            need_lin = True
            if rho > 0.75:
                radius = min(params.max_radius, max(radius, 3.0 * hn))
            elif rho < 0.25:
                radius = 0.25 * hn
            if converged:
                status = "ftol"
                break
        else:
            radius = 0.25 * hn
            if radius < params.min_radius:
                status = "radius"
                break
    return SolveResult(x, energy, it, energies, status, fallbacks)
