import os
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.eigen_service import EigenPair
from services.experiment_service import c2_cut_curve, c2_eigensection, c2_section_gradient
from services.geometry_service import exp_map, geodesic_distance, stereo_chart
from services.mesh_service import TwistedOperators, crossing_parity, cut_curves, interpolate_section, reference_ray

logger = logging.getLogger(__name__)

THETA_EXCL = float(os.getenv("Z2EIG_LIFT_THETA_EXCL", "0.1"))
FD_STEP = float(os.getenv("Z2EIG_LIFT_FD_STEP", "5e-3"))
ON_RAY_EPS = 1e-8
CONVENTIONS = ("stated", "harmonic")


class NegativeEigenvalue(ValueError):
    pass


class OnBranchRay(ValueError):
    pass


def homogeneity_exponent(lam: float) -> float:
    """mu = (1 + sqrt(1 + 4 lambda)) / 2."""
    if lam < 0:
        raise NegativeEigenvalue(f"Eigenvalue must be >= 0, got {lam}")
    return 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * lam))


# Section evaluators


class SectionEvaluator:
    """Values and tangential gradients of a section on the unit sphere.

    Values are read in the gauge cut along `curves`; `points` are the
    branch points (empty for an untwisted section).
    """

    points: np.ndarray = np.zeros((0, 3))
    curves: List[np.ndarray] = []

    def __call__(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def away(self, index: int) -> np.ndarray:
        """Unit tangent at a branch point pointing away from its cut curve."""
        raise NotImplementedError


class MeshSectionEvaluator(SectionEvaluator):
    def __init__(self, ops: TwistedOperators, section: np.ndarray):
        self.ops = ops
        self.f_full = ops.expand(section)
        self.branch = ops.signs.branch_vertices
        self.points = ops.mesh.vertices[self.branch]
        self.curves = cut_curves(ops.cut, ops.mesh)

    def __call__(self, u):
        return interpolate_section(self.ops, self.f_full, u)

    def away(self, index):
        return reference_ray(self.ops.cut, self.ops.mesh, int(self.branch[index]))


class ClosedFormEvaluator(SectionEvaluator):
    """Closed-form section for an antipodal pair, cut along the phi = 0 meridian."""

    def __init__(self, m: int, alpha: float = 0.0, axis=(0.0, 0.0, 1.0)):
        self.m = m
        self.alpha = alpha
        self.chart = stereo_chart(axis)
        self.points = np.array([self.chart.base, -self.chart.base])
        self.curves = [c2_cut_curve(self.chart.base)]

    def __call__(self, u):
        return (
            c2_eigensection(self.m, self.alpha, u, self.chart.base),
            c2_section_gradient(self.m, self.alpha, u, self.chart.base),
        )

    def away(self, index):
        return -self.chart.e1


class LinearEvaluator(SectionEvaluator):
    """Untwisted restriction of a linear function, an l = 1 harmonic."""

    def __init__(self, coefficients):
        self.coefficients = np.asarray(coefficients, dtype=float)

    def __call__(self, u):
        values = u @ self.coefficients
        return values, self.coefficients[None, :] - values[:, None] * u


# Lift


@dataclass(frozen=True)
class HarmonicLift:
    """nu = d(|x|^s f(x/|x|)), s = mu for the stated convention, mu - 1 for the harmonic one."""

    eigenvalue: float
    mu: float
    evaluator: SectionEvaluator
    convention: str = "stated"
    exclusion: float = ON_RAY_EPS

    @property
    def radial_power(self) -> float:
        return self.mu if self.convention == "stated" else self.mu - 1.0

    @property
    def degree(self) -> float:
        """Homogeneity degree of the components of nu."""
        return self.radial_power - 1.0

    def with_eigenvalue(self, lam: float) -> "HarmonicLift":
        return replace(self, eigenvalue=lam, mu=homogeneity_exponent(lam))


def make_lift(
    lam: float, evaluator: SectionEvaluator, convention: str = "stated", exclusion: float = ON_RAY_EPS
) -> HarmonicLift:
    if convention not in CONVENTIONS:
        raise ValueError(f"Unknown convention '{convention}', expected one of {CONVENTIONS}")
    return HarmonicLift(
        eigenvalue=float(lam), mu=homogeneity_exponent(lam), evaluator=evaluator,
        convention=convention, exclusion=exclusion,
    )


def lift_from_pair(
    pair: EigenPair, ops: TwistedOperators, convention: str = "stated"
) -> HarmonicLift:
    return make_lift(pair.eigenvalue, MeshSectionEvaluator(ops, pair.section), convention)


def ray_distance(lift: HarmonicLift, x: np.ndarray) -> np.ndarray:
    """Angular distance from each point to the nearest branch ray."""
    points = lift.evaluator.points
    x = np.atleast_2d(x)
    if len(points) == 0:
        return np.full(len(x), np.inf)
    return geodesic_distance(x[:, None, :], points[None, :, :]).min(axis=1)


def evaluate_lift(lift: HarmonicLift, x) -> np.ndarray:
    """Cartesian components of nu at points of R^3 off the branch rays.

    nu = s r^(s-1) f(u) u + r^(s-1) grad f(u), with u = x / r.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.linalg.norm(x, axis=1)
    if np.any(r == 0):
        raise OnBranchRay("The origin lies on every branch ray")
    u = x / r[:, None]
    close = ray_distance(lift, u) <= lift.exclusion
    if np.any(close):
        raise OnBranchRay(f"{int(close.sum())} sample(s) within {lift.exclusion:g} rad of a branch ray")
    values, grads = lift.evaluator(u)
    s = lift.radial_power
    scale = r ** (s - 1.0)
    return scale[:, None] * (s * values[:, None] * u + grads)


# Grid residuals


@dataclass(frozen=True)
class ShellGrid:
    r_min: float = 1.0
    r_max: float = 2.0
    n_radii: int = 3
    n_polar: int = 24
    n_azimuth: int = 48
    theta_excl: float = THETA_EXCL
    step: float = FD_STEP

    def shells(self) -> np.ndarray:
        return np.linspace(self.r_min, self.r_max, self.n_radii)

    def directions(self) -> np.ndarray:
        theta = (np.arange(self.n_polar) + 0.5) * np.pi / self.n_polar
        phi = (np.arange(self.n_azimuth) + 0.25) * 2.0 * np.pi / self.n_azimuth
        T, P = np.meshgrid(theta, phi, indexing="ij")
        return np.column_stack([
            (np.sin(T) * np.cos(P)).ravel(),
            (np.sin(T) * np.sin(P)).ravel(),
            np.cos(T).ravel(),
        ])


def _jacobian(lift: HarmonicLift, x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference J[n, i, j] = d nu_i / d x_j, continuing nu across cut sheets."""
    curves = lift.evaluator.curves
    base = x / np.linalg.norm(x, axis=1)[:, None]
    J = np.zeros((len(x), 3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        arms = []
        for end in (x + e, x - e):
            nu = evaluate_lift(lift, end)
            if curves:
                tip = end / np.linalg.norm(end, axis=1)[:, None]
                flip = crossing_parity(base, tip, curves)
                nu[flip] *= -1.0
            arms.append(nu)
        J[:, :, j] = (arms[0] - arms[1]) / (2.0 * h)
    return J


def _shell_residuals(lift: HarmonicLift, x: np.ndarray, h: float) -> Tuple[float, float]:
    J = _jacobian(lift, x, h)
    curl = J - np.transpose(J, (0, 2, 1))
    d_res = float(np.max(np.linalg.norm(curl, axis=(1, 2)) / np.sqrt(2.0)))
    delta_res = float(np.max(np.abs(np.trace(J, axis1=1, axis2=2))))
    return d_res, delta_res


def _order(coarse: float, fine: float) -> float:
    if fine <= 0 or coarse <= 0:
        return float("nan")
    return float(np.log2(coarse / fine))


def closed_coclosed_residuals(
    lift: HarmonicLift, grid: Optional[ShellGrid] = None, threads: int = 1
) -> Dict:
    """Max-norm |d nu| and |delta nu| on a shell grid at steps h and h/2.

    Samples within theta_excl of a branch ray are dropped. The reported
    residuals are those at h/2; the orders are log2 of the coarse/fine ratio.
    """
    grid = grid or ShellGrid()
    u = grid.directions()
    u = u[ray_distance(lift, u) > grid.theta_excl]
    shells = grid.shells()

    def _run(h: float) -> Tuple[float, float, float]:
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            per_shell = list(pool.map(lambda r: _shell_residuals(lift, r * u, h), shells))
        scale = max(float(np.max(np.linalg.norm(evaluate_lift(lift, r * u), axis=1))) for r in shells)
        return max(d for d, _ in per_shell), max(s for _, s in per_shell), scale

    h = grid.step
    d_coarse, delta_coarse, scale = _run(h)
    d_fine, delta_fine, _ = _run(0.5 * h)
    result = {
        "eigenvalue": lift.eigenvalue,
        "mu": lift.mu,
        "convention": lift.convention,
        "samples": int(u.shape[0] * shells.size),
        "step": h,
        "scale": scale,
        "d_residual": d_fine,
        "delta_residual": delta_fine,
        "d_residual_coarse": d_coarse,
        "delta_residual_coarse": delta_coarse,
        "d_order": _order(d_coarse, d_fine),
        "delta_order": _order(delta_coarse, delta_fine),
    }
    logger.info(
        f"Lift residuals ({lift.convention}, lambda={lift.eigenvalue:.4f}): "
        f"d={d_fine:.3e} (order {result['d_order']:.2f}), "
        f"delta={delta_fine:.3e} (order {result['delta_order']:.2f})"
    )
    return result


# Sampling


def homogeneity_check(lift: HarmonicLift, x, factors: Sequence[float] = (0.5, 2.0, 4.0)) -> float:
    """Largest relative deviation of |nu|(c x) from c^(s-1) |nu|(x)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    base = np.linalg.norm(evaluate_lift(lift, x), axis=1)
    worst = 0.0
    for c in factors:
        scaled = np.linalg.norm(evaluate_lift(lift, c * x), axis=1)
        expected = c**lift.degree * base
        worst = max(worst, float(np.max(np.abs(scaled - expected) / np.maximum(expected, 1e-300))))
    return worst


def holder_exponent_fit(
    lift: HarmonicLift, ray_index: int, distances: Optional[Sequence[float]] = None
) -> Dict:
    """Fit |nu| ~ C delta^beta approaching a branch ray at |x| = 1, away from its cut."""
    points = lift.evaluator.points
    if not 0 <= ray_index < len(points):
        raise ValueError(f"ray_index {ray_index} out of range for {len(points)} branch rays")
    delta = np.asarray(distances if distances is not None else np.geomspace(0.01, 0.1, 8), dtype=float)
    p = points[ray_index]
    t = lift.evaluator.away(ray_index)
    x = exp_map(np.broadcast_to(p, (delta.size, 3)), delta[:, None] * t[None, :])
    norms = np.linalg.norm(evaluate_lift(lift, x), axis=1)
    beta, log_c = np.polyfit(np.log(delta), np.log(norms), 1)
    return {
        "ray": ray_index,
        "point": p.tolist(),
        "beta": float(beta),
        "constant": float(np.exp(log_c)),
        "distances": delta.tolist(),
        "norms": norms.tolist(),
    }


def sample_lift(lift: HarmonicLift, points) -> List[Dict]:
    """Rows x, y, z, nu1, nu2, nu3, norm for the CSV output; on-ray samples are skipped."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    keep = ray_distance(lift, x / np.linalg.norm(x, axis=1)[:, None]) > lift.exclusion
    skipped = int((~keep).sum())
    if skipped:
        logger.warning(f"Skipping {skipped} lift sample(s) on branch rays")
    x = x[keep]
    nu = evaluate_lift(lift, x)
    norm = np.linalg.norm(nu, axis=1)
    return [
        {"x": p[0], "y": p[1], "z": p[2], "nu1": v[0], "nu2": v[1], "nu3": v[2], "norm": n}
        for p, v, n in zip(x.tolist(), nu.tolist(), norm.tolist())
    ]


def lift_sample_points(count: int, radius: float = 1.0, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(count, 3))
    return radius * x / np.linalg.norm(x, axis=1)[:, None]
