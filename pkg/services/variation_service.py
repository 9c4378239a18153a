import os
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg as la

from services.asymptotics_service import BranchData, FitParams, branch_matrix, classify_vanishing
from services.eigen_service import EigenPair, cluster_multiplicities, lowest_eigenpairs
from services.geometry_service import (
    ConfigTangent,
    Configuration,
    VectorField,
    exp_map,
    merge_direction,
    random_tangent,
    stereo_chart,
)
from services.mesh_service import (
    MeshParams,
    TwistedOperators,
    build_operators,
    morph_mesh,
    rebase_operators,
    triangle_gauge,
    triangle_gradients,
    triangle_values,
)

logger = logging.getLogger(__name__)

OVERLAP_THRESHOLD = float(os.getenv("Z2EIG_OVERLAP_THRESHOLD", "0.7"))
FD_STEP = float(os.getenv("Z2EIG_FD_STEP", "1e-3"))


class DegenerateCluster(ValueError):
    pass


class BranchSwap(RuntimeError):
    def __init__(self, message: str, overlap: float):
        super().__init__(message)
        self.overlap = overlap


# Gradient and splitting form


@dataclass(frozen=True)
class GradientCovector:
    """Per configuration point, the tangent vector g_p with d(lambda)(nu) = sum <g_p, nu_p>."""

    vectors: np.ndarray
    frames: List[Dict]

    def pair(self, nu: ConfigTangent) -> float:
        return float(np.sum(self.vectors * nu.vectors))

    def norm(self) -> float:
        return float(np.linalg.norm(self.vectors))


def eigenvalue_gradient(branch: Sequence[BranchData], n_points: int, multiplicity: int = 1) -> GradientCovector:
    """(pi/2) Re(a_p^2 dz) at each point of p_f; zero where n_p >= 1.

    Branch data must come from an M-normalized section. Point k of the
    configuration is mesh vertex k.
    """
    if multiplicity > 1:
        raise DegenerateCluster(
            f"Eigenvalue has multiplicity {multiplicity}; the gradient is undefined, use splitting_form"
        )
    vectors = np.zeros((n_points, 3))
    frames = [{} for _ in range(n_points)]
    for b in branch:
        frames[b.vertex] = b.chart.frame()
        if b.n != 0:
            continue
        a2 = b.a * b.a
        vectors[b.vertex] = 0.5 * np.pi * (a2.real * b.chart.e1 - a2.imag * b.chart.e2)
    return GradientCovector(vectors=vectors, frames=frames)


@dataclass(frozen=True)
class SplittingForm:
    matrix: np.ndarray
    eta: np.ndarray
    vectors: np.ndarray

    def conjugated(self, Q: np.ndarray) -> "SplittingForm":
        m = Q.T @ self.matrix @ Q
        eta, vec = la.eigh(0.5 * (m + m.T))
        return SplittingForm(matrix=m, eta=eta, vectors=vec)

    def predicted(self, eigenvalue: float, t: float) -> np.ndarray:
        return eigenvalue + t * self.eta


def _nu_complex(ops: TwistedOperators, nu: ConfigTangent) -> np.ndarray:
    branch = ops.signs.branch_vertices
    out = np.zeros(branch.size, dtype=complex)
    for i, v in enumerate(branch):
        chart = stereo_chart(ops.mesh.vertices[v])
        out[i] = chart.tangent_to_complex(nu.vectors[v])[0]
    return out


def splitting_form(
    cluster: Sequence[EigenPair],
    nu: ConfigTangent,
    ops: TwistedOperators,
    fit: Optional[FitParams] = None,
    B: Optional[np.ndarray] = None,
) -> SplittingForm:
    """Entries (pi/2) sum_p Re(a_p(f_i) a_p(f_j) nu_z(p)) over an M-orthonormal cluster basis."""
    n = len(cluster)
    if nu.is_zero():
        return SplittingForm(matrix=np.zeros((n, n)), eta=np.zeros(n), vectors=np.eye(n))
    if B is None:
        B = branch_matrix(cluster, ops, fit)
    w = _nu_complex(ops, nu)
    m = 0.5 * np.pi * np.real(np.einsum("pi,pj,p->ij", B, B, w))
    m = 0.5 * (m + m.T)
    eta, vec = la.eigh(m)
    logger.info(f"Splitting form over {n} sections: eta = {np.round(eta, 6).tolist()}")
    return SplittingForm(matrix=m, eta=eta, vectors=vec)


# Stress-energy tensors


def _centroids(ops: TwistedOperators) -> np.ndarray:
    c = ops.mesh.vertices[ops.mesh.triangles].mean(axis=1)
    return c / np.linalg.norm(c, axis=1)[:, None]


def _tangent(grads: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grads - np.sum(grads * x, axis=1)[:, None] * x


def _mean_product(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Triangle average of the product of two linear functions given by vertex values."""
    return (np.sum(u * v, axis=1) + np.sum(u, axis=1) * np.sum(v, axis=1)) / 12.0


def stress_energy(f: np.ndarray, lam: float, ops: TwistedOperators) -> np.ndarray:
    """Per-triangle T = df x df - 1/2(|df|^2 - lam f^2) g as ambient (F, 3, 3) tensors."""
    x = _centroids(ops)
    local = triangle_values(ops, ops.expand(f))
    df = _tangent(triangle_gradients(ops, local), x)
    f2 = _mean_product(local, local)
    P = np.eye(3)[None] - x[:, :, None] * x[:, None, :]
    iso = 0.5 * (np.sum(df * df, axis=1) - lam * f2)
    return df[:, :, None] * df[:, None, :] - iso[:, None, None] * P


def pair_stress(f: np.ndarray, f2: np.ndarray, lam: float, lam2: float, ops: TwistedOperators) -> np.ndarray:
    """S = df x df' + df' x df - (<df, df'> - 1/2(lam + lam') f f') g per triangle."""
    x = _centroids(ops)
    gauge = triangle_gauge(ops)
    u = triangle_values(ops, ops.expand(f), gauge)
    v = triangle_values(ops, ops.expand(f2), gauge)
    du = _tangent(triangle_gradients(ops, u), x)
    dv = _tangent(triangle_gradients(ops, v), x)
    P = np.eye(3)[None] - x[:, :, None] * x[:, None, :]
    iso = np.sum(du * dv, axis=1) - 0.5 * (lam + lam2) * _mean_product(u, v)
    outer = du[:, :, None] * dv[:, None, :]
    return outer + np.transpose(outer, (0, 2, 1)) - iso[:, None, None] * P


def tensor_pairing(field: VectorField, tensor: np.ndarray, ops: TwistedOperators) -> float:
    """One-point quadrature of <grad nu, T> with grad nu from the field's ambient Jacobian."""
    x = _centroids(ops)
    jac = field.jacobian(x)
    return float(np.sum(ops.mesh.triangle_areas * np.einsum("fij,fij->f", jac, tensor)))


def weak_divergence(field: VectorField, ops: TwistedOperators, f: np.ndarray) -> float:
    """-int <df, nu>, which equals int f div(nu) for sections vanishing at the branch points."""
    x = _centroids(ops)
    local = triangle_values(ops, ops.expand(f))
    df = _tangent(triangle_gradients(ops, local), x)
    return -float(np.sum(ops.mesh.triangle_areas * np.sum(df * field(x), axis=1)))


def _rhs(branch: Sequence[BranchData], field: VectorField, other: Optional[Sequence[BranchData]] = None) -> float:
    total = 0.0
    partners = {b.vertex: b for b in (other if other is not None else branch)}
    for b in branch:
        b2 = partners.get(b.vertex)
        if b2 is None or b.n != 0 or b2.n != 0:
            continue
        nu_z = b.chart.tangent_to_complex(field(b.point[None])[0])[0]
        total += float(np.real(b.a * b2.a * nu_z))
    return total


def _relative(lhs: float, rhs: float, floor: float) -> float:
    return abs(lhs - rhs) / (abs(lhs) + abs(rhs) + floor)


def divergence_identity_residual(
    f: np.ndarray, lam: float, field: VectorField, ops: TwistedOperators, branch: Sequence[BranchData]
) -> Dict:
    """Compare int <grad nu, T> with -(pi/4) sum over p_f of Re(a_p^2 nu_z)."""
    lhs = tensor_pairing(field, stress_energy(f, lam, ops), ops)
    rhs = -0.25 * np.pi * _rhs(branch, field)
    energy = float(f @ (ops.stiffness @ f))
    return {
        "lhs": lhs,
        "rhs": rhs,
        "residual": _relative(lhs, rhs, 1e-2 * max(energy, 1e-12)),
        "energy": energy,
    }


def pair_identity_residual(
    f: np.ndarray,
    f2: np.ndarray,
    lam: float,
    lam2: float,
    field: VectorField,
    ops: TwistedOperators,
    branch: Sequence[BranchData],
    branch2: Sequence[BranchData],
) -> Dict:
    """int <grad nu, S> + 1/2(lam' - lam) int <nu, f df' - f' df> against -(pi/2) sum Re(a a' nu_z).

    The sum runs over points where both sections have n_p = 0.
    """
    x = _centroids(ops)
    lhs_tensor = tensor_pairing(field, pair_stress(f, f2, lam, lam2, ops), ops)

    gauge = triangle_gauge(ops)
    u = triangle_values(ops, ops.expand(f), gauge)
    v = triangle_values(ops, ops.expand(f2), gauge)
    du = _tangent(triangle_gradients(ops, u), x)
    dv = _tangent(triangle_gradients(ops, v), x)
    nu = field(x)
    mixed = u.mean(axis=1)[:, None] * dv - v.mean(axis=1)[:, None] * du
    flux = float(np.sum(ops.mesh.triangle_areas * np.sum(nu * mixed, axis=1)))

    lhs = lhs_tensor + 0.5 * (lam2 - lam) * flux
    rhs = -0.5 * np.pi * _rhs(branch, field, branch2)
    scale = float(np.sqrt(abs(f @ (ops.stiffness @ f)) * abs(f2 @ (ops.stiffness @ f2))))
    return {
        "lhs": lhs,
        "rhs": rhs,
        "tensor_term": lhs_tensor,
        "flux_term": flux,
        "residual": _relative(lhs, rhs, 1e-2 * max(scale, 1e-12)),
    }


# Finite-difference oracle


@dataclass(frozen=True)
class SlopeEstimate:
    eigenvalue: float
    central: float
    forward: float
    backward: float
    overlaps: List[float]


def _tracked(base: EigenPair, ops: TwistedOperators, pairs: Sequence[EigenPair]) -> tuple:
    mf = ops.mass @ base.section
    overlaps = np.array([abs(float(p.section @ mf)) for p in pairs])
    best = int(np.argmax(overlaps))
    return pairs[best], float(overlaps[best])


def fd_eigenvalue_slope(
    config: Configuration,
    nu: ConfigTangent,
    h: float = FD_STEP,
    branch_index: int = 0,
    ops: Optional[TwistedOperators] = None,
    params: Optional[MeshParams] = None,
    threads: int = 1,
    seed: int = 0,
) -> SlopeEstimate:
    """Central, forward and backward differences of lambda_k along nu.

    The mesh is morphed (same connectivity and cut) so lambda varies smoothly;
    the branch is followed by maximal mass overlap.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError(f"Finite-difference step must lie in [1e-4, 1e-2], got {h}")
    if ops is None:
        ops = build_operators(config, params)
    k = branch_index + 3
    base = lowest_eigenpairs(ops, k, seed=seed)[branch_index]
    if nu.is_zero():
        return SlopeEstimate(eigenvalue=base.eigenvalue, central=0.0, forward=0.0, backward=0.0, overlaps=[1.0, 1.0])

    def _solve(sign: float) -> tuple:
        moved = exp_map(config.points, sign * h * nu.vectors)
        displaced = rebase_operators(ops, morph_mesh(ops.mesh, moved))
        pair, overlap = _tracked(base, displaced, lowest_eigenpairs(displaced, k, seed=seed))
        if overlap < OVERLAP_THRESHOLD:
            msg = f"Branch {branch_index} lost at displacement {sign * h:+.1e}: overlap {overlap:.3f}"
            logger.warning(msg)
            raise BranchSwap(msg, overlap)
        return pair.eigenvalue, overlap

    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, 2)) as pool:
            plus, minus = list(pool.map(_solve, (1.0, -1.0)))
    else:
        plus, minus = _solve(1.0), _solve(-1.0)

    lam = base.eigenvalue
    return SlopeEstimate(
        eigenvalue=lam,
        central=(plus[0] - minus[0]) / (2.0 * h),
        forward=(plus[0] - lam) / h,
        backward=(lam - minus[0]) / h,
        overlaps=[plus[1], minus[1]],
    )


def ground_state_gradient(
    ops: TwistedOperators, seed: int = 0, fit: Optional[FitParams] = None
) -> tuple:
    """Ground state, its branch data and gradient covector; DegenerateCluster if lambda_1 is multiple."""
    pairs = lowest_eigenpairs(ops, 3, seed=seed)
    clusters = cluster_multiplicities([p.eigenvalue for p in pairs])
    census = classify_vanishing(pairs[0].section, ops, fit)
    gradient = eigenvalue_gradient(census["data"], ops.mesh.n_flagged, clusters[0].multiplicity)
    return pairs[0], census["data"], gradient


def gradient_check_trial(
    config: Configuration,
    seed: int,
    params: Optional[MeshParams] = None,
    h: float = FD_STEP,
    config_id: str = "",
    direction_id: Optional[int] = None,
    threads: int = 1,
) -> Dict:
    """Formula slope against the finite-difference slope along a seeded random direction.

    With threads > 1 the two displaced solves run concurrently.
    """
    rng = np.random.default_rng(seed)
    nu = random_tangent(config, rng)
    ops = build_operators(config, params)
    pair, _, gradient = ground_state_gradient(ops, seed=seed)
    formula = gradient.pair(nu)
    fd = fd_eigenvalue_slope(config, nu, h=h, ops=ops, threads=threads, seed=seed)
    error = abs(formula - fd.central) / max(abs(fd.central), 1e-12)
    logger.info(f"Gradient check {config_id}/{seed}: formula {formula:.6f}, fd {fd.central:.6f}, rel err {error:.3e}")
    return {
        "config_id": config_id,
        "direction_id": seed if direction_id is None else direction_id,
        "eigenvalue": pair.eigenvalue,
        "formula_slope": formula,
        "fd_slope": fd.central,
        "forward": fd.forward,
        "backward": fd.backward,
        "relative_error": error,
    }


def separation_direction(config: Configuration) -> ConfigTangent:
    """Unit tangents pushing points 0 and 1 apart along their great circle."""
    return merge_direction(config).scaled(-1.0)
