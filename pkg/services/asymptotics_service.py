import os
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg as la

from services.eigen_service import EigenPair
from services.geometry_service import StereoChart, geodesic_distance, stereo_chart
from services.mesh_service import TwistedOperators, gauge_ratio, reference_ray

logger = logging.getLogger(__name__)

FIT_INNER_FACTOR = float(os.getenv("Z2EIG_FIT_INNER_FACTOR", "4.0"))
FIT_OUTER_FACTOR = float(os.getenv("Z2EIG_FIT_OUTER_FACTOR", "0.3"))
FIT_OUTER_CAP = float(os.getenv("Z2EIG_FIT_OUTER_CAP", "0.2"))
FIT_MAX_ORDER = int(os.getenv("Z2EIG_FIT_MAX_ORDER", "3"))
FIT_REL_TOL = float(os.getenv("Z2EIG_FIT_REL_TOL", "0.1"))
MIN_SAMPLES = 30


class InsufficientSamples(RuntimeError):
    pass


class AmbiguousOrder(RuntimeError):
    pass


class ExtractionFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class FitParams:
    r_in: Optional[float] = None
    r_out: Optional[float] = None
    max_order: int = FIT_MAX_ORDER
    rel_tol: float = FIT_REL_TOL


@dataclass(frozen=True)
class BranchData:
    vertex: int
    point: np.ndarray
    chart: StereoChart
    a: complex
    n: int
    fit_residual: float
    coefficients: np.ndarray  # complex, orders 0..max_order
    samples: int

    @property
    def leading(self) -> complex:
        """Coefficient of z^(1/2); zero contribution when n >= 1."""
        return complex(self.coefficients[0])

    def to_dict(self) -> Dict:
        return {
            "vertex": self.vertex,
            "point": self.point.tolist(),
            "n_p": self.n,
            "re_a": self.a.real,
            "im_a": self.a.imag,
            "abs_a": abs(self.a),
            "residual": self.fit_residual,
            "frame": self.chart.frame(),
        }


@dataclass(frozen=True)
class _Annulus:
    """Fit design for one branch vertex; linear in the section."""

    vertex: int
    chart: StereoChart
    samples: np.ndarray
    gauge: np.ndarray
    design: np.ndarray
    scale: float
    max_order: int

    def coefficients(self, f_full: np.ndarray) -> np.ndarray:
        g = self.gauge * f_full[self.samples]
        coef, *_ = la.lstsq(self.design, g)
        return coef

    def complex_coefficients(self, coef: np.ndarray) -> np.ndarray:
        k = np.arange(self.max_order + 1)
        return (coef[0::2] - 1j * coef[1::2]) / self.scale ** (k + 0.5)


def _annulus(ops: TwistedOperators, vertex: int, chart: Optional[StereoChart], fit: FitParams) -> _Annulus:
    mesh = ops.mesh
    V = mesh.vertices
    p = V[vertex]
    chart = chart or stereo_chart(p)
    branch = ops.signs.branch_vertices
    others = branch[branch != vertex]
    nn = float(geodesic_distance(V[others], p).min()) if others.size else np.pi
    r_in = fit.r_in if fit.r_in is not None else FIT_INNER_FACTOR * mesh.spacing[vertex]
    r_out = fit.r_out if fit.r_out is not None else min(FIT_OUTER_FACTOR * nn, FIT_OUTER_CAP)
    if r_out <= r_in:
        raise InsufficientSamples(f"Empty fit annulus at vertex {vertex}: r_in={r_in:.4f} r_out={r_out:.4f}")

    d = geodesic_distance(V, p)
    ring = np.flatnonzero((d > r_in) & (d < r_out) & ~ops.pinned)
    if ring.size < MIN_SAMPLES:
        raise InsufficientSamples(f"Only {ring.size} vertices in the fit annulus at vertex {vertex}")

    z = chart(V[ring])
    ray = reference_ray(ops.cut, mesh, vertex)
    theta_ref = float(np.angle(chart.tangent_to_complex(ray)[0]))
    psi = np.mod(np.angle(z) - theta_ref, 2.0 * np.pi)

    # gauge continuous across the cut path, discontinuous across the reference ray
    in_ring = np.zeros(mesh.n_vertices, dtype=bool)
    in_ring[ring] = True
    psi_full = np.full(mesh.n_vertices, np.nan)
    psi_full[ring] = psi
    e = mesh.edges
    edge_mask = in_ring[e[:, 0]] & in_ring[e[:, 1]]
    edge_mask[edge_mask] &= np.abs(psi_full[e[edge_mask, 0]] - psi_full[e[edge_mask, 1]]) <= np.pi
    root = int(ring[np.argmin(np.abs(psi - np.pi))])
    ratio = gauge_ratio(mesh, ops.signs.sigma < 0, in_ring, root, edge_mask=edge_mask)[ring]
    reached = ratio != 0
    if reached.sum() < MIN_SAMPLES:
        raise InsufficientSamples(f"Fit annulus at vertex {vertex} is disconnected")

    ring, z, psi, ratio = ring[reached], z[reached], psi[reached], ratio[reached]
    scale = float(np.abs(z).max())
    columns = []
    for k in range(fit.max_order + 1):
        w = (np.abs(z) / scale) ** (k + 0.5) * np.exp(1j * (k + 0.5) * (theta_ref + psi))
        columns += [w.real, w.imag]
    return _Annulus(
        vertex=vertex, chart=chart, samples=ring, gauge=ratio,
        design=np.column_stack(columns), scale=scale, max_order=fit.max_order,
    )


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def extract_branch_data(
    f: np.ndarray,
    vertex: int,
    ops: TwistedOperators,
    chart: Optional[StereoChart] = None,
    fit: Optional[FitParams] = None,
) -> BranchData:
    """Fit f ~ sum_k Re(A_k z^(k+1/2)) on an annulus around a branch vertex.

    n_p is the first order whose contribution exceeds rel_tol of the sampled
    section; a_p is its coefficient. f is a free-vertex section.
    """
    fit = fit or FitParams()
    ann = _annulus(ops, vertex, chart, fit)
    f_full = ops.expand(f)
    g = ann.gauge * f_full[ann.samples]
    coef = ann.coefficients(f_full)
    rms_g = _rms(g)
    if rms_g == 0:
        raise AmbiguousOrder(f"Section vanishes on the fit annulus at vertex {vertex}")

    order = None
    for k in range(fit.max_order + 1):
        contribution = ann.design[:, 2 * k:2 * k + 2] @ coef[2 * k:2 * k + 2]
        if _rms(contribution) > fit.rel_tol * rms_g:
            order = k
            break
    if order is None:
        raise AmbiguousOrder(f"No expansion order passes rel_tol={fit.rel_tol} at vertex {vertex}")

    A = ann.complex_coefficients(coef)
    fit_residual = _rms(g - ann.design @ coef) / rms_g
    return BranchData(
        vertex=vertex,
        point=ops.mesh.vertices[vertex].copy(),
        chart=ann.chart,
        a=complex(A[order]),
        n=order,
        fit_residual=fit_residual,
        coefficients=A,
        samples=int(ann.samples.size),
    )


def classify_vanishing(f: np.ndarray, ops: TwistedOperators, fit: Optional[FitParams] = None) -> Dict:
    data = [extract_branch_data(f, int(v), ops, fit=fit) for v in ops.signs.branch_vertices]
    return {
        "orders": [b.n for b in data],
        "p_f": [b.vertex for b in data if b.n == 0],
        "data": data,
    }


def branch_matrix(pairs: Sequence[EigenPair], ops: TwistedOperators, fit: Optional[FitParams] = None) -> np.ndarray:
    """B[p, j]: z^(1/2) coefficient of section j at branch vertex p (linear in the section)."""
    fit = fit or FitParams()
    branch = ops.signs.branch_vertices
    B = np.zeros((branch.size, len(pairs)), dtype=complex)
    try:
        for i, v in enumerate(branch):
            ann = _annulus(ops, int(v), None, fit)
            for j, pair in enumerate(pairs):
                B[i, j] = ann.complex_coefficients(ann.coefficients(ops.expand(pair.section)))[0]
    except (InsufficientSamples, AmbiguousOrder) as e:
        raise ExtractionFailed(f"Branch coefficient extraction failed: {str(e)}") from e
    return B


def critical_combination(
    cluster: Sequence[EigenPair], ops: TwistedOperators, fit: Optional[FitParams] = None
) -> Dict:
    """Unit combination of a cluster minimizing sum_p |a_p|^2 over the z^(1/2) coefficients.

    Returns the minimizing coefficients, the minimum, and the minimum relative
    to the largest eigenvalue of the Hermitian form.
    """
    B = branch_matrix(cluster, ops, fit)
    H = np.real(B.conj().T @ B)
    w, U = la.eigh(0.5 * (H + H.T))
    top = float(max(w[-1], 1e-300))
    result = {
        "coefficients": U[:, 0],
        "minimum": float(max(w[0], 0.0)),
        "maximum": float(w[-1]),
        "relative_minimum": float(max(w[0], 0.0)) / top,
        "form_eigenvalues": w.tolist(),
    }
    logger.info(
        f"Critical combination over {len(cluster)} sections: relative minimum {result['relative_minimum']:.3e}"
    )
    return result


def combine(cluster: Sequence[EigenPair], coefficients: np.ndarray) -> EigenPair:
    """M-orthonormal combination of cluster members (eigenvalue is the cluster mean)."""
    c = np.asarray(coefficients, dtype=float)
    c = c / np.linalg.norm(c)
    section = sum(ci * p.section for ci, p in zip(c, cluster))
    value = float(sum(ci * ci * p.eigenvalue for ci, p in zip(c, cluster)))
    residual = float(max(p.residual for p in cluster))
    return EigenPair(eigenvalue=value, section=section, residual=residual)
