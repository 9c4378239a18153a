import os
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh, lobpcg

from services.mesh_service import TwistedOperators, hardy_ratio, untwisted_stiffness

logger = logging.getLogger(__name__)

SOLVER_SHIFT = float(os.getenv("Z2EIG_SOLVER_SHIFT", "-0.1"))
SOLVER_TOL = float(os.getenv("Z2EIG_SOLVER_TOL", "1e-6"))
DENSE_LIMIT = int(os.getenv("Z2EIG_DENSE_LIMIT", "600"))
LOBPCG_MAXITER = int(os.getenv("Z2EIG_LOBPCG_MAXITER", "500"))
DEFAULT_SEED = int(os.getenv("Z2EIG_SEED", "0"))
GAP_FACTOR = float(os.getenv("Z2EIG_GAP_FACTOR", "0.08"))
NEGATIVE_TOL = -1e-10


class NoConvergence(RuntimeError):
    def __init__(self, message: str, residuals: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else []


@dataclass(frozen=True)
class EigenPair:
    eigenvalue: float
    section: np.ndarray  # free-vertex values, f'Mf = 1
    residual: float


@dataclass(frozen=True)
class SpectrumCluster:
    value: float
    members: Tuple[int, ...]

    @property
    def multiplicity(self) -> int:
        return len(self.members)


def residual(ops: TwistedOperators, pair: EigenPair) -> float:
    """||Sf - lambda Mf|| / ||Mf||."""
    f = pair.section
    mf = ops.mass @ f
    return float(np.linalg.norm(ops.stiffness @ f - pair.eigenvalue * mf) / np.linalg.norm(mf))


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _rayleigh_ritz(ops: TwistedOperators, basis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = basis.T @ (ops.stiffness @ basis)
    b = basis.T @ (ops.mass @ basis)
    w, q = la.eigh(0.5 * (a + a.T), 0.5 * (b + b.T))
    return w, basis @ q


def _lobpcg(ops: TwistedOperators, k: int, tol: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n = ops.n_free
    block = min(n - 1, k + max(2, k // 2))
    x0 = rng.standard_normal((n, block))
    precond = sp.diags(1.0 / (ops.stiffness.diagonal() + 0.1 * ops.mass_diag))
    w, v = lobpcg(
        ops.stiffness, x0, B=ops.mass, M=precond, largest=False, tol=tol, maxiter=LOBPCG_MAXITER
    )
    order = np.argsort(w)[:k]
    return w[order], v[:, order]


def dense_eigenpairs(ops: TwistedOperators, k: int) -> List[EigenPair]:
    """Dense generalized symmetric solve; the oracle for small meshes."""
    a = ops.stiffness.toarray()
    w, v = la.eigh(0.5 * (a + a.T), np.diag(ops.mass_diag), subset_by_index=[0, k - 1])
    return _pairs(ops, w, _canonical_signs(v))


def _pairs(ops: TwistedOperators, values: np.ndarray, vectors: np.ndarray) -> List[EigenPair]:
    out = []
    for lam, f in zip(values, vectors.T):
        f = np.ascontiguousarray(f)
        pair = EigenPair(eigenvalue=float(lam), section=f, residual=0.0)
        out.append(EigenPair(eigenvalue=float(lam), section=f, residual=residual(ops, pair)))
    return out


def lowest_eigenpairs(
    ops: TwistedOperators,
    k: int,
    tol: float = SOLVER_TOL,
    seed: int = DEFAULT_SEED,
    dense: Optional[bool] = None,
) -> List[EigenPair]:
    """Lowest k eigenpairs of S f = lambda M f, M-orthonormal, ascending.

    Shift-invert Lanczos at SOLVER_SHIFT with a Rayleigh-Ritz cleanup; LOBPCG
    with a diagonal preconditioner if Lanczos fails. Meshes with at most
    DENSE_LIMIT free vertices use a dense solve unless dense=False.
    """
    n = ops.n_free
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k >= n:
        raise ValueError(f"k={k} exceeds the {n} free vertices")

    if dense or (dense is None and n <= DENSE_LIMIT):
        pairs = dense_eigenpairs(ops, k)
    else:
        rng = np.random.default_rng(seed)
        try:
            _, basis = eigsh(
                ops.stiffness, k=k, M=ops.mass, sigma=SOLVER_SHIFT, which="LM",
                v0=rng.standard_normal(n), tol=0,
            )
        except (ArpackNoConvergence, ArpackError, RuntimeError) as e:
            logger.warning(f"Lanczos failed ({str(e)}); falling back to LOBPCG")
            try:
                _, basis = _lobpcg(ops, k, tol, rng)
            except Exception as e2:
                error_msg = f"Eigensolver failed: Lanczos and LOBPCG both failed: {str(e2)}"
                logger.error(error_msg)
                raise NoConvergence(error_msg) from e2
        w, v = _rayleigh_ritz(ops, basis)
        pairs = _pairs(ops, w, _canonical_signs(v))

    residuals = [p.residual for p in pairs]
    scale = max(1.0, max(abs(p.eigenvalue) for p in pairs))
    if max(residuals) > tol * scale:
        error_msg = f"Eigenpairs did not reach tolerance {tol}: residuals {residuals}"
        logger.error(error_msg)
        raise NoConvergence(error_msg, residuals)
    if pairs[0].eigenvalue < NEGATIVE_TOL:
        error_msg = f"Lowest eigenvalue {pairs[0].eigenvalue:.3e} is negative; operators are not positive semidefinite"
        logger.error(error_msg)
        raise NoConvergence(error_msg, residuals)
    logger.info(
        f"Solved {k} eigenpairs on {n} free vertices: "
        f"{', '.join(f'{p.eigenvalue:.5f}' for p in pairs)}"
    )
    return pairs


def cluster_multiplicities(eigs: Sequence[float], gap_tol: Optional[float] = None) -> List[SpectrumCluster]:
    """Greedy gap clustering of a sorted spectrum.

    A new cluster starts when the gap to the previous value exceeds gap_tol,
    or GAP_FACTOR * max(1, value) when gap_tol is None.
    """
    values = np.asarray(eigs, dtype=float)
    if values.size == 0:
        return []
    if np.any(np.diff(values) < -1e-12):
        raise ValueError("cluster_multiplicities expects sorted input")
    groups: List[List[int]] = [[0]]
    for i in range(1, values.size):
        tol = gap_tol if gap_tol is not None else GAP_FACTOR * max(1.0, values[i - 1])
        if values[i] - values[i - 1] > tol:
            groups.append([i])
        else:
            groups[-1].append(i)
    return [SpectrumCluster(value=float(values[g].mean()), members=tuple(g)) for g in groups]


def spectrum_summary(pairs: Sequence[EigenPair], clusters: Sequence[SpectrumCluster]) -> Dict:
    return {
        "eigenvalues": [p.eigenvalue for p in pairs],
        "residuals": [p.residual for p in pairs],
        "clusters": [{"value": c.value, "multiplicity": c.multiplicity} for c in clusters],
    }


def apriori_report(ops: TwistedOperators, pairs: Sequence[EigenPair]) -> List[Dict]:
    """Energy identity, |f| energy bound, sup-norm ratio and Hardy ratio per eigenpair."""
    plain = untwisted_stiffness(ops.mesh)
    rows = []
    for k, pair in enumerate(pairs):
        f = pair.section
        energy = float(f @ (ops.stiffness @ f))
        g = np.abs(ops.expand(f))
        abs_energy = float(g @ (plain @ g))
        row = {
            "index": k,
            "eigenvalue": pair.eigenvalue,
            "energy": energy,
            "identity_error": abs(energy - pair.eigenvalue) / max(abs(pair.eigenvalue), 1e-12),
            "abs_energy": abs_energy,
            "sup_ratio": float(np.max(np.abs(f))) / (pair.eigenvalue + 1.0),
        }
        if ops.signs.branch_vertices.size and energy > 0:
            row["hardy_ratio"] = hardy_ratio(ops, f)
        rows.append(row)
    return rows
