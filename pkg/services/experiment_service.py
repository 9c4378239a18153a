import os
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import sympy
from scipy.optimize import linear_sum_assignment
from tqdm import tqdm

from services.asymptotics_service import classify_vanishing, critical_combination
from services.eigen_service import EigenPair, cluster_multiplicities, lowest_eigenpairs
from services.geometry_service import (
    Configuration,
    exp_map,
    fibonacci_sphere,
    geodesic_distance,
    log_cutoff,
    make_configuration,
    merge_direction,
    pair_configuration,
    platonic_configuration,
    stereo_chart,
)
from services.mesh_service import (
    EMPTY_CUT,
    HolonomyViolation,
    MatchingFailed,
    MeshDegenerate,
    MeshParams,
    TwistedOperators,
    assemble,
    build_cut_system,
    build_mesh,
    build_operators,
    crossing_parity,
    cut_curves,
    edge_signs,
    locate_points,
    rayleigh,
    reduced_operators,
    section_from_function,
    transfer_section,
    triangle_gradients,
    triangle_values,
)
from services.nodal_service import NoConnectingArc, connecting_arc, extract_zero_graph
from services.variation_service import eigenvalue_gradient, splitting_form

logger = logging.getLogger(__name__)

FLOW_STEP = float(os.getenv("Z2EIG_FLOW_STEP", "0.05"))
FLOW_MAX_ITERS = int(os.getenv("Z2EIG_FLOW_MAX_ITERS", "40"))
MULT_TOL = float(os.getenv("Z2EIG_MULT_TOL", "0.02"))
LINE_SEARCH_TOL = 1e-8
BACKTRACK_HALVINGS = 6
TRACK_THRESHOLD = float(os.getenv("Z2EIG_OVERLAP_THRESHOLD", "0.7"))
COALESCE_DEPTH = int(os.getenv("Z2EIG_COALESCE_DEPTH", "4"))


class MeshRebuildFailed(RuntimeError):
    pass


# C2 closed forms


@dataclass(frozen=True)
class C2ExactSpectrum:
    entries: Tuple[Tuple[sympy.Rational, int], ...]

    def values(self) -> List[float]:
        return [float(v) for v, _ in self.entries]

    def multiplicities(self) -> List[int]:
        return [m for _, m in self.entries]

    def expanded(self) -> List[float]:
        """Eigenvalues repeated by multiplicity, ascending."""
        return [float(v) for v, mult in self.entries for _ in range(mult)]


def c2_antipodal_spectrum(m_max: int) -> C2ExactSpectrum:
    """(m^2 - 1/4, 2m) for m = 1..m_max."""
    if m_max < 1:
        raise ValueError(f"m_max must be >= 1, got {m_max}")
    return C2ExactSpectrum(
        entries=tuple((sympy.Integer(m) ** 2 - sympy.Rational(1, 4), 2 * m) for m in range(1, m_max + 1))
    )


def c2_coincident_spectrum(m_max: int) -> C2ExactSpectrum:
    """(m(m+1), 2m+1) for m = 0..m_max: the round sphere."""
    if m_max < 0:
        raise ValueError(f"m_max must be >= 0, got {m_max}")
    return C2ExactSpectrum(entries=tuple((sympy.Integer(m * (m + 1)), 2 * m + 1) for m in range(m_max + 1)))


def c2_norm_constant(m: int) -> float:
    """N with N^2 int sin^(2m-1) sin^2((m-1/2)(phi-alpha)) dA = 1."""
    norm2 = np.pi**2 * math.factorial(2 * m) / (4**m * math.factorial(m) ** 2)
    return 1.0 / math.sqrt(norm2)


def _axis_angles(points: np.ndarray, axis) -> Tuple[np.ndarray, np.ndarray, object]:
    chart = stereo_chart(axis)
    x = np.atleast_2d(np.asarray(points, dtype=float))
    theta = np.arccos(np.clip(x @ chart.base, -1.0, 1.0))
    phi = np.mod(np.arctan2(x @ chart.e2, x @ chart.e1), 2.0 * np.pi)
    return theta, phi, chart


def c2_eigensection(m: int, alpha: float, points, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
    """N sin^(m-1/2)(theta) sin((m-1/2)(phi - alpha)), cut along the phi = 0 meridian.

    theta is measured from axis, phi in the frame of the axis chart.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    theta, phi, _ = _axis_angles(points, axis)
    k = m - 0.5
    return c2_norm_constant(m) * np.sin(theta) ** k * np.sin(k * (phi - alpha))


def c2_section_gradient(m: int, alpha: float, points, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Ambient tangential gradient of c2_eigensection (singular on the axis for m = 1)."""
    theta, phi, chart = _axis_angles(points, axis)
    k = m - 0.5
    s, c = np.sin(theta), np.cos(theta)
    scale = c2_norm_constant(m) * k * s ** (m - 1.5)
    d_theta = scale * c * np.sin(k * (phi - alpha))
    d_phi = scale * np.cos(k * (phi - alpha))
    e_theta = (
        (c * np.cos(phi))[:, None] * chart.e1
        + (c * np.sin(phi))[:, None] * chart.e2
        - s[:, None] * chart.base
    )
    e_phi = -np.sin(phi)[:, None] * chart.e1 + np.cos(phi)[:, None] * chart.e2
    return d_theta[:, None] * e_theta + d_phi[:, None] * e_phi


def c2_branch_coefficient(m: int, alpha: float, pole: str = "north") -> complex:
    """Leading coefficient of the closed-form section in the default chart at a pole (axis z).

    Defined up to sign; the order there is m - 1.
    """
    n = c2_norm_constant(m)
    k = m - 0.5
    if pole == "north":
        return complex(-1j * n * np.exp(-1j * k * alpha))
    if pole == "south":
        return complex(1j * n * np.exp(1j * k * alpha))
    raise ValueError(f"pole must be 'north' or 'south', got {pole}")


def c2_cut_curve(axis=(0.0, 0.0, 1.0), samples: int = 400) -> np.ndarray:
    chart = stereo_chart(axis)
    t = np.linspace(0.0, np.pi, samples)
    return np.cos(t)[:, None] * chart.base + np.sin(t)[:, None] * chart.e1


def c2_section_on_mesh(ops: TwistedOperators, m: int, alpha: float, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Closed-form section sampled at mesh vertices, in the mesh gauge, M-normalized."""
    values = c2_eigensection(m, alpha, ops.mesh.vertices, axis)
    values[ops.pinned] = 0.0
    f = section_from_function(ops, values, [c2_cut_curve(axis)])
    return f / np.sqrt(float(f @ (ops.mass @ f)))


# Spectral flow on C2


@dataclass
class SpectralFlow:
    separations: List[float]
    branches: np.ndarray  # (steps, n_eigs), column j follows one branch
    min_overlaps: List[float]
    swaps: List[Dict] = field(default_factory=list)

    def endpoint_report(self) -> Dict:
        start = np.sort(self.branches[0])
        end = np.sort(self.branches[-1])
        n = self.branches.shape[1]
        antipodal = np.array(c2_antipodal_spectrum(4).expanded()[:n])
        coincident = np.array(c2_coincident_spectrum(4).expanded()[:n])
        return {
            "start": start.tolist(),
            "end": end.tolist(),
            "start_vs_antipodal": (np.abs(start - antipodal) / antipodal).tolist(),
            "end_vs_coincident": (np.abs(end - coincident)).tolist(),
        }


def _align_clusters(ops: TwistedOperators, pairs: List[EigenPair], nu) -> List[EigenPair]:
    """Rotate each degenerate cluster onto the eigenvectors of its splitting form."""
    out = list(pairs)
    for cluster in cluster_multiplicities([p.eigenvalue for p in pairs]):
        if cluster.multiplicity < 2 or cluster.members[-1] == len(pairs) - 1:
            continue
        members = [pairs[i] for i in cluster.members]
        form = splitting_form(members, nu, ops)
        for col, i in enumerate(cluster.members):
            section = sum(form.vectors[r, col] * p.section for r, p in enumerate(members))
            out[i] = EigenPair(eigenvalue=members[col].eigenvalue, section=section, residual=members[col].residual)
    return out


def spectral_flow_c2(
    separations: Sequence[float],
    n_eigs: int = 6,
    params: Optional[MeshParams] = None,
    seed: int = 0,
    progress: bool = False,
) -> SpectralFlow:
    """Track the lowest n_eigs branches as two points move from separation[0] toward 0.

    Each step rebuilds the mesh; sections are transferred to the new mesh and
    matched to the new eigenpairs by maximal mass overlap.
    """
    separations = [float(s) for s in separations]
    if any(not 0 < s <= np.pi for s in separations):
        raise ValueError("Separations must lie in (0, pi]")
    if any(b >= a for a, b in zip(separations, separations[1:])):
        raise ValueError("Separations must be strictly decreasing")

    config = pair_configuration(separations[0])
    ops = build_operators(config, params)
    # one extra pair so the top cluster is complete when it is degenerate
    pairs = lowest_eigenpairs(ops, n_eigs + 1, seed=seed)
    pairs = _align_clusters(ops, pairs, merge_direction(config))[:n_eigs]
    rows = [[p.eigenvalue for p in pairs]]
    order = np.arange(n_eigs)
    min_overlaps = [1.0]
    swaps: List[Dict] = []

    for s in tqdm(separations[1:], desc="spectral flow", disable=not progress):
        config = pair_configuration(s)
        new_ops = build_operators(config, params)
        new_pairs = lowest_eigenpairs(new_ops, n_eigs, seed=seed)
        moved = np.column_stack([transfer_section(ops, p.section, new_ops) for p in pairs])
        moved /= np.sqrt(np.einsum("ij,i,ij->j", moved, new_ops.mass_diag, moved))[None, :]
        overlap = np.abs(moved.T @ (new_ops.mass @ np.column_stack([p.section for p in new_pairs])))
        prev_idx, new_idx = linear_sum_assignment(-overlap)
        matched = overlap[prev_idx, new_idx]
        for i, j, o in zip(prev_idx, new_idx, matched):
            if o < TRACK_THRESHOLD:
                swaps.append({"separation": s, "branch": int(order[i]), "overlap": float(o)})
                logger.warning(f"Branch {int(order[i])} overlap {o:.3f} at separation {s:.4f}")
        mapping = np.empty(n_eigs, dtype=int)
        mapping[prev_idx] = new_idx
        pairs = [new_pairs[mapping[i]] for i in range(n_eigs)]
        rows.append([p.eigenvalue for p in pairs])
        min_overlaps.append(float(matched.min()))
        ops = new_ops

    flow = SpectralFlow(separations=separations, branches=np.array(rows), min_overlaps=min_overlaps, swaps=swaps)
    logger.info(f"Spectral flow over {len(separations)} separations, {len(swaps)} low-overlap matches")
    return flow


# Gradient ascent


@dataclass(frozen=True)
class FlowStep:
    points: np.ndarray
    eigenvalues: List[float]
    gradient_norm: float
    multiplicity: int
    step: float

    def to_dict(self) -> Dict:
        return {
            "points": self.points.tolist(),
            "eigenvalues": self.eigenvalues,
            "gradient_norm": self.gradient_norm,
            "multiplicity": self.multiplicity,
            "step": self.step,
        }


@dataclass
class FlowTrajectory:
    steps: List[FlowStep]
    reason: str

    def lowest(self) -> List[float]:
        return [s.eigenvalues[0] for s in self.steps]


def _rebuild(config: Configuration, params: Optional[MeshParams]) -> TwistedOperators:
    try:
        return build_operators(config, params)
    except (MeshDegenerate, MatchingFailed, HolonomyViolation) as e:
        error_msg = f"Mesh rebuild failed during flow: {str(e)}"
        logger.error(error_msg)
        raise MeshRebuildFailed(error_msg) from e


def _lowest_cluster(pairs: Sequence[EigenPair], mult_tol: float) -> int:
    lam = pairs[0].eigenvalue
    count = 1
    for p in pairs[1:]:
        if (p.eigenvalue - lam) / max(abs(lam), 1e-12) < mult_tol:
            count += 1
    return count


def flow_ascent(
    config0: Configuration,
    step: float = FLOW_STEP,
    max_iters: int = FLOW_MAX_ITERS,
    mult_tol: float = MULT_TOL,
    grad_tol: float = 1e-6,
    params: Optional[MeshParams] = None,
    seed: int = 0,
    progress: bool = False,
    threads: int = 1,
) -> FlowTrajectory:
    """Retracted gradient ascent of the lowest eigenvalue with backtracking.

    Stops when the lowest cluster becomes degenerate (relative gap below
    mult_tol), the gradient vanishes, the line search fails, or after max_iters.
    Backtracking candidates are solved `threads` at a time; the largest
    accepted step wins either way.
    """
    config = config0
    steps: List[FlowStep] = []
    ops = _rebuild(config, params)
    pairs = lowest_eigenpairs(ops, 3, seed=seed)
    for it in tqdm(range(max_iters), desc="flow", disable=not progress):
        multiplicity = _lowest_cluster(pairs, mult_tol)
        eigenvalues = [p.eigenvalue for p in pairs]
        if multiplicity > 1:
            steps.append(FlowStep(config.points, eigenvalues, float("nan"), multiplicity, 0.0))
            logger.info(f"Flow reached a degenerate lowest cluster after {it} steps")
            return FlowTrajectory(steps=steps, reason="degenerate_cluster")

        census = classify_vanishing(pairs[0].section, ops)
        gradient = eigenvalue_gradient(census["data"], config.n_points, multiplicity)
        g = gradient.vectors
        g_norm = gradient.norm()
        if g_norm < grad_tol:
            steps.append(FlowStep(config.points, eigenvalues, g_norm, multiplicity, 0.0))
            return FlowTrajectory(steps=steps, reason="stationary")

        def _trial(t: float) -> tuple:
            trial = make_configuration(exp_map(config.points, (t / g_norm) * g))
            trial_ops = _rebuild(trial, params)
            return trial, trial_ops, lowest_eigenpairs(trial_ops, 3, seed=seed)

        candidates = [step * 0.5**j for j in range(BACKTRACK_HALVINGS)]
        accepted = None
        t = 0.0
        for start in range(0, len(candidates), threads):
            batch = candidates[start:start + threads]
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    futures = [pool.submit(_trial, t_try) for t_try in batch]
                outcomes = [f.result for f in futures]
            else:
                outcomes = [lambda: _trial(batch[0])]
            # read in step order so failures past the accepted step stay silent
            for t_try, outcome in zip(batch, outcomes):
                result = outcome()
                if result[2][0].eigenvalue >= pairs[0].eigenvalue - LINE_SEARCH_TOL:
                    accepted, t = result, t_try
                    break
            if accepted is not None:
                break
        steps.append(FlowStep(config.points, eigenvalues, g_norm, multiplicity, t))
        if accepted is None:
            return FlowTrajectory(steps=steps, reason="line_search")
        config, ops, pairs = accepted
        logger.info(f"Flow step {it}: lambda_1 = {pairs[0].eigenvalue:.6f}, |grad| = {g_norm:.4f}, t = {t:.4f}")

    steps.append(
        FlowStep(config.points, [p.eigenvalue for p in pairs], float("nan"), _lowest_cluster(pairs, mult_tol), 0.0)
    )
    return FlowTrajectory(steps=steps, reason="max_iters")


# Packing


def packing_config(R: float) -> Configuration:
    """Greedy maximal R-separated set from a Fibonacci stream, each point split into a pair R/8 apart.

    The partners sit on opposite sides of the great circle through the centre
    along z x q (x when the centre is near a pole).
    """
    if not 0.1 <= R <= 1.5:
        raise ValueError(f"Packing radius must lie in [0.1, 1.5], got {R}")
    candidates = fibonacci_sphere(max(2000, int(np.ceil(522.0 / R**2))))
    centres = np.zeros((0, 3))
    for c in candidates:
        if centres.shape[0] == 0 or geodesic_distance(centres, c).min() >= R:
            centres = np.vstack([centres, c])
    z = np.array([0.0, 0.0, 1.0])
    direction = np.cross(z, centres)
    polar = np.linalg.norm(direction, axis=1) < 1e-3
    direction[polar] = np.array([1.0, 0.0, 0.0]) - centres[polar][:, [0]] * centres[polar]
    direction /= np.linalg.norm(direction, axis=1)[:, None]
    plus = exp_map(centres, (R / 16.0) * direction)
    minus = exp_map(centres, -(R / 16.0) * direction)
    points = np.empty((2 * len(centres), 3))
    points[0::2] = plus
    points[1::2] = minus
    return make_configuration(points)


def packing_mesh_params(R: float) -> MeshParams:
    return MeshParams(background_count=max(2000, int(522.0 / R**2)), grade_depth=3, grade_radius=R / 4.0)


def _untwisted(mesh) -> TwistedOperators:
    return assemble(mesh, edge_signs(EMPTY_CUT, mesh))


def _packing_row(R: float, seed: int) -> Dict:
    config = packing_config(R)
    pairing = [(2 * i, 2 * i + 1) for i in range(config.n_pairs)]
    mesh = build_mesh(config, packing_mesh_params(R))
    ops = build_operators(config, pairing=pairing, mesh=mesh)
    energy = lowest_eigenpairs(ops, 1, seed=seed)[0].eigenvalue
    control = lowest_eigenpairs(_untwisted(mesh), 1, seed=seed)[0].eigenvalue
    n = config.n_pairs
    row = {
        "R": R,
        "n_points": config.n_points,
        "n_pairs": n,
        "E": energy,
        "E_R2": energy * R**2,
        "E_over_n": energy / n,
        "count_constant": n * R**2,
        "untwisted": control,
        "vertices": mesh.n_vertices,
    }
    logger.info(f"Packing R={R}: {config.n_points} points, E = {energy:.4f}, E R^2 = {row['E_R2']:.4f}")
    return row


def packing_eigenvalue_study(radii: Sequence[float], threads: int = 1, seed: int = 0, progress: bool = False) -> List[Dict]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda r: _packing_row(r, seed), radii))
    return [_packing_row(r, seed) for r in tqdm(radii, desc="packing", disable=not progress)]


# Coalescence and pair insertion


def _insertion_point(base: Configuration, params: Optional[MeshParams], seed: int) -> np.ndarray:
    ops = build_operators(base, params)
    f = np.abs(ops.expand(lowest_eigenpairs(ops, 1, seed=seed)[0].section))
    dist = geodesic_distance(ops.mesh.vertices[:, None, :], base.points[None, :, :]).min(axis=1)
    f[dist < 0.3] = 0.0
    return ops.mesh.vertices[int(np.argmax(f))].copy()


def _inserted(base: Configuration, x: np.ndarray, s: float) -> Configuration:
    t = stereo_chart(x).e1
    return base.union(make_configuration(exp_map(np.vstack([x, x]), np.vstack([0.5 * s * t, -0.5 * s * t]))))


def _coalesce_params(params: Optional[MeshParams]) -> MeshParams:
    base = params or MeshParams()
    return MeshParams(background_count=base.background_count, grade_depth=COALESCE_DEPTH, grade_radius=base.grade_radius)


def _pair_operators(base: Configuration, x: np.ndarray, s: float, params: MeshParams) -> Tuple[TwistedOperators, TwistedOperators]:
    config = _inserted(base, x, s)
    mesh = build_mesh(config, params)
    base_pairs = list(build_cut_system(base, mesh).pairs)
    n = base.n_points
    ops = build_operators(config, pairing=base_pairs + [(n, n + 1)], mesh=mesh)
    return ops, reduced_operators(ops, [n, n + 1])


def _coalesce_row(base: Configuration, x: np.ndarray, s: float, params: MeshParams, seed: int) -> Dict:
    ops, ops_q = _pair_operators(base, x, s, params)
    e_p = lowest_eigenpairs(ops, 1, seed=seed)[0].eigenvalue
    f_q = lowest_eigenpairs(ops_q, 1, seed=seed)[0]
    e_q = f_q.eigenvalue

    n = base.n_points
    eps = (0.6 * s) ** (8.0 / 7.0) / 100.0
    V = ops.mesh.vertices
    dist = geodesic_distance(V[:, None, :], V[None, n:n + 2, :]).min(axis=1)
    chi = log_cutoff(dist, eps)
    # zero on the inserted pair's crossing edges so chi f lives in both gauges
    pair_cut = ops.cut.without(range(n))
    crossing = pair_cut.crossing_edges(ops.mesh)
    chi[ops.mesh.edges[crossing].ravel()] = 0.0
    g_full = chi * ops_q.expand(f_q.section)
    g = ops.restrict(g_full)
    quotient = rayleigh(g, ops)
    logger.info(f"Coalesce s={s}: E_p = {e_p:.5f}, E_q = {e_q:.5f}, transfer RQ = {quotient:.5f}")
    return {
        "separation": s,
        "E_p": e_p,
        "E_q": e_q,
        "gap": (e_p - e_q) / e_q,
        "transfer_rayleigh": quotient,
        "e1": float(g @ (ops.stiffness @ g)) - e_q,
        "e2": float(g @ (ops.mass @ g)) - 1.0,
        "eps": eps,
        "x": x.tolist(),
    }


def coalesce_study(
    base: Configuration,
    separations: Sequence[float],
    x: Optional[np.ndarray] = None,
    params: Optional[MeshParams] = None,
    seed: int = 0,
    progress: bool = False,
    threads: int = 1,
) -> List[Dict]:
    """Insert a pair at x with shrinking separation; compare with the base spectrum on the same mesh.

    Each row also carries the cutoff transfer of the base ground state: its
    Rayleigh quotient in the paired problem and the energy and mass defects.
    Rows come back in the order of `separations` for any thread count.
    """
    params = _coalesce_params(params)
    if x is None:
        x = _insertion_point(base, params, seed)
    values = [float(s) for s in separations]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda s: _coalesce_row(base, x, s, params, seed), values))
    return [_coalesce_row(base, x, s, params, seed) for s in tqdm(values, desc="coalesce", disable=not progress)]


def pair_identity_check(
    base: Configuration,
    separation: float,
    x: Optional[np.ndarray] = None,
    params: Optional[MeshParams] = None,
    seed: int = 0,
) -> Dict:
    """(E_p - E_q) int f_q f_p' against 2 int_Sigma sigma f_q |grad f_p|.

    Sigma is the nodal arc of f_p joining the inserted pair; f_p' is f_p with
    the region bounded by Sigma and the pair's cut curve flipped, which makes it
    a section of the base bundle.
    """
    params = _coalesce_params(params)
    if x is None:
        x = _insertion_point(base, params, seed)
    ops, ops_q = _pair_operators(base, x, float(separation), params)
    mesh = ops.mesh
    n = base.n_points
    p_pair = lowest_eigenpairs(ops, 1, seed=seed)[0]
    q_pair = lowest_eigenpairs(ops_q, 1, seed=seed)[0]

    graph = extract_zero_graph(p_pair.section, ops)
    try:
        arc = connecting_arc(graph, n, n + 1)
    except NoConnectingArc:
        logger.error(f"No nodal arc joins the inserted pair at separation {separation}")
        raise
    k = [i for i, pr in enumerate(ops.cut.pairs) if set(pr) == {n, n + 1}][0]
    cut_curve = cut_curves(ops.cut, mesh)[k]

    # inside/outside of the loop arc + cut curve, read from a point well outside it
    reach = max(10.0 * separation, 0.1)
    out_dir = stereo_chart(x).e2
    outside = exp_map(x[None], 2.0 * reach * out_dir[None])[0]
    near = np.flatnonzero(geodesic_distance(mesh.vertices, x) < reach)
    inside = np.zeros(mesh.n_vertices, dtype=bool)
    inside[near] = crossing_parity(np.broadcast_to(outside, (near.size, 3)), mesh.vertices[near], [arc, cut_curve])

    f_p = ops.expand(p_pair.section) * np.where(inside, -1.0, 1.0)
    f_q = ops_q.expand(q_pair.section)
    ref = int(np.argmin(geodesic_distance(mesh.vertices, outside)))
    if f_p[ref] * f_q[ref] < 0:
        f_p = -f_p
    integral = float(np.sum(mesh.vertex_areas * f_q * f_p))
    lhs = (p_pair.eigenvalue - q_pair.eigenvalue) * integral

    mids = arc[:-1] + arc[1:]
    mids /= np.linalg.norm(mids, axis=1)[:, None]
    lengths = geodesic_distance(arc[:-1], arc[1:])
    tri_idx, bary = locate_points(mesh, mids)
    local_q = triangle_values(ops_q, f_q)[tri_idx]
    local_p = triangle_values(ops_q, f_p)[tri_idx]
    grad_p = np.linalg.norm(triangle_gradients(ops, triangle_values(ops, ops.expand(p_pair.section)))[tri_idx], axis=1)
    side = np.sign(local_p[np.arange(len(tri_idx)), np.argmax(np.abs(local_p), axis=1)])
    f_q_mid = np.sum(bary * local_q, axis=1)
    rhs = float(2.0 * np.sum(lengths * grad_p * side * f_q_mid))

    result = {
        "separation": float(separation),
        "E_p": p_pair.eigenvalue,
        "E_q": q_pair.eigenvalue,
        "integral": integral,
        "lhs": lhs,
        "rhs": rhs,
        "residual": abs(lhs - rhs) / max(abs(lhs) + abs(rhs), 1e-300),
        "signs_agree": bool(np.sign(lhs) == np.sign(rhs)),
        "arc_length": float(lengths.sum()),
    }
    logger.info(f"Pair identity s={separation}: lhs {lhs:.4e}, rhs {rhs:.4e}")
    return result


# Platonic survey


def platonic_criticality(
    kinds: Sequence[str] = ("tetrahedron", "cube", "icosahedron"),
    n_eigs: int = 12,
    params: Optional[MeshParams] = None,
    seed: int = 0,
) -> List[Dict]:
    """Lowest clusters of each solid's configuration with the critical-combination minimum per cluster."""
    rows = []
    for kind in kinds:
        config = platonic_configuration(kind)
        ops = build_operators(config, params)
        pairs = lowest_eigenpairs(ops, n_eigs, seed=seed)
        for cluster in cluster_multiplicities([p.eigenvalue for p in pairs]):
            if cluster.members[-1] == n_eigs - 1:
                break
            crit = critical_combination([pairs[i] for i in cluster.members], ops)
            rows.append(
                {
                    "kind": kind,
                    "eigenvalue": cluster.value,
                    "multiplicity": cluster.multiplicity,
                    "relative_minimum": crit["relative_minimum"],
                }
            )
        logger.info(f"Platonic {kind}: {sum(1 for r in rows if r['kind'] == kind)} complete clusters")
    return rows
