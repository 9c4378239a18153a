import os
import logging
import traceback
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, dijkstra
from scipy.spatial import ConvexHull, cKDTree
from tenacity import (
    before_sleep_log,
    retry,
    retry_if_exception_type,
    stop_after_attempt,
)

from services.geometry_service import (
    Configuration,
    cutoff,
    fibonacci_sphere,
    geodesic_distance,
    log_map,
    pairwise_distances,
    stereo_chart,
)

logger = logging.getLogger(__name__)

BACKGROUND_COUNT = int(os.getenv("Z2EIG_BACKGROUND_COUNT", "4000"))
GRADE_DEPTH = int(os.getenv("Z2EIG_GRADE_DEPTH", "3"))
GRADE_RADIUS = float(os.getenv("Z2EIG_GRADE_RADIUS", "0.4"))
MIN_ANGLE_DEG = float(os.getenv("Z2EIG_MIN_ANGLE", "5.0"))
CUT_ATTEMPTS = int(os.getenv("Z2EIG_CUT_ATTEMPTS", "4"))

# position of the shifted cut curve along each crossing edge
CURVE_FRACTION = 0.4711


class MeshDegenerate(RuntimeError):
    pass


class MatchingFailed(RuntimeError):
    pass


class HolonomyViolation(RuntimeError):
    pass


class ZeroSection(ValueError):
    pass


@dataclass(frozen=True)
class MeshParams:
    background_count: int = BACKGROUND_COUNT
    grade_depth: int = GRADE_DEPTH
    grade_radius: float = GRADE_RADIUS

    def __post_init__(self):
        if self.background_count < 500:
            raise ValueError(f"background_count must be >= 500, got {self.background_count}")
        if self.grade_depth < 0:
            raise ValueError(f"grade_depth must be >= 0, got {self.grade_depth}")
        if self.grade_radius <= 0:
            raise ValueError(f"grade_radius must be positive, got {self.grade_radius}")

    def to_dict(self) -> Dict:
        return {
            "background_count": self.background_count,
            "grade_depth": self.grade_depth,
            "grade_radius": self.grade_radius,
        }


# Mesh


@dataclass(frozen=True)
class SphericalMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    n_flagged: int
    edges: np.ndarray
    triangle_edges: np.ndarray  # column m: edge opposite local vertex m
    edge_weights: np.ndarray
    edge_lengths: np.ndarray
    vertex_areas: np.ndarray
    triangle_areas: np.ndarray
    spacing: np.ndarray
    min_angle: float

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @property
    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_triangles

    @property
    def negative_weight_fraction(self) -> float:
        return float(np.mean(self.edge_weights < 0))

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        e = self.edges
        n = self.n_vertices
        ids = np.arange(1, self.n_edges + 1)
        return sp.csr_matrix(
            (np.concatenate([ids, ids]), (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
            shape=(n, n),
        )

    @cached_property
    def triangle_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, m]] for m in range(3))
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1)[:, None]

    def neighbors(self, v: int) -> np.ndarray:
        adj = self.adjacency
        return adj.indices[adj.indptr[v]:adj.indptr[v + 1]]

    def edge_index(self, i, j) -> np.ndarray:
        """Edge ids for vertex pairs; -1 where no edge exists."""
        i = np.atleast_1d(i)
        j = np.atleast_1d(j)
        if i.size == 0:
            return np.zeros(0, dtype=int)
        return np.asarray(self.adjacency[i, j]).ravel().astype(int) - 1

    def edge_graph(
        self,
        allowed: Optional[np.ndarray] = None,
        weighted: bool = True,
        edge_mask: Optional[np.ndarray] = None,
    ) -> sp.csr_matrix:
        e = self.edges
        keep = np.ones(self.n_edges, dtype=bool) if edge_mask is None else edge_mask.copy()
        if allowed is not None:
            keep &= allowed[e[:, 0]] & allowed[e[:, 1]]
        data = self.edge_lengths[keep] if weighted else np.ones(int(keep.sum()))
        n = self.n_vertices
        g = sp.coo_matrix((data, (e[keep, 0], e[keep, 1])), shape=(n, n))
        return (g + g.T).tocsr()

    def element_gradients(self) -> np.ndarray:
        """(F, 3, 3): gradient of the linear hat function of local vertex m."""
        tri = self.triangles
        x = [self.vertices[tri[:, m]] for m in range(3)]
        n = self.triangle_normals
        area2 = 2.0 * self.triangle_areas
        grads = np.empty((self.n_triangles, 3, 3))
        for m in range(3):
            b, c = x[(m + 1) % 3], x[(m + 2) % 3]
            grads[:, m, :] = np.cross(n, c - b) / area2[:, None]
        return grads

    def nearest_branch_distance(self, branch: np.ndarray) -> np.ndarray:
        if branch.size == 0:
            return np.full(self.n_vertices, np.pi)
        pts = self.vertices[branch]
        return geodesic_distance(self.vertices[:, None, :], pts[None, :, :]).min(axis=1)


def _hull_triangles(vertices: np.ndarray) -> np.ndarray:
    try:
        hull = ConvexHull(vertices)
    except Exception as e:
        error_msg = f"Convex hull of {len(vertices)} sphere points failed: {str(e)}"
        logger.error(error_msg)
        raise MeshDegenerate(error_msg) from e
    tri = hull.simplices.astype(np.int64)
    if len(np.unique(tri)) != len(vertices):
        raise MeshDegenerate("Some points were not hull vertices (near duplicates)")
    return tri


def finalize_mesh(vertices: np.ndarray, triangles: np.ndarray, n_flagged: int) -> SphericalMesh:
    """Orient triangles and compute edges, cotangent weights, areas and quality."""
    vertices = np.asarray(vertices, dtype=float)
    tri = np.array(triangles, dtype=np.int64)
    a, b, c = (vertices[tri[:, m]] for m in range(3))
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]

    opposite = np.vstack([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]])
    edges, inverse = np.unique(np.sort(opposite, axis=1), axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    n_tri = tri.shape[0]
    triangle_edges = inverse.reshape(3, n_tri).T

    weights = np.zeros(len(edges))
    angles = np.empty((n_tri, 3))
    for m in range(3):
        k = vertices[tri[:, m]]
        u = vertices[tri[:, (m + 1) % 3]] - k
        v = vertices[tri[:, (m + 2) % 3]] - k
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        dot = np.einsum("ij,ij->i", u, v)
        angles[:, m] = np.arctan2(cross, dot)
        with np.errstate(divide="ignore"):
            cot = dot / cross
        np.add.at(weights, triangle_edges[:, m], 0.5 * cot)

    a, b, c = (vertices[tri[:, m]] for m in range(3))
    flat_areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if np.any(flat_areas <= 0):
        raise MeshDegenerate("Mesh has zero-area triangles")
    triple = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    denom = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    spherical_areas = 2.0 * np.arctan2(triple, denom)
    vertex_areas = np.zeros(len(vertices))
    for m in range(3):
        np.add.at(vertex_areas, tri[:, m], spherical_areas / 3.0)

    lengths = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
    total = np.zeros(len(vertices))
    degree = np.zeros(len(vertices))
    for col in range(2):
        np.add.at(total, edges[:, col], lengths)
        np.add.at(degree, edges[:, col], 1.0)
    spacing = total / np.maximum(degree, 1.0)

    min_angle = float(np.degrees(angles.min()))
    mesh = SphericalMesh(
        vertices=vertices,
        triangles=tri,
        n_flagged=int(n_flagged),
        edges=edges,
        triangle_edges=triangle_edges,
        edge_weights=weights,
        edge_lengths=lengths,
        vertex_areas=vertex_areas,
        triangle_areas=flat_areas,
        spacing=spacing,
        min_angle=min_angle,
    )
    if mesh.euler_characteristic != 2:
        raise MeshDegenerate(f"Euler characteristic {mesh.euler_characteristic}, expected 2")
    if min_angle < MIN_ANGLE_DEG:
        raise MeshDegenerate(f"Minimum angle {min_angle:.2f} deg below {MIN_ANGLE_DEG} deg")
    return mesh


def _clear_background(background: np.ndarray, points: np.ndarray, radius: float) -> np.ndarray:
    """Push background points out of the radius around configuration points."""
    bg = background.copy()
    if points.size == 0:
        return bg
    for _ in range(3):
        dist = geodesic_distance(bg[:, None, :], points[None, :, :])
        nearest = np.argmin(dist, axis=1)
        d = dist[np.arange(len(bg)), nearest]
        close = d < radius
        if not np.any(close):
            return bg
        p = points[nearest[close]]
        direction = log_map(p, bg[close])
        norm = np.linalg.norm(direction, axis=1)
        fallback = norm < 1e-12
        direction[fallback] = np.cross(p[fallback], np.array([0.3, 0.5, 0.8]))
        direction /= np.linalg.norm(direction, axis=1)[:, None]
        bg[close] = np.cos(radius) * p + np.sin(radius) * direction
    dist = geodesic_distance(bg[:, None, :], points[None, :, :]).min(axis=1)
    return bg[dist >= 0.5 * radius]


def build_mesh(
    config: Configuration,
    params: Optional[MeshParams] = None,
    background: Optional[np.ndarray] = None,
    cache=None,
) -> SphericalMesh:
    """Graded spherical Delaunay mesh with the configuration points as vertices 0..2n-1.

    Args:
        config: configuration (may be empty for the untwisted control)
        params: background count, grading depth and grading radius
        background: explicit background points (overrides the Fibonacci set)
        cache: optional MeshCache consulted before building
    """
    params = params or MeshParams()
    if cache is not None:
        cached = cache.get(config, params, background)
        if cached is not None:
            return finalize_mesh(*cached)

    points = config.points
    bg = fibonacci_sphere(params.background_count) if background is None else np.asarray(background, float)
    h0 = np.sqrt(8.0 * np.pi / (np.sqrt(3.0) * len(bg)))
    bg = _clear_background(bg, points, 0.5 * h0)
    vertices = np.vstack([points, bg]) if points.size else bg

    for k in range(params.grade_depth):
        if points.size == 0:
            break
        tri = _hull_triangles(vertices)
        centroids = vertices[tri].mean(axis=1)
        centroids /= np.linalg.norm(centroids, axis=1)[:, None]
        dist = geodesic_distance(centroids[:, None, :], points[None, :, :]).min(axis=1)
        marked = tri[dist < params.grade_radius * 2.0**-k]
        if len(marked) == 0:
            break
        split = np.unique(np.sort(np.vstack([marked[:, [0, 1]], marked[:, [1, 2]], marked[:, [2, 0]]]), axis=1), axis=0)
        mid = vertices[split[:, 0]] + vertices[split[:, 1]]
        mid /= np.linalg.norm(mid, axis=1)[:, None]
        vertices = np.vstack([vertices, mid])
        logger.debug(f"Grading round {k}: split {len(split)} edges")

    tri = _hull_triangles(vertices)
    mesh = finalize_mesh(vertices, tri, config.n_points)
    logger.info(
        f"Built mesh: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles, "
        f"min angle {mesh.min_angle:.1f} deg"
    )
    if cache is not None:
        cache.put(config, params, background, mesh)
    return mesh


def morph_mesh(mesh: SphericalMesh, new_points: np.ndarray) -> SphericalMesh:
    """Same connectivity, configuration vertices moved to new_points.

    Vertices near a moved point follow a rotation whose angle fades out at
    0.3 times the distance to the nearest other configuration point.
    """
    new_points = np.asarray(new_points, dtype=float).reshape(-1, 3)
    old = mesh.vertices[: mesh.n_flagged]
    if new_points.shape != old.shape:
        raise ValueError("Morph target must have one point per flagged vertex")
    vertices = mesh.vertices.copy()
    if len(old) > 1:
        nn = pairwise_distances(old)
        np.fill_diagonal(nn, np.inf)
        nn = nn.min(axis=1)
    else:
        nn = np.full(len(old), np.pi)
    for k, (p, q) in enumerate(zip(old, new_points)):
        axis = np.cross(p, q)
        s = np.linalg.norm(axis)
        if s < 1e-15:
            continue
        axis /= s
        theta = float(geodesic_distance(p, q))
        rho = 0.3 * nn[k]
        d = geodesic_distance(mesh.vertices, p)
        near = np.flatnonzero(d < rho)
        angle = cutoff(d[near] / rho)[0] * theta
        v = mesh.vertices[near]
        cos, sin = np.cos(angle)[:, None], np.sin(angle)[:, None]
        rotated = v * cos + np.cross(axis, v) * sin + np.outer(v @ axis, axis) * (1.0 - cos)
        vertices[near] = rotated
        vertices[k] = q
    vertices /= np.linalg.norm(vertices, axis=1)[:, None]
    return finalize_mesh(vertices, mesh.triangles, mesh.n_flagged)


# Cut system


@dataclass(frozen=True)
class CutSystem:
    pairs: Tuple[Tuple[int, int], ...]
    paths: Tuple[np.ndarray, ...]
    curve_edges: Tuple[np.ndarray, ...]  # per path: (m, 2) [path vertex, fan neighbour] in curve order

    @property
    def branch_vertices(self) -> np.ndarray:
        ends = [v for pair in self.pairs for v in pair]
        return np.array(sorted(ends), dtype=int)

    def without(self, drop: Sequence[int]) -> "CutSystem":
        """Cut system with the paths ending at the given vertices removed."""
        drop = set(int(d) for d in drop)
        keep = []
        for k, (a, b) in enumerate(self.pairs):
            if (a in drop) != (b in drop):
                raise ValueError(f"Dropped points must form whole cut pairs; pair {(a, b)} is split")
            if a not in drop:
                keep.append(k)
        return CutSystem(
            pairs=tuple(self.pairs[k] for k in keep),
            paths=tuple(self.paths[k] for k in keep),
            curve_edges=tuple(self.curve_edges[k] for k in keep),
        )

    def crossing_edges(self, mesh: SphericalMesh) -> np.ndarray:
        if not self.curve_edges:
            return np.zeros(0, dtype=int)
        ce = np.vstack(self.curve_edges)
        return mesh.edge_index(ce[:, 0], ce[:, 1])

    def to_dict(self) -> Dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "paths": [p.tolist() for p in self.paths],
            "curve_edges": [c.tolist() for c in self.curve_edges],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "CutSystem":
        return cls(
            pairs=tuple(tuple(p) for p in data["pairs"]),
            paths=tuple(np.asarray(p, dtype=int) for p in data["paths"]),
            curve_edges=tuple(np.asarray(c, dtype=int).reshape(-1, 2) for c in data["curve_edges"]),
        )


EMPTY_CUT = CutSystem(pairs=(), paths=(), curve_edges=())


def _greedy_pairs(points: np.ndarray, attempt: int) -> List[Tuple[int, int]]:
    dist = pairwise_distances(points)
    np.fill_diagonal(dist, np.inf)
    unmatched = set(range(len(points)))
    pairs = []
    if attempt == 0:
        while unmatched:
            idx = sorted(unmatched)
            sub = dist[np.ix_(idx, idx)]
            i, j = np.unravel_index(np.argmin(sub), sub.shape)
            a, b = idx[i], idx[j]
            pairs.append((min(a, b), max(a, b)))
            unmatched -= {a, b}
        return pairs
    rng = np.random.default_rng(attempt)
    for a in rng.permutation(len(points)):
        if a not in unmatched:
            continue
        unmatched.discard(a)
        cand = sorted(unmatched)
        order = np.argsort(dist[a, cand])
        # from the third attempt on, sometimes take the second-nearest partner
        rank = 1 if attempt > 1 and len(order) > 1 and rng.random() < 0.5 else 0
        pick = cand[order[rank]]
        unmatched.discard(pick)
        pairs.append((min(a, pick), max(a, pick)))
    return pairs


def _fan(mesh: SphericalMesh, prev: int, v: int, nxt: int) -> np.ndarray:
    """Neighbours of v strictly left of the path prev -> v -> nxt, ordered from prev's side."""
    nbrs = mesh.neighbors(v)
    chart = stereo_chart(mesh.vertices[v])
    d = mesh.vertices[nbrs] - mesh.vertices[v]
    ang = np.arctan2(d @ chart.e2, d @ chart.e1)
    a_next = ang[nbrs == nxt][0]
    a_prev = ang[nbrs == prev][0]
    span = (a_prev - a_next) % (2.0 * np.pi)
    delta = (ang - a_next) % (2.0 * np.pi)
    sel = (delta > 0.0) & (delta < span)
    return nbrs[sel][np.argsort(-delta[sel])]


def _route_paths(mesh: SphericalMesh, pairs: List[Tuple[int, int]]) -> CutSystem:
    blocked = np.zeros(mesh.n_vertices, dtype=bool)
    blocked[: mesh.n_flagged] = True
    paths, curve_edges = [], []
    for a, b in pairs:
        allowed = ~blocked
        allowed[[a, b]] = True
        graph = mesh.edge_graph(allowed)
        dist, pred = dijkstra(graph, indices=a, return_predecessors=True)
        if not np.isfinite(dist[b]):
            raise MatchingFailed(f"No free edge path joins points {a} and {b}")
        path = [b]
        while path[-1] != a:
            path.append(int(pred[path[-1]]))
        path = np.array(path[::-1], dtype=int)
        if len(path) < 3:
            raise MatchingFailed(f"Points {a} and {b} are mesh neighbours; refine the mesh")
        edges = []
        for i in range(1, len(path) - 1):
            for nb in _fan(mesh, path[i - 1], path[i], path[i + 1]):
                edges.append((path[i], nb))
        blocked[path] = True
        paths.append(path)
        curve_edges.append(np.array(edges, dtype=int).reshape(-1, 2))
    return CutSystem(pairs=tuple(pairs), paths=tuple(paths), curve_edges=tuple(curve_edges))


def build_cut_system(
    config: Configuration, mesh: SphericalMesh, pairing: Optional[Sequence[Tuple[int, int]]] = None
) -> CutSystem:
    """Join the configuration points in pairs by disjoint shortest edge paths.

    Routing is retried with a reshuffled pairing before MatchingFailed surfaces.
    """
    if config.is_empty():
        return EMPTY_CUT
    attempts = {"n": 0}

    @retry(
        stop=stop_after_attempt(CUT_ATTEMPTS),
        retry=retry_if_exception_type(MatchingFailed),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    )
    def _route() -> CutSystem:
        attempt = attempts["n"]
        attempts["n"] += 1
        pairs = list(pairing) if pairing is not None else _greedy_pairs(config.points, attempt)
        return _route_paths(mesh, pairs)

    cut = _route()
    logger.info(f"Routed {len(cut.paths)} cut paths, {sum(len(c) for c in cut.curve_edges)} crossing edges")
    return cut


def cut_curves(cut: CutSystem, mesh: SphericalMesh) -> List[np.ndarray]:
    """Polylines of the shifted cut curves; each runs p -> crossing points -> q."""
    curves = []
    V = mesh.vertices
    for path, edges in zip(cut.paths, cut.curve_edges):
        pts = [V[path[0]]]
        if len(edges):
            x = V[edges[:, 0]] + CURVE_FRACTION * (V[edges[:, 1]] - V[edges[:, 0]])
            pts.extend(x / np.linalg.norm(x, axis=1)[:, None])
        pts.append(V[path[-1]])
        curves.append(np.array(pts))
    return curves


def reference_ray(cut: CutSystem, mesh: SphericalMesh, vertex: int) -> np.ndarray:
    """Unit tangent at a branch vertex pointing away from its cut path."""
    for path in cut.paths:
        if path[0] == vertex:
            nxt = path[1]
        elif path[-1] == vertex:
            nxt = path[-2]
        else:
            continue
        t = log_map(mesh.vertices[vertex], mesh.vertices[nxt])[0]
        return -t / np.linalg.norm(t)
    raise ValueError(f"Vertex {vertex} is not a cut endpoint")


# Signs and operators


@dataclass(frozen=True)
class SignCochain:
    sigma: np.ndarray
    cut: CutSystem

    @property
    def branch_vertices(self) -> np.ndarray:
        return self.cut.branch_vertices


def vertex_holonomy(mesh: SphericalMesh, sigma: np.ndarray) -> np.ndarray:
    neg = (sigma < 0).astype(int)
    count = np.zeros(mesh.n_vertices, dtype=int)
    for m in range(3):
        np.add.at(count, mesh.triangles[:, m], neg[mesh.triangle_edges[:, m]])
    return np.where(count % 2, -1, 1)


def edge_signs(cut: CutSystem, mesh: SphericalMesh) -> SignCochain:
    """sigma_e = -1 on edges crossing an odd number of shifted cut curves; holonomy validated."""
    sigma = np.ones(mesh.n_edges, dtype=np.int8)
    crossing = cut.crossing_edges(mesh)
    if np.any(crossing < 0):
        raise HolonomyViolation("Cut references vertex pairs that are not mesh edges")
    for e in crossing:
        sigma[e] = -sigma[e]

    hol = vertex_holonomy(mesh, sigma)
    branch = cut.branch_vertices
    expected = np.ones(mesh.n_vertices, dtype=int)
    expected[branch] = -1
    bad = np.flatnonzero(hol != expected)
    if bad.size:
        error_msg = f"Holonomy wrong at {bad.size} vertices (first {bad[:5].tolist()})"
        logger.error(error_msg)
        raise HolonomyViolation(error_msg)

    is_branch = np.zeros(mesh.n_vertices, dtype=bool)
    is_branch[branch] = True
    plain = ~is_branch[mesh.triangles].any(axis=1)
    tri_hol = np.prod(sigma[mesh.triangle_edges].astype(int), axis=1)
    if np.any(tri_hol[plain] != 1):
        raise HolonomyViolation(f"{int(np.sum(tri_hol[plain] != 1))} triangles carry holonomy -1")
    return SignCochain(sigma=sigma, cut=cut)


@dataclass(frozen=True)
class TwistedOperators:
    mesh: SphericalMesh
    signs: SignCochain
    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    free: np.ndarray
    pinned: np.ndarray

    @property
    def cut(self) -> CutSystem:
        return self.signs.cut

    @property
    def n_free(self) -> int:
        return int(self.free.size)

    @property
    def mass_diag(self) -> np.ndarray:
        return self.mass.diagonal()

    def expand(self, f: np.ndarray) -> np.ndarray:
        full = np.zeros(self.mesh.n_vertices)
        full[self.free] = f
        return full

    def restrict(self, f_full: np.ndarray) -> np.ndarray:
        return np.asarray(f_full)[self.free]


def twisted_stiffness(mesh: SphericalMesh, sigma: np.ndarray) -> sp.csr_matrix:
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    w = mesh.edge_weights
    off = -sigma.astype(float) * w
    diag = np.zeros(mesh.n_vertices)
    np.add.at(diag, i, w)
    np.add.at(diag, j, w)
    n = mesh.n_vertices
    rows = np.concatenate([i, j, np.arange(n)])
    cols = np.concatenate([j, i, np.arange(n)])
    vals = np.concatenate([off, off, diag])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def untwisted_stiffness(mesh: SphericalMesh) -> sp.csr_matrix:
    return twisted_stiffness(mesh, np.ones(mesh.n_edges, dtype=np.int8))


def assemble(mesh: SphericalMesh, signs: SignCochain, pinned: Optional[np.ndarray] = None) -> TwistedOperators:
    """Twisted stiffness and lumped mass on free vertices; branch vertices pinned to 0."""
    if pinned is None:
        pinned = np.zeros(mesh.n_vertices, dtype=bool)
        pinned[signs.branch_vertices] = True
    free = np.flatnonzero(~pinned)
    neg = mesh.negative_weight_fraction
    if neg > 0:
        logger.warning(f"{100 * neg:.2f}% of cotangent weights are negative (obtuse triangles)")
    full = twisted_stiffness(mesh, signs.sigma)
    stiffness = full[free][:, free].tocsr()
    mass = sp.diags(mesh.vertex_areas[free]).tocsr()
    return TwistedOperators(
        mesh=mesh, signs=signs, stiffness=stiffness, mass=mass, free=free, pinned=pinned
    )


def build_operators(
    config: Configuration,
    params: Optional[MeshParams] = None,
    pairing=None,
    cache=None,
    mesh: Optional[SphericalMesh] = None,
) -> TwistedOperators:
    """build_mesh, build_cut_system, edge_signs and assemble in one call."""
    stage = "mesh"
    try:
        if mesh is None:
            mesh = build_mesh(config, params, cache=cache)
        stage = "cut"
        cut = build_cut_system(config, mesh, pairing=pairing)
        stage = "signs"
        signs = edge_signs(cut, mesh)
        stage = "assemble"
        return assemble(mesh, signs)
    except RuntimeError as e:
        logger.error(f"Operator construction failed at stage '{stage}': {str(e)}")
        logger.debug(traceback.format_exc())
        raise


def reduced_operators(ops: TwistedOperators, drop: Sequence[int]) -> TwistedOperators:
    """Operators of the configuration without the dropped branch vertices, same mesh."""
    cut = ops.cut.without(drop)
    return assemble(ops.mesh, edge_signs(cut, ops.mesh))


def rebase_operators(ops: TwistedOperators, mesh: SphericalMesh) -> TwistedOperators:
    """Reassemble on a morphed mesh with the same connectivity and cut."""
    return assemble(mesh, SignCochain(sigma=ops.signs.sigma, cut=ops.cut), pinned=ops.pinned)


def pin_vertices(ops: TwistedOperators, extra: Sequence[int]) -> TwistedOperators:
    pinned = ops.pinned.copy()
    pinned[np.asarray(extra, dtype=int)] = True
    return assemble(ops.mesh, ops.signs, pinned=pinned)


def gauge_flip(ops: TwistedOperators, mask: np.ndarray) -> TwistedOperators:
    """Conjugate by the diagonal sign change d = -1 on masked vertices."""
    d = np.where(np.asarray(mask, dtype=bool), -1, 1)
    e = ops.mesh.edges
    sigma = (ops.signs.sigma * d[e[:, 0]] * d[e[:, 1]]).astype(np.int8)
    D = sp.diags(d[ops.free].astype(float))
    return replace(
        ops,
        signs=SignCochain(sigma=sigma, cut=ops.cut),
        stiffness=(D @ ops.stiffness @ D).tocsr(),
    )


def hilbert_norm(f: np.ndarray, ops: TwistedOperators) -> float:
    """Squared H-norm f'Sf + f'Mf."""
    f = np.asarray(f, dtype=float)
    return float(f @ (ops.stiffness @ f) + f @ (ops.mass @ f))


def rayleigh(f: np.ndarray, ops: TwistedOperators) -> float:
    f = np.asarray(f, dtype=float)
    den = float(f @ (ops.mass @ f))
    if not den > 1e-300:
        raise ZeroSection("Rayleigh quotient of a zero section")
    return float(f @ (ops.stiffness @ f)) / den


def hardy_ratio(ops: TwistedOperators, f: np.ndarray) -> float:
    """Sum M f^2 / dist^2 over sum of stiffness energy."""
    dist = ops.mesh.nearest_branch_distance(ops.signs.branch_vertices)[ops.free]
    energy = float(f @ (ops.stiffness @ f))
    if energy <= 0:
        raise ZeroSection("Hardy ratio needs a section with positive energy")
    return float(np.sum(ops.mass_diag * f * f / dist**2)) / energy


def triangle_gauge(ops: TwistedOperators) -> np.ndarray:
    """(F, 3) signs trivializing each triangle from its first unpinned vertex.

    Pinned vertices carry zero, so triangles touching a branch vertex are
    consistent even when their edge signs multiply to -1.
    """
    mesh = ops.mesh
    tri = mesh.triangles
    ref_slot = np.argmin(ops.pinned[tri], axis=1)
    rows = np.arange(mesh.n_triangles)
    ref_vertex = tri[rows, ref_slot]
    signs = np.ones((mesh.n_triangles, 3))
    for m in range(3):
        differs = np.flatnonzero(tri[:, m] != ref_vertex)
        e = mesh.edge_index(ref_vertex[differs], tri[differs, m])
        signs[differs, m] = ops.signs.sigma[e]
    return signs


def triangle_values(ops: TwistedOperators, f_full: np.ndarray, gauge: Optional[np.ndarray] = None) -> np.ndarray:
    gauge = triangle_gauge(ops) if gauge is None else gauge
    return gauge * np.asarray(f_full)[ops.mesh.triangles]


def triangle_gradients(ops: TwistedOperators, local: np.ndarray) -> np.ndarray:
    """Per-triangle gradient (F, 3) of the linear interpolant of local values."""
    return np.einsum("fm,fmj->fj", local, ops.mesh.element_gradients())


# Geometric crossing tests and gauge transport


def arcs_cross(p0, p1, q0, q1) -> np.ndarray:
    """Do the short great-circle arcs p0p1 and q0q1 cross? Row-wise."""
    n1 = np.cross(p0, p1)
    n2 = np.cross(q0, q1)
    s1 = np.einsum("ij,ij->i", n1, q0) * np.einsum("ij,ij->i", n1, q1)
    s2 = np.einsum("ij,ij->i", n2, p0) * np.einsum("ij,ij->i", n2, p1)
    same_side = np.einsum("ij,ij->i", p0 + p1, q0 + q1) > 0
    return (s1 < 0) & (s2 < 0) & same_side


def _segments(curves: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    starts = [c[:-1] for c in curves if len(c) > 1]
    ends = [c[1:] for c in curves if len(c) > 1]
    if not starts:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.vstack(starts), np.vstack(ends)


def crossing_parity(a: np.ndarray, b: np.ndarray, curves: Sequence[np.ndarray], chunk: int = 200000) -> np.ndarray:
    """Parity of crossings of each arc a[i]b[i] with all curve segments."""
    s0, s1 = _segments(curves)
    parity = np.zeros(len(a), dtype=bool)
    if len(s0) == 0 or len(a) == 0:
        return parity
    seg_mid = s0 + s1
    seg_mid /= np.linalg.norm(seg_mid, axis=1)[:, None]
    arc_mid = a + b
    arc_mid /= np.linalg.norm(arc_mid, axis=1)[:, None]
    radius = 0.6 * (np.linalg.norm(s1 - s0, axis=1).max() + np.linalg.norm(b - a, axis=1).max()) + 1e-9
    hits = cKDTree(seg_mid).query_ball_point(arc_mid, radius)
    counts = np.fromiter((len(h) for h in hits), dtype=int, count=len(hits))
    arc_idx = np.repeat(np.arange(len(a)), counts)
    if arc_idx.size == 0:
        return parity
    seg_idx = np.fromiter((s for h in hits for s in h), dtype=int, count=int(counts.sum()))
    crossings = np.zeros(len(a), dtype=int)
    for start in range(0, arc_idx.size, chunk):
        ai = arc_idx[start:start + chunk]
        si = seg_idx[start:start + chunk]
        hit = arcs_cross(a[ai], b[ai], s0[si], s1[si])
        np.add.at(crossings, ai[hit], 1)
    return crossings % 2 == 1


def gauge_ratio(
    mesh: SphericalMesh,
    toggle: np.ndarray,
    allowed: np.ndarray,
    root: int,
    edge_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """+-1 per vertex propagated breadth-first, flipping across toggled edges; 0 if unreachable."""
    graph = mesh.edge_graph(allowed, weighted=False, edge_mask=edge_mask)
    order, pred = breadth_first_order(graph, root, directed=False, return_predecessors=True)
    ratio = np.zeros(mesh.n_vertices)
    ratio[root] = 1.0
    children = order[1:]
    eids = mesh.edge_index(pred[children], children)
    flips = np.where(toggle[eids], -1.0, 1.0)
    for v, p, s in zip(children, pred[children], flips):
        ratio[v] = ratio[p] * s
    return ratio


def locate_points(mesh: SphericalMesh, x: np.ndarray, candidates: int = 12) -> Tuple[np.ndarray, np.ndarray]:
    """Containing triangle and barycentric coordinates of sphere points."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x = x / np.linalg.norm(x, axis=1)[:, None]
    tri = mesh.triangles
    centroids = mesh.vertices[tri].mean(axis=1)
    k = min(candidates, mesh.n_triangles)
    _, cand = cKDTree(centroids).query(x, k=k)
    cand = np.atleast_2d(cand).reshape(len(x), k)

    def _bary(ti, pts):
        a, b, c = (mesh.vertices[tri[ti, m]] for m in range(3))
        n = np.cross(b - a, c - a)
        t = np.einsum("...j,...j->...", n, a) / np.einsum("...j,...j->...", n, pts)
        y = t[..., None] * pts
        area = np.einsum("...j,...j->...", n, n)
        l0 = np.einsum("...j,...j->...", np.cross(b - y, c - y), n) / area
        l1 = np.einsum("...j,...j->...", np.cross(c - y, a - y), n) / area
        return np.stack([l0, l1, 1.0 - l0 - l1], axis=-1), t

    bary, t = _bary(cand, np.broadcast_to(x[:, None, :], cand.shape + (3,)))
    inside = (bary.min(axis=-1) >= -1e-10) & (t > 0)
    found = inside.any(axis=1)
    first = np.argmax(inside, axis=1)
    rows = np.arange(len(x))
    tri_idx = cand[rows, first]
    out = bary[rows, first]
    for i in np.flatnonzero(~found):
        b_all, t_all = _bary(np.arange(mesh.n_triangles), np.broadcast_to(x[i], (mesh.n_triangles, 3)))
        ok = np.flatnonzero((b_all.min(axis=1) >= -1e-9) & (t_all > 0))
        if ok.size == 0:
            raise MeshDegenerate(f"Point {x[i].tolist()} is not covered by any triangle")
        tri_idx[i] = ok[0]
        out[i] = b_all[ok[0]]
    return tri_idx, out


def interpolate_section(
    ops: TwistedOperators, f_full: np.ndarray, x: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Values and tangential gradients of the linear interpolant at sphere points.

    The result is expressed in the cut gauge of the side of the shifted cut
    curve on which each point lies.
    """
    mesh = ops.mesh
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x = x / np.linalg.norm(x, axis=1)[:, None]
    tri_idx, bary = locate_points(mesh, x)
    tri = mesh.triangles[tri_idx]
    sigma = ops.signs.sigma

    # reference slot per point: the vertex on the same side of the curve as x
    ref = np.zeros(len(x), dtype=int)
    straddle = np.any(sigma[mesh.triangle_edges[tri_idx]] < 0, axis=1)
    if np.any(straddle):
        curves = cut_curves(ops.cut, mesh)
        idx = np.flatnonzero(straddle)
        # try non-zero vertices first; a branch vertex touches the curve
        slot_order = np.argsort(-np.abs(f_full[tri[idx]]), axis=1, kind="stable")
        chosen = np.full(idx.size, -1)
        for rank in range(3):
            todo = np.flatnonzero(chosen < 0)
            if todo.size == 0:
                break
            slots = slot_order[todo, rank]
            crosses = crossing_parity(x[idx[todo]], mesh.vertices[tri[idx[todo], slots]], curves)
            chosen[todo[~crosses]] = slots[~crosses]
        ref[idx] = np.where(chosen < 0, slot_order[:, 0], chosen)

    rows = np.arange(len(x))
    ref_vertex = tri[rows, ref]
    signs = np.ones((len(x), 3))
    for m in range(3):
        other = tri[:, m]
        differs = other != ref_vertex
        e = mesh.edge_index(ref_vertex[differs], other[differs])
        signs[np.flatnonzero(differs), m] = sigma[e]
    local = signs * f_full[tri]
    values = np.sum(bary * local, axis=1)
    grads = np.einsum("nm,nmj->nj", local, mesh.element_gradients()[tri_idx])
    grads -= np.sum(grads * x, axis=1)[:, None] * x
    return values, grads


def section_from_function(
    ops: TwistedOperators, values: np.ndarray, curves: Sequence[np.ndarray], root: Optional[int] = None
) -> np.ndarray:
    """Convert vertex values given in a gauge cut along curves into the mesh cut gauge."""
    mesh = ops.mesh
    e = mesh.edges
    crosses = crossing_parity(mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]], curves)
    toggle = (ops.signs.sigma < 0) ^ crosses
    allowed = ~ops.pinned
    if root is None:
        root = int(ops.free[np.argmax(np.abs(values[ops.free]))])
    ratio = gauge_ratio(mesh, toggle, allowed, root)
    return (ratio * values)[ops.free]


def mover_arcs(src: np.ndarray, dst: np.ndarray, step: float = 0.05) -> List[np.ndarray]:
    arcs = []
    for p, q in zip(src, dst):
        theta = float(geodesic_distance(p, q))
        if theta < 1e-14:
            continue
        count = max(2, int(np.ceil(theta / step)) + 1)
        t = np.linspace(0.0, 1.0, count)
        pts = (np.sin((1 - t) * theta)[:, None] * p + np.sin(t * theta)[:, None] * q) / np.sin(theta)
        arcs.append(pts / np.linalg.norm(pts, axis=1)[:, None])
    return arcs


def transfer_section(src_ops: TwistedOperators, f_src: np.ndarray, dst_ops: TwistedOperators) -> np.ndarray:
    """Re-express a section on another mesh and cut system for the moved configuration.

    Branch vertex k of the source is assumed to move to branch vertex k of the
    destination along a short great-circle arc.
    """
    values, _ = interpolate_section(src_ops, src_ops.expand(f_src), dst_ops.mesh.vertices)
    n = src_ops.mesh.n_flagged
    curves = cut_curves(src_ops.cut, src_ops.mesh)
    curves += mover_arcs(src_ops.mesh.vertices[:n], dst_ops.mesh.vertices[:n])
    return section_from_function(dst_ops, values, curves)


# Export


def export_mesh(ops: TwistedOperators, path: str) -> str:
    """Write an OFF file plus a sidecar JSON with flagged vertices, cut and edge signs."""
    mesh = ops.mesh
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_triangles} {mesh.n_edges}"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    sidecar = {
        "n_flagged": mesh.n_flagged,
        "flagged": np.flatnonzero(ops.pinned).tolist(),
        "cut": ops.cut.to_dict(),
        "cut_curves": [c.tolist() for c in cut_curves(ops.cut, mesh)],
        "edges": mesh.edges.tolist(),
        "edge_signs": ops.signs.sigma.astype(int).tolist(),
    }
    sidecar_path = path + ".json"
    with open(sidecar_path, "wb") as f:
        f.write(orjson.dumps(sidecar, option=orjson.OPT_SERIALIZE_NUMPY))
    return sidecar_path


def import_mesh(path: str) -> TwistedOperators:
    with open(path) as f:
        tokens = f.read().split()
    if tokens[0] != "OFF":
        raise ValueError(f"{path}: not an OFF file")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    vertices = np.array(tokens[pos:pos + 3 * nv], dtype=float).reshape(nv, 3)
    pos += 3 * nv
    faces = np.array(tokens[pos:pos + 4 * nf], dtype=int).reshape(nf, 4)[:, 1:]
    with open(path + ".json", "rb") as f:
        sidecar = orjson.loads(f.read())
    mesh = finalize_mesh(vertices, faces, sidecar["n_flagged"])
    if not np.array_equal(mesh.edges, np.asarray(sidecar["edges"])):
        raise ValueError(f"{path}: edge list does not match the sidecar")
    signs = edge_signs(CutSystem.from_dict(sidecar["cut"]), mesh)
    pinned = np.zeros(mesh.n_vertices, dtype=bool)
    pinned[sidecar["flagged"]] = True
    return assemble(mesh, signs, pinned=pinned)
