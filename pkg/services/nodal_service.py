import os
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from services.mesh_service import TwistedOperators, ZeroSection, triangle_values
from services.geometry_service import geodesic_distance

logger = logging.getLogger(__name__)

ZERO_EPS = float(os.getenv("Z2EIG_ZERO_EPS", "1e-6"))
CLUSTER_FACTOR = float(os.getenv("Z2EIG_CLUSTER_FACTOR", "3.0"))


class UnresolvedNode(RuntimeError):
    def __init__(self, message: str, readings: Optional[List[Dict]] = None):
        super().__init__(message)
        self.readings = readings or []


class NoConnectingArc(RuntimeError):
    pass


@dataclass(frozen=True)
class GraphNode:
    label: int
    position: np.ndarray
    kind: str  # branch, critical, joint or unresolved
    degree: int
    vertex: int = -1

    @property
    def order(self) -> Optional[int]:
        """n_p for branch nodes, m_p for critical nodes."""
        if self.kind == "branch":
            return (self.degree - 1) // 2
        if self.kind == "critical":
            return self.degree // 2
        return None

    def to_dict(self) -> Dict:
        return {
            "position": self.position.tolist(),
            "kind": self.kind,
            "degree": self.degree,
            "vertex": self.vertex,
            "order": self.order,
        }


@dataclass(frozen=True)
class Arc:
    start: int  # node label, -1 for a closed loop
    end: int
    polyline: np.ndarray


@dataclass
class ZeroGraph:
    nodes: List[GraphNode]
    arcs: List[Arc]
    n_vertices: int
    n_edges: int
    components: int
    cycles: int
    n_pairs: int
    eps_z: float
    radius_factor: float
    unresolved: List[int] = field(default_factory=list)
    alternate: Optional[Dict] = None

    def node(self, label: int) -> GraphNode:
        for n in self.nodes:
            if n.label == label:
                return n
        raise KeyError(label)

    def branch_nodes(self) -> List[GraphNode]:
        return [n for n in self.nodes if n.vertex >= 0]

    def critical_nodes(self) -> List[GraphNode]:
        return [n for n in self.nodes if n.kind == "critical"]

    def summary(self) -> Dict:
        chi = euler_characteristic(self)
        return {
            "components": self.components,
            "cycles": self.cycles,
            "chi": chi["combinatorial"],
            "chi_closed_form": chi["closed_form"],
            "unresolved": len(self.unresolved),
        }

    def to_dict(self) -> Dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [{"start": a.start, "end": a.end, "polyline": a.polyline.tolist()} for a in self.arcs],
            "summary": self.summary(),
            "alternate": self.alternate,
        }


# Extraction


def _segments(ops: TwistedOperators, f_full: np.ndarray, zero: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-set segments of the per-triangle linear interpolant.

    Fine point ids: vertex v is v, the crossing on edge e is n_vertices + e.
    Returns (segments (S, 2), crossing edge ids).
    """
    mesh = ops.mesh
    nv = mesh.n_vertices
    tri = mesh.triangles
    local = triangle_values(ops, f_full)
    zt = zero[tri]
    crossing = np.zeros(zt.shape, dtype=bool)
    for m in range(3):
        a, b = (m + 1) % 3, (m + 2) % 3
        crossing[:, m] = ~zt[:, a] & ~zt[:, b] & (local[:, a] * local[:, b] < 0)

    segments = set()
    for t in np.flatnonzero(zt.any(axis=1) | crossing.any(axis=1)):
        zs = np.flatnonzero(zt[t])
        cs = [nv + int(mesh.triangle_edges[t, m]) for m in np.flatnonzero(crossing[t])]
        if zs.size == 0:
            if len(cs) == 2:
                segments.add(tuple(sorted(cs)))
        elif zs.size == 1:
            if cs:
                segments.add(tuple(sorted((int(tri[t, zs[0]]), cs[0]))))
        else:
            ids = [int(tri[t, m]) for m in zs]
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    segments.add(tuple(sorted((ids[i], ids[j]))))
    seg = np.array(sorted(segments), dtype=int).reshape(-1, 2)
    edge_ids = np.unique(seg[seg >= nv] - nv) if seg.size else np.zeros(0, dtype=int)
    return seg, edge_ids


def _positions(ops: TwistedOperators, f_full: np.ndarray, edge_ids: np.ndarray) -> Dict[int, np.ndarray]:
    mesh = ops.mesh
    nv = mesh.n_vertices
    e = mesh.edges[edge_ids]
    fi, fj = np.abs(f_full[e[:, 0]]), np.abs(f_full[e[:, 1]])
    t = fi / (fi + fj)
    x = mesh.vertices[e[:, 0]] + t[:, None] * (mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]])
    x /= np.linalg.norm(x, axis=1)[:, None]
    return {nv + int(k): p for k, p in zip(edge_ids, x)}


def _extract(f: np.ndarray, ops: TwistedOperators, eps_z: float, radius_factor: float) -> ZeroGraph:
    mesh = ops.mesh
    nv = mesh.n_vertices
    f_full = ops.expand(f)
    fmax = float(np.max(np.abs(f_full)))
    if fmax == 0.0:
        raise ZeroSection("Cannot extract the zero set of a zero section")
    zero = ops.pinned | (np.abs(f_full) < eps_z * fmax)
    seg, edge_ids = _segments(ops, f_full, zero)
    branch = ops.signs.branch_vertices

    points = np.unique(np.concatenate([seg.ravel(), branch])).astype(int)
    if points.size == 0:
        return ZeroGraph(
            nodes=[], arcs=[], n_vertices=0, n_edges=0, components=0, cycles=0,
            n_pairs=0, eps_z=eps_z, radius_factor=radius_factor,
        )
    pos = _positions(ops, f_full, edge_ids)
    for v in points[points < nv]:
        pos[int(v)] = mesh.vertices[v]
    index = {int(p): i for i, p in enumerate(points)}
    coords = np.array([pos[int(p)] for p in points])

    # merge links: points near a branch vertex, and chains of zero vertices
    rows, cols = [], []
    for p in branch:
        radius = radius_factor * mesh.spacing[p]
        near = np.flatnonzero(geodesic_distance(coords, mesh.vertices[p]) < radius)
        rows += [index[int(p)]] * near.size
        cols += near.tolist()
    for u, v in seg:
        if u < nv and v < nv:
            rows.append(index[int(u)])
            cols.append(index[int(v)])
    n = len(points)
    links = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, label = connected_components(links, directed=False)

    edges = np.array([(label[index[int(u)]], label[index[int(v)]]) for u, v in seg], dtype=int).reshape(-1, 2)
    edges = edges[edges[:, 0] != edges[:, 1]]
    used = np.unique(np.concatenate([edges.ravel(), label[[index[int(p)] for p in branch]]])).astype(int)
    degree = np.bincount(edges.ravel(), minlength=label.max() + 1) if edges.size else np.zeros(label.max() + 1, int)

    branch_of = {int(label[index[int(p)]]): int(p) for p in branch}
    has_zero_vertex = set(int(label[i]) for i, p in enumerate(points) if p < nv)
    nodes: List[GraphNode] = []
    unresolved: List[int] = []
    for lab in used:
        lab = int(lab)
        members = np.flatnonzero(label == lab)
        deg = int(degree[lab])
        if lab in branch_of:
            vertex = branch_of[lab]
            position = mesh.vertices[vertex]
            kind = "branch" if deg % 2 == 1 else "unresolved"
        else:
            vertex = -1
            centre = coords[members].mean(axis=0)
            position = centre / np.linalg.norm(centre)
            if deg % 2 == 1:
                kind = "unresolved"
            elif deg >= 4:
                kind = "critical"
            else:
                kind = "joint"
        if kind == "unresolved":
            unresolved.append(lab)
        if kind != "joint" or lab in has_zero_vertex:
            nodes.append(GraphNode(label=lab, position=position, kind=kind, degree=deg, vertex=vertex))

    n_used = int(used.size)
    compact = {int(lab): i for i, lab in enumerate(used)}
    if edges.size:
        g = sp.coo_matrix(
            (np.ones(len(edges)), ([compact[int(a)] for a in edges[:, 0]], [compact[int(b)] for b in edges[:, 1]])),
            shape=(n_used, n_used),
        )
    else:
        g = sp.coo_matrix((n_used, n_used))
    components, _ = connected_components(g, directed=False)
    cycles = int(len(edges) - n_used + components)

    label_pos = {int(lab): coords[np.flatnonzero(label == lab)].mean(axis=0) for lab in used}
    for node in nodes:
        label_pos[node.label] = node.position
    stops = set(n.label for n in nodes if n.kind != "joint") | set(int(lab) for lab in used if degree[lab] != 2)
    arcs = _trace_arcs(edges, stops, label_pos)

    return ZeroGraph(
        nodes=nodes,
        arcs=arcs,
        n_vertices=n_used,
        n_edges=int(len(edges)),
        components=int(components),
        cycles=cycles,
        n_pairs=int(branch.size // 2),
        eps_z=eps_z,
        radius_factor=radius_factor,
        unresolved=unresolved,
    )


def _trace_arcs(edges: np.ndarray, stops: set, label_pos: Dict[int, np.ndarray]) -> List[Arc]:
    adj = defaultdict(list)
    for k, (u, v) in enumerate(edges):
        adj[int(u)].append((k, int(v)))
        adj[int(v)].append((k, int(u)))
    used = np.zeros(len(edges), dtype=bool)

    def _walk(start: int, k: int, nxt: int) -> List[int]:
        path = [start]
        used[k] = True
        cur = nxt
        while cur not in stops and cur != start:
            path.append(cur)
            step = next(((k2, w) for k2, w in adj[cur] if not used[k2]), None)
            if step is None:
                break
            used[step[0]] = True
            cur = step[1]
        path.append(cur)
        return path

    def _polyline(path: List[int]) -> np.ndarray:
        pts = np.array([label_pos[p] for p in path])
        return pts / np.linalg.norm(pts, axis=1)[:, None]

    arcs = []
    for s in sorted(stops):
        for k, w in adj[s]:
            if not used[k]:
                path = _walk(s, k, w)
                arcs.append(Arc(start=s, end=path[-1], polyline=_polyline(path)))
    for k in range(len(edges)):
        if not used[k]:
            u, v = int(edges[k, 0]), int(edges[k, 1])
            path = _walk(u, k, v)
            arcs.append(Arc(start=-1, end=-1, polyline=_polyline(path)))
    return arcs


def _reading(graph: ZeroGraph) -> Dict:
    return {
        "eps_z": graph.eps_z,
        "radius_factor": graph.radius_factor,
        "degrees": {(str(n.vertex) if n.vertex >= 0 else f"c{n.label}"): n.degree for n in graph.nodes if n.kind != "joint"},
    }


def extract_zero_graph(
    f: np.ndarray,
    ops: TwistedOperators,
    eps_z: float = ZERO_EPS,
    radius_factor: float = CLUSTER_FACTOR,
    strict: bool = False,
) -> ZeroGraph:
    """Zero locus of a section as an embedded graph.

    Nodes are the branch points plus clusters of near-zero vertices; plain
    crossings are degree-2 joints. A graph with odd-degree interior nodes or
    even-degree branch nodes is re-read with a 10x threshold and 1.5x cluster
    radius before it is declared unresolved.
    """
    graph = _extract(f, ops, eps_z, radius_factor)
    if not graph.unresolved:
        return graph
    alt = _extract(f, ops, 10.0 * eps_z, 1.5 * radius_factor)
    if not alt.unresolved:
        alt.alternate = _reading(graph)
        logger.info(f"Zero graph resolved on re-read ({len(graph.unresolved)} ambiguous nodes at eps {eps_z})")
        return alt
    readings = [_reading(graph), _reading(alt)]
    msg = f"{len(graph.unresolved)} zero-graph nodes remain ambiguous: {readings}"
    if strict:
        logger.error(msg)
        raise UnresolvedNode(msg, readings)
    logger.warning(msg)
    graph.alternate = readings[1]
    return graph


# Combinatorics


def euler_characteristic(graph: ZeroGraph) -> Dict:
    """V - E of the zero graph and the closed form 2n + |c| - 1/2 sum deg_p - 1/2 sum deg_c."""
    branch = graph.branch_nodes()
    critical = graph.critical_nodes()
    closed = (
        2 * graph.n_pairs
        + len(critical)
        - 0.5 * sum(n.degree for n in branch)
        - 0.5 * sum(n.degree for n in critical)
    )
    combinatorial = graph.n_vertices - graph.n_edges
    return {
        "combinatorial": int(combinatorial),
        "closed_form": float(closed),
        "agree": (not graph.unresolved) and abs(closed - combinatorial) < 1e-9,
    }


def branch_degrees(graph: ZeroGraph) -> List[Dict]:
    out = []
    for n in sorted(graph.branch_nodes(), key=lambda n: n.vertex):
        out.append({"vertex": n.vertex, "degree": n.degree, "n_p": n.order if n.kind == "branch" else None})
    return out


def vanishing_census(graph: ZeroGraph, k: int = 1) -> Dict:
    """Count of branch points with n_p = 0 against the bound for the k-th eigensection.

    k = 1 needs at least n+1 and an acyclic graph; k >= 2 needs n+1-k.
    """
    count = sum(1 for n in graph.branch_nodes() if n.kind == "branch" and n.degree == 1)
    n = graph.n_pairs
    bound = n + 1 if k == 1 else n + 1 - k
    passed = count >= bound and (k != 1 or graph.cycles == 0)
    return {"k": k, "count": count, "bound": bound, "cycles": graph.cycles, "passed": bool(passed)}


def order_mismatches(graph: ZeroGraph, branch_data: Sequence) -> List[Dict]:
    """Branch points where (degree - 1)/2 differs from the fitted n_p."""
    fitted = {b.vertex: b.n for b in branch_data}
    out = []
    for d in branch_degrees(graph):
        if d["vertex"] in fitted and d["n_p"] != fitted[d["vertex"]]:
            out.append({**d, "fitted": fitted[d["vertex"]]})
    return out


def connecting_arc(graph: ZeroGraph, a: int, b: int) -> np.ndarray:
    """Polyline of zero-graph arcs joining branch vertices a and b (fewest arcs)."""
    by_vertex = {n.vertex: n.label for n in graph.branch_nodes()}
    if a not in by_vertex or b not in by_vertex:
        raise NoConnectingArc(f"Vertices {a} and {b} are not both branch nodes")
    src, dst = by_vertex[a], by_vertex[b]
    adj = defaultdict(list)
    for i, arc in enumerate(graph.arcs):
        if arc.start >= 0:
            adj[arc.start].append((i, arc.end))
            adj[arc.end].append((i, arc.start))
    prev = {src: None}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if u == dst:
            break
        for i, w in adj[u]:
            if w not in prev:
                prev[w] = (u, i)
                queue.append(w)
    if dst not in prev:
        raise NoConnectingArc(f"No zero-graph path joins branch vertices {a} and {b}")
    pieces = []
    cur = dst
    while prev[cur] is not None:
        u, i = prev[cur]
        line = graph.arcs[i].polyline
        pieces.append(line if graph.arcs[i].start == u and graph.arcs[i].end == cur else line[::-1])
        cur = u
    pieces = pieces[::-1]
    return np.vstack([pieces[0]] + [p[1:] for p in pieces[1:]])
