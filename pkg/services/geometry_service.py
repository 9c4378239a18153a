import os
import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import orjson

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = float(os.getenv("Z2EIG_UNIT_TOLERANCE", "1e-9"))
DUPLICATE_TOLERANCE = float(os.getenv("Z2EIG_DUPLICATE_TOLERANCE", "1e-6"))
TANGENT_TOLERANCE = 1e-12

GOLDEN_INCREMENT = np.pi * (3.0 - np.sqrt(5.0))


class OddCount(ValueError):
    pass


class DuplicatePoint(ValueError):
    pass


class NotUnit(ValueError):
    pass


class SupportCollision(ValueError):
    pass


# Points and distances


def as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return np.zeros((0, 3))
    return arr.reshape(-1, 3)


def normalize_points(points, tolerance: float = UNIT_TOLERANCE) -> np.ndarray:
    """Check unit norm within tolerance and renormalize."""
    arr = as_points(points)
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tolerance)
    if bad.size:
        raise NotUnit(
            f"Point {int(bad[0])} has norm {norms[bad[0]]:.12g}, expected 1 within {tolerance}"
        )
    return arr / norms[:, None]


def geodesic_distance(a, b) -> np.ndarray:
    """Arc length between unit vectors, atan2 form (stable near 0 and pi).

    Broadcasts over leading axes, so it accepts single points or arrays.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(cross, dot)


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    return geodesic_distance(points[:, None, :], points[None, :, :])


def exp_map(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exponential map of the round sphere, row-wise."""
    p = np.atleast_2d(p)
    v = np.atleast_2d(v)
    length = np.linalg.norm(v, axis=1)
    safe = np.where(length > 0, length, 1.0)
    out = np.cos(length)[:, None] * p + (np.sin(length) / safe)[:, None] * v
    return out / np.linalg.norm(out, axis=1)[:, None]


def log_map(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Tangent vector at p pointing to q with length dist(p, q)."""
    p = np.atleast_2d(p)
    q = np.atleast_2d(q)
    tangent = q - np.sum(q * p, axis=1)[:, None] * p
    norm = np.linalg.norm(tangent, axis=1)
    dist = geodesic_distance(p, q)
    safe = np.where(norm > 0, norm, 1.0)
    return tangent * (dist / safe)[:, None]


# Configurations


@dataclass(frozen=True)
class Configuration:
    points: np.ndarray
    min_separation: float

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])

    @property
    def n_pairs(self) -> int:
        return self.n_points // 2

    def is_empty(self) -> bool:
        return self.n_points == 0

    def to_dict(self) -> Dict:
        return {"points": self.points.tolist()}

    def union(self, other: "Configuration") -> "Configuration":
        return make_configuration(np.vstack([self.points, other.points]))


def make_configuration(points, allow_empty: bool = False) -> Configuration:
    """Validate points and build a Configuration.

    Args:
        points: sequence of 3-vectors, unit norm within UNIT_TOLERANCE
        allow_empty: accept the 0-point configuration (untwisted control)
    """
    arr = as_points(points)
    if arr.shape[0] == 0:
        if allow_empty:
            return Configuration(points=np.zeros((0, 3)), min_separation=np.pi)
        raise OddCount("A configuration needs at least two points")
    if arr.shape[0] % 2:
        raise OddCount(f"Configuration has {arr.shape[0]} points; an even count is required")

    arr = normalize_points(arr)
    dist = pairwise_distances(arr)
    np.fill_diagonal(dist, np.inf)
    i, j = np.unravel_index(np.argmin(dist), dist.shape)
    if dist[i, j] < DUPLICATE_TOLERANCE:
        raise DuplicatePoint(
            f"Points {min(i, j)} and {max(i, j)} are {dist[i, j]:.3g} rad apart"
        )
    arr.setflags(write=False)
    return Configuration(points=arr, min_separation=float(dist[i, j]))


def empty_configuration() -> Configuration:
    return make_configuration([], allow_empty=True)


def load_configuration(path: str) -> Configuration:
    with open(path, "rb") as f:
        data = orjson.loads(f.read())
    if not isinstance(data, dict) or "points" not in data:
        raise ValueError(f"{path}: expected an object with a 'points' list")
    return make_configuration(data["points"], allow_empty=True)


def save_configuration(config: Configuration, path: str) -> None:
    with open(path, "wb") as f:
        f.write(orjson.dumps(config.to_dict(), option=orjson.OPT_INDENT_2))


def fibonacci_sphere(count: int) -> np.ndarray:
    """Golden-angle spiral of count nearly uniform unit points."""
    i = np.arange(count, dtype=float)
    y = 1.0 - 2.0 * (i + 0.5) / count
    radius = np.sqrt(np.clip(1.0 - y * y, 0.0, None))
    theta = GOLDEN_INCREMENT * i
    return np.column_stack([np.cos(theta) * radius, y, np.sin(theta) * radius])


def random_configuration(
    n_points: int, seed: int, min_separation: float = 0.5, max_tries: int = 20000
) -> Configuration:
    """Uniform random configuration with a separation floor (rejection sampling)."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        pts = rng.normal(size=(n_points, 3))
        pts /= np.linalg.norm(pts, axis=1)[:, None]
        dist = pairwise_distances(pts)
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= min_separation:
            return make_configuration(pts)
    raise ValueError(
        f"No {n_points}-point configuration with separation {min_separation} after {max_tries} draws"
    )


def platonic_configuration(kind: str) -> Configuration:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    if kind == "tetrahedron":
        pts = [(1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)]
    elif kind == "octahedron":
        pts = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    elif kind == "cube":
        pts = [(x, y, z) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]
    elif kind == "icosahedron":
        pts = []
        for a in (-1, 1):
            for b in (-phi, phi):
                pts += [(0, a, b), (a, b, 0), (b, 0, a)]
    else:
        raise ValueError(f"Unknown solid: {kind}")
    arr = np.asarray(pts, dtype=float)
    return make_configuration(arr / np.linalg.norm(arr, axis=1)[:, None])


def antipodal_configuration(axis=(0.0, 0.0, 1.0)) -> Configuration:
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    return make_configuration([a, -a])


def pair_configuration(separation: float) -> Configuration:
    """Two points symmetric about the north pole in the xz-plane."""
    h = 0.5 * separation
    return make_configuration([(np.sin(h), 0.0, np.cos(h)), (-np.sin(h), 0.0, np.cos(h))])


# Charts


@dataclass(frozen=True)
class StereoChart:
    base: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    def to_complex(self, x) -> np.ndarray:
        """z = 2(u + iv)/(1 + w) in the frame (e1, e2, base)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = x @ self.e1
        v = x @ self.e2
        w = x @ self.base
        with np.errstate(divide="ignore", invalid="ignore"):
            return 2.0 * (u + 1j * v) / (1.0 + w)

    __call__ = to_complex

    def inverse(self, z) -> np.ndarray:
        zeta = 0.5 * np.atleast_1d(np.asarray(z, dtype=complex))
        d = 1.0 + np.abs(zeta) ** 2
        c0 = 2.0 * zeta.real / d
        c1 = 2.0 * zeta.imag / d
        c2 = (1.0 - np.abs(zeta) ** 2) / d
        return np.outer(c0, self.e1) + np.outer(c1, self.e2) + np.outer(c2, self.base)

    def rotated(self, beta: float) -> "StereoChart":
        """Frame rotated by -beta, so coordinates transform as z -> e^{i beta} z."""
        c, s = np.cos(beta), np.sin(beta)
        e1 = c * self.e1 - s * self.e2
        e2 = s * self.e1 + c * self.e2
        return StereoChart(base=self.base, e1=e1, e2=e2)

    def tangent_to_complex(self, v) -> np.ndarray:
        v = np.atleast_2d(np.asarray(v, dtype=float))
        return v @ self.e1 + 1j * (v @ self.e2)

    def complex_to_tangent(self, w) -> np.ndarray:
        w = np.atleast_1d(np.asarray(w, dtype=complex))
        return np.outer(w.real, self.e1) + np.outer(w.imag, self.e2)

    def frame(self) -> Dict[str, List[float]]:
        return {"e1": self.e1.tolist(), "e2": self.e2.tolist(), "base": self.base.tolist()}


def stereo_chart(p) -> StereoChart:
    """Stereographic chart at p with z(p) = 0 and |dz| = 1 at p.

    The first frame vector is Gram-Schmidt of the global axis along which p has
    the smallest absolute component.
    """
    p = np.asarray(p, dtype=float).reshape(3)
    p = p / np.linalg.norm(p)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(p)))] = 1.0
    e1 = axis - (axis @ p) * p
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(p, e1)
    return StereoChart(base=p, e1=e1, e2=e2)


# Tangent data


@dataclass(frozen=True)
class ConfigTangent:
    vectors: np.ndarray

    def norm(self) -> float:
        return float(np.linalg.norm(self.vectors))

    def scaled(self, t: float) -> "ConfigTangent":
        return ConfigTangent(vectors=t * self.vectors)

    def is_zero(self) -> bool:
        return not np.any(self.vectors)


def make_config_tangent(config: Configuration, vectors, project: bool = False) -> ConfigTangent:
    v = np.asarray(vectors, dtype=float).reshape(config.n_points, 3)
    dots = np.sum(v * config.points, axis=1)
    if project:
        v = v - dots[:, None] * config.points
    else:
        scale = np.maximum(1.0, np.linalg.norm(v, axis=1))
        if np.any(np.abs(dots) > TANGENT_TOLERANCE * scale):
            raise ValueError("Tangent vectors must be orthogonal to their base points")
    return ConfigTangent(vectors=v)


def zero_tangent(config: Configuration) -> ConfigTangent:
    return ConfigTangent(vectors=np.zeros((config.n_points, 3)))


def merge_direction(config: Configuration, i: int = 0, j: int = 1) -> ConfigTangent:
    """Unit tangents moving points i and j toward each other."""
    v = np.zeros((config.n_points, 3))
    pi, pj = config.points[i], config.points[j]
    if geodesic_distance(pi, pj) > np.pi - 1e-9:
        # antipodal: every great circle joins them; both move along e1 of p_i's chart
        e1 = stereo_chart(pi).e1
        e1 = e1 - (e1 @ pj) * pj
        v[i] = v[j] = e1 / np.linalg.norm(e1)
        return ConfigTangent(vectors=v)
    for a, b, k in ((pi, pj, i), (pj, pi, j)):
        t = log_map(a, b)[0]
        v[k] = t / np.linalg.norm(t)
    return ConfigTangent(vectors=v)


def random_tangent(config: Configuration, rng: np.random.Generator) -> ConfigTangent:
    v = rng.normal(size=(config.n_points, 3))
    v -= np.sum(v * config.points, axis=1)[:, None] * config.points
    v /= np.linalg.norm(v)
    return ConfigTangent(vectors=v)


def displace_configuration(config: Configuration, nu: ConfigTangent, t: float) -> Configuration:
    return make_configuration(exp_map(config.points, t * nu.vectors))


# Vector fields


def rotation_fields(p) -> np.ndarray:
    """Values of the so(3) generators at p; result[a] = e_a x p.

    Accepts a single point (returns (3, 3)) or an (N, 3) array (returns (3, N, 3)).
    """
    p = np.asarray(p, dtype=float)
    basis = np.eye(3)
    if p.ndim == 1:
        return np.stack([np.cross(basis[a], p) for a in range(3)])
    return np.stack([np.cross(np.broadcast_to(basis[a], p.shape), p) for a in range(3)])


def cutoff(u) -> Tuple[np.ndarray, np.ndarray]:
    """Quintic plateau profile: 1 on (-inf, 1/4], 0 on [3/4, inf). Returns (chi, chi')."""
    u = np.asarray(u, dtype=float)
    t = np.clip(2.0 * u - 0.5, 0.0, 1.0)
    chi = 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t * t)
    inside = (t > 0.0) & (t < 1.0)
    dchi = np.where(inside, -60.0 * t * t * (1.0 - t) ** 2, 0.0)
    return chi, dchi


def log_cutoff(dist, eps: float) -> np.ndarray:
    """Coalescence cutoff: 1 where dist >= (100 eps)^(5/8), 0 where dist <= (100 eps)^(7/8)."""
    d = np.maximum(np.asarray(dist, dtype=float), 1e-300)
    u = 2.0 * np.log(d) / np.log(100.0 * eps) - 1.0
    return cutoff(u)[0]


class VectorField:
    """Tangent vector field on S2 given by an ambient formula."""

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x) -> np.ndarray:
        raise NotImplementedError

    def divergence(self, x) -> np.ndarray:
        """Surface divergence trace(P J) with P the tangent projector."""
        x = np.atleast_2d(x)
        jac = self.jacobian(x)
        trace = np.einsum("nii->n", jac)
        normal = np.einsum("ni,nij,nj->n", x, jac, x)
        return trace - normal


@dataclass(frozen=True)
class BumpField(VectorField):
    q: np.ndarray
    r: float
    a: float
    s: float

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError(f"Bump width must be positive, got {self.a}")

    def _profile(self, c):
        chi_p, dchi_p = cutoff((c - self.r) / self.a)
        chi_m, dchi_m = cutoff((self.r - c) / self.a)
        g = chi_p * chi_m
        dg = (dchi_p * chi_m - chi_p * dchi_m) / self.a
        return g, dg

    def support_mask(self, x) -> np.ndarray:
        c = np.atleast_2d(x) @ self.q
        return np.abs(c - self.r) < 0.75 * self.a

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g, _ = self._profile(x @ self.q)
        return self.s * g[:, None] * np.cross(np.broadcast_to(self.q, x.shape), x)

    def jacobian(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g, dg = self._profile(x @ self.q)
        qx = np.cross(np.broadcast_to(self.q, x.shape), x)
        skew = np.array(
            [[0.0, -self.q[2], self.q[1]], [self.q[2], 0.0, -self.q[0]], [-self.q[1], self.q[0], 0.0]]
        )
        jac = dg[:, None, None] * qx[:, :, None] * self.q[None, None, :]
        jac = jac + g[:, None, None] * skew[None]
        return self.s * jac


def bump_field(q, r: float, a: float, s: float) -> BumpField:
    q = np.asarray(q, dtype=float).reshape(3)
    return BumpField(q=q / np.linalg.norm(q), r=float(r), a=float(a), s=float(s))


@dataclass(frozen=True)
class MatchingField(VectorField):
    bumps: Tuple[BumpField, ...]
    multipliers: np.ndarray
    radius: float

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        for b in self.bumps:
            out += b(x)
        return out

    def jacobian(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((x.shape[0], 3, 3))
        for b in self.bumps:
            out += b.jacobian(x)
        return out


def _band_outer_radius(b: BumpField) -> float:
    return float(np.arccos(np.clip(b.r - 0.75 * b.a, -1.0, 1.0)))


def matching_field(config: Configuration, nu: ConfigTangent) -> MatchingField:
    """Divergence-free field equal to sin(d) * v_k at each p_k and zero near the others.

    Each bump is centred at q_k = exp_{p_k}(d * p_k x v_k/|v_k|) with its
    core circle through p_k, d = min(0.2 * min_separation, 0.3).
    """
    d = min(0.2 * config.min_separation, 0.3)
    bumps: List[BumpField] = []
    owners: List[int] = []
    multipliers = np.zeros(config.n_points)
    for k, (p, v) in enumerate(zip(config.points, nu.vectors)):
        speed = float(np.linalg.norm(v))
        if speed == 0.0:
            continue
        ey = np.cross(p, v / speed)
        q = np.cos(d) * p + np.sin(d) * ey
        bumps.append(bump_field(q, np.cos(d), 1.0 - np.cos(d), speed))
        owners.append(k)
        multipliers[k] = np.sin(d)

    # support checks
    for i, b in enumerate(bumps):
        outer = _band_outer_radius(b)
        for k, p in enumerate(config.points):
            if k != owners[i] and b.support_mask(p[None])[0]:
                raise SupportCollision(f"Bump around point {owners[i]} covers point {k}")
        for j in range(i + 1, len(bumps)):
            gap = geodesic_distance(b.q, bumps[j].q)
            if gap <= outer + _band_outer_radius(bumps[j]):
                raise SupportCollision(
                    f"Bumps around points {owners[i]} and {owners[j]} overlap"
                )
    return MatchingField(bumps=tuple(bumps), multipliers=multipliers, radius=d)


def rotation_vector_field(axis: int) -> "RotationField":
    return RotationField(axis=axis)


@dataclass(frozen=True)
class RotationField(VectorField):
    axis: int

    def __call__(self, x) -> np.ndarray:
        return rotation_fields(np.atleast_2d(x))[self.axis]

    def jacobian(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        e = np.eye(3)[self.axis]
        skew = np.array([[0.0, -e[2], e[1]], [e[2], 0.0, -e[0]], [-e[1], e[0], 0.0]])
        return np.broadcast_to(skew, (x.shape[0], 3, 3)).copy()
