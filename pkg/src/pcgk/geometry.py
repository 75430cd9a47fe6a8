"""Pure computational-geometry kernels.

Point cloud normalization, camera placement, farthest point sampling,
k-nearest neighbors, the spherical flip, an incremental 3-D convex hull,
and the hidden-point-removal visibility operator built on top of them.
All functions are pure; nothing here touches the autodiff graph.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

TWO_PI = 2.0 * math.pi

# Cameras at unit distance stay strictly outside clouds normalized to this radius.
NORM_RADIUS = 0.35


class DegenerateHullError(ValueError):
    pass


@dataclass
class PointCloud:
    """Ordered (n,3) float64 coordinates plus an optional class label."""

    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class CameraPose:
    """Viewpoint as azimuth/elevation (radians) and distance from the origin."""

    azimuth: float
    elevation: float
    distance: float

    def __post_init__(self):
        if not (math.isfinite(self.azimuth) and math.isfinite(self.elevation)):
            raise ValueError("camera angles must be finite")
        if not (math.isfinite(self.distance) and self.distance > 0):
            raise ValueError(f"camera distance must be positive, got {self.distance}")
        self.azimuth = self.azimuth % TWO_PI
        self.elevation = self.elevation % TWO_PI


def camera_position(pose):
    """Cartesian camera location for a pose."""
    ca, sa = math.cos(pose.azimuth), math.sin(pose.azimuth)
    ce, se = math.cos(pose.elevation), math.sin(pose.elevation)
    return np.array([pose.distance * ce * ca,
                     pose.distance * ce * sa,
                     pose.distance * se])


def normalize_cloud(cloud):
    """Center on the centroid and scale the farthest point to NORM_RADIUS."""
    if len(cloud) == 0:
        raise ValueError("cannot normalize an empty cloud")
    centered = cloud.points - cloud.points.mean(axis=0)
    max_norm = float(np.linalg.norm(centered, axis=1).max())
    if max_norm < 1e-15:
        return PointCloud(np.zeros_like(centered), cloud.label)
    return PointCloud(centered * (NORM_RADIUS / max_norm), cloud.label)


def farthest_point_sampling(cloud, m, seed):
    """Greedy max-min subset of m point indices; first pick is seed mod n.

    Ties break toward the lowest index so the result is reproducible and
    matches the brute-force reference exactly.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    n = pts.shape[0]
    if not (1 <= m <= n):
        raise ValueError(f"fps: need 1 <= m <= {n}, got {m}")
    first = int(seed) % n
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = first
    d2 = np.sum((pts - pts[first]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def knn(query, cloud, k):
    """Indices of the k nearest points to query, ascending distance, ties by index."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    n = pts.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"knn: need 1 <= k <= {n}, got {k}")
    d2 = np.sum((pts - np.asarray(query, float)) ** 2, axis=1)
    return np.argsort(d2, kind="stable")[:k]


def spherical_flip(cloud, camera, gamma):
    """Reflect camera-centered points q to q + 2(R - |q|) q/|q| with R = gamma*max|q|.

    Returns (flipped (n,3) array in camera-centered coordinates, R).
    Every flipped point lands at radius 2R - |q| along its original ray.
    """
    if gamma <= 1.0:
        raise ValueError(f"spherical flip requires gamma > 1, got {gamma}")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    q = pts - np.asarray(camera, float)
    norms = np.linalg.norm(q, axis=1)
    bad = int(np.argmin(norms))
    if norms[bad] <= 1e-9:
        raise ValueError(f"point {bad} coincides with the camera (distance {norms[bad]:.2e})")
    radius = float(gamma * norms.max())
    flipped = q * ((2.0 * radius - norms) / norms)[:, None]
    return flipped, radius


# ---------------------------------------------------------------------------
# incremental 3-D convex hull (quickhull)
# ---------------------------------------------------------------------------

@dataclass
class Hull3D:
    """Triangulated convex hull: extreme-point indices and outward faces."""

    vertices: np.ndarray
    faces: list
    normals: np.ndarray = field(repr=False, default=None)
    offsets: np.ndarray = field(repr=False, default=None)
    eps: float = 0.0

    def edge_count(self):
        edges = set()
        for a, b, c in self.faces:
            for u, v in ((a, b), (b, c), (c, a)):
                edges.add((min(u, v), max(u, v)))
        return len(edges)

    def max_outside_distance(self, points):
        """Largest signed distance of any point above any face plane."""
        d = points @ self.normals.T - self.offsets
        return float(d.max())

    def validate(self, points):
        """Check the hull invariants; raises on violation."""
        if self.max_outside_distance(points) > self.eps:
            raise DegenerateHullError("hull invariant violated: point outside a face plane")
        v, e, f = len(self.vertices), self.edge_count(), len(self.faces)
        if v - e + f != 2:
            raise DegenerateHullError(f"Euler check failed: V={v} E={e} F={f}")
        counts = {}
        for tri in self.faces:
            for idx in tri:
                counts[idx] = counts.get(idx, 0) + 1
        if any(counts.get(int(i), 0) < 3 for i in self.vertices):
            raise DegenerateHullError("hull vertex appears in fewer than 3 faces")


def _initial_simplex(pts, eps):
    spans = pts.max(axis=0) - pts.min(axis=0)
    axis = int(np.argmax(spans))
    i0 = int(np.argmin(pts[:, axis]))
    i1 = int(np.argmax(pts[:, axis]))
    if np.linalg.norm(pts[i1] - pts[i0]) <= eps:
        raise DegenerateHullError("all points coincide")
    u = pts[i1] - pts[i0]
    u = u / np.linalg.norm(u)
    rel = pts - pts[i0]
    line_d = np.linalg.norm(rel - np.outer(rel @ u, u), axis=1)
    i2 = int(np.argmax(line_d))
    if line_d[i2] <= eps:
        raise DegenerateHullError("points are collinear")
    normal = np.cross(pts[i1] - pts[i0], pts[i2] - pts[i0])
    normal = normal / np.linalg.norm(normal)
    plane_d = np.abs(rel @ normal)
    i3 = int(np.argmax(plane_d))
    if plane_d[i3] <= eps:
        raise DegenerateHullError("points are coplanar")
    return i0, i1, i2, i3


class _HullBuilder:
    """Face soup with outward orientation and per-face conflict sets."""

    def __init__(self, pts, eps, interior):
        self.pts = pts
        self.eps = eps
        self.interior = interior
        cap = 64
        self.tris = np.zeros((cap, 3), dtype=np.int64)
        self.normals = np.zeros((cap, 3))
        self.offsets = np.zeros(cap)
        self.alive = np.zeros(cap, dtype=bool)
        self.outside = []
        self.nfaces = 0

    def _grow(self):
        cap = self.tris.shape[0] * 2
        self.tris = np.resize(self.tris, (cap, 3))
        self.normals = np.resize(self.normals, (cap, 3))
        self.offsets = np.resize(self.offsets, cap)
        alive = np.zeros(cap, dtype=bool)
        alive[:self.nfaces] = self.alive[:self.nfaces]
        self.alive = alive

    def add_face(self, a, b, c):
        pa, pb, pc = self.pts[a], self.pts[b], self.pts[c]
        n = np.cross(pb - pa, pc - pa)
        nn = np.linalg.norm(n)
        if nn < 1e-300:
            raise DegenerateHullError(f"zero-area face ({a},{b},{c})")
        n = n / nn
        if n @ self.interior > n @ pa:
            b, c = c, b
            n = -n
        fid = self.nfaces
        if fid == self.tris.shape[0]:
            self._grow()
        self.tris[fid] = (a, b, c)
        self.normals[fid] = n
        self.offsets[fid] = n @ pa
        self.alive[fid] = True
        self.outside.append(np.empty(0, dtype=np.int64))
        self.nfaces += 1
        return fid

    def assign_conflicts(self, candidates, fids):
        """Each candidate strictly above some face goes to the first such face."""
        remaining = np.asarray(candidates, dtype=np.int64)
        for fid in fids:
            if remaining.size == 0:
                break
            d = self.pts[remaining] @ self.normals[fid] - self.offsets[fid]
            above = d > self.eps
            self.outside[fid] = remaining[above]
            remaining = remaining[~above]

    def visible_faces(self, apex_pt):
        n = self.nfaces
        d = self.normals[:n] @ apex_pt - self.offsets[:n]
        return np.nonzero(self.alive[:n] & (d > self.eps))[0]


def convex_hull_3d(points):
    """Convex hull of >= 4 non-coplanar points; vertex set = extreme points."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, float)
    n = pts.shape[0]
    if n < 4:
        raise DegenerateHullError(f"need at least 4 points, got {n}")
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    eps = 1e-9 * diag
    if diag == 0.0:
        raise DegenerateHullError("all points coincide")
    i0, i1, i2, i3 = _initial_simplex(pts, eps)
    interior = pts[[i0, i1, i2, i3]].mean(axis=0)
    hb = _HullBuilder(pts, eps, interior)
    seed_fids = [hb.add_face(i0, i1, i2), hb.add_face(i0, i1, i3),
                 hb.add_face(i0, i2, i3), hb.add_face(i1, i2, i3)]
    rest = np.setdiff1d(np.arange(n), [i0, i1, i2, i3])
    hb.assign_conflicts(rest, seed_fids)

    stack = [fid for fid in seed_fids if hb.outside[fid].size]
    while stack:
        fid = stack.pop()
        if not hb.alive[fid] or hb.outside[fid].size == 0:
            continue
        cand = hb.outside[fid]
        d = hb.pts[cand] @ hb.normals[fid] - hb.offsets[fid]
        apex = int(cand[np.argmax(d)])
        visible = hb.visible_faces(pts[apex])

        # horizon = directed edges of the visible region without a visible twin
        edge_owner = {}
        for vf in visible:
            a, b, c = hb.tris[vf]
            for u, v in ((a, b), (b, c), (c, a)):
                edge_owner[(int(u), int(v))] = vf
        horizon = [(u, v) for (u, v) in edge_owner if (v, u) not in edge_owner]

        orphans = [hb.outside[vf] for vf in visible]
        hb.alive[visible] = False
        new_fids = [hb.add_face(u, v, apex) for u, v in horizon]
        cand = np.unique(np.concatenate(orphans))
        cand = cand[cand != apex]
        hb.assign_conflicts(cand, new_fids)
        stack.extend(f for f in new_fids if hb.outside[f].size)

    alive = np.nonzero(hb.alive[:hb.nfaces])[0]
    faces = [tuple(int(i) for i in hb.tris[f]) for f in alive]
    vertices = np.unique(hb.tris[alive])
    return Hull3D(vertices=vertices, faces=faces,
                  normals=hb.normals[alive].copy(),
                  offsets=hb.offsets[alive].copy(), eps=eps)


# ---------------------------------------------------------------------------
# hidden point removal
# ---------------------------------------------------------------------------

def camera_is_exterior(cloud, cam):
    """True when the camera lies strictly outside the cloud's convex hull."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    # cheap sufficient bound: outside the bounding sphere about the origin
    if np.linalg.norm(cam) > np.linalg.norm(pts, axis=1).max() + 1e-12:
        return True
    try:
        hull = convex_hull_3d(pts)
    except DegenerateHullError:
        return False
    return bool((hull.normals @ cam - hull.offsets > hull.eps).any())


def hidden_point_removal(cloud, pose, gamma=3.0):
    """Split a cloud into (visible, hidden) index arrays for a camera pose.

    Spherically flips the cloud about the camera and keeps the points whose
    images are vertices of the hull of the flipped set plus the camera.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    cam = camera_position(pose)
    if not camera_is_exterior(pts, cam):
        raise ValueError("camera not exterior to the cloud's convex hull")
    flipped, _ = spherical_flip(pts, cam, gamma)
    aug = np.vstack([flipped, np.zeros(3)])  # camera sits at the origin here
    hull = convex_hull_3d(aug)
    n = pts.shape[0]
    visible = np.array(sorted(int(v) for v in hull.vertices if v != n), dtype=np.int64)
    hidden = np.setdiff1d(np.arange(n), visible)
    return visible, hidden
