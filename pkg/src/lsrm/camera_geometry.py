"""Cameras, Pluecker rays, analytic SDF fields, and surface-point extraction.

Camera convention: intrinsics K = [[fx,0,cx],[0,fy,cy],[0,0,1]], camera
space +x right / +y down / +z forward, and world_from_camera as
p_world = R @ p_cam + t, so the camera center is t.

Scenes live in the unit cube [0,1]^3.  Analytic SDF fields double as the
oracles that decoded fields are tested against.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, ConfigurationError, require

N_MARCH = 128
LAPLACE_BETA = 0.02     # SDF-to-density sharpness, object-space units
NO_PEAK_MARGIN = 3.0    # min s > margin * beta means the ray saw nothing
S_BIAS_RADIUS = 0.45    # bounding-sphere prior for the SDF offset
CUBE_CENTER = np.array([0.5, 0.5, 0.5])


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Camera:
    intrinsics: np.ndarray        # [3,3]
    rotation: np.ndarray          # [3,3], world_from_camera
    translation: np.ndarray       # [3], camera center in world space
    image_size: tuple             # (width, height) pixels

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        R = np.asarray(self.rotation, dtype=np.float64)
        require(K.shape == (3, 3) and R.shape == (3, 3),
                "intrinsics and rotation must be 3x3")
        require(K[0, 0] > 0 and K[1, 1] > 0, "focal lengths must be positive")
        require(np.abs(R.T @ R - np.eye(3)).max() <= 1e-6,
                "rotation must be orthonormal")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64))
        require(len(self.image_size) == 2 and min(self.image_size) >= 1,
                "image_size must be (width, height)")


def project_point(camera: Camera, p):
    """Pinhole projection; returns (pixel [2], depth).

    Scalar component arithmetic in a fixed order: routing tie rules depend on
    these exact floats, and the brute-force oracles recompute them the same
    way.
    """
    R = camera.rotation
    t = camera.translation
    dx = float(p[0]) - t[0]
    dy = float(p[1]) - t[1]
    dz = float(p[2]) - t[2]
    # camera-space coordinates via R^T
    xc = R[0, 0] * dx + R[1, 0] * dy + R[2, 0] * dz
    yc = R[0, 1] * dx + R[1, 1] * dy + R[2, 1] * dz
    zc = R[0, 2] * dx + R[1, 2] * dy + R[2, 2] * dz
    if zc <= 0.0:
        raise BehindCameraError(f"point {np.asarray(p).tolist()} has "
                                f"camera-space depth {zc:.6g}")
    K = camera.intrinsics
    u = K[0, 0] * (xc / zc) + K[0, 2]
    v = K[1, 1] * (yc / zc) + K[1, 2]
    return np.array([u, v]), zc


def unproject_point(camera: Camera, pixel, depth: float):
    """Inverse of project_point, implemented independently (matrix form)."""
    K = camera.intrinsics
    xc = (pixel[0] - K[0, 2]) / K[0, 0] * depth
    yc = (pixel[1] - K[1, 2]) / K[1, 1] * depth
    p_cam = np.array([xc, yc, depth])
    return camera.rotation @ p_cam + camera.translation


def pluecker_rays(camera: Camera, grid) -> np.ndarray:
    """Rays through the centers of a (w,h) grid laid over the full image.

    Returns [h, w, 6] float32 rows (d, o x d) with d the unit world-space
    direction.  grid == image_size gives per-pixel rays; a patch grid gives
    patch-center rays.
    """
    gw, gh = int(grid[0]), int(grid[1])
    require(gw >= 1 and gh >= 1, "ray grid must be at least 1x1")
    W, H = camera.image_size
    K = camera.intrinsics
    u = (np.arange(gw) + 0.5) * (W / gw)
    v = (np.arange(gh) + 0.5) * (H / gh)
    uu, vv = np.meshgrid(u, v)                       # [gh, gw]
    d_cam = np.stack([(uu - K[0, 2]) / K[0, 0],
                      (vv - K[1, 2]) / K[1, 1],
                      np.ones_like(uu)], axis=-1)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    moment = np.cross(np.broadcast_to(camera.translation, d_world.shape),
                      d_world)
    return np.concatenate([d_world, moment], axis=-1).astype(np.float32)


def look_at_camera(eye, target, image_size, focal, world_up=(0.0, 0.0, 1.0)):
    """Camera at eye looking toward target, principal point at the center."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(world_up, dtype=np.float64)
    if abs(np.dot(fwd, up)) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    W, H = image_size
    K = np.array([[focal, 0.0, W / 2.0],
                  [0.0, focal, H / 2.0],
                  [0.0, 0.0, 1.0]])
    return Camera(K, R, eye, (int(W), int(H)))


def orbit_cameras(count: int, radius: float, elevation_deg: float,
                  image_size, fov_deg: float = 50.0, phase: float = 0.0):
    """Ring of cameras circling the cube center at fixed elevation."""
    require(count >= 1, "orbit needs at least one camera")
    W = image_size[0]
    focal = 0.5 * W / math.tan(math.radians(fov_deg) / 2.0)
    el = math.radians(elevation_deg)
    cams = []
    for k in range(count):
        az = phase + 2.0 * math.pi * k / count
        eye = CUBE_CENTER + radius * np.array([
            math.cos(az) * math.cos(el),
            math.sin(az) * math.cos(el),
            math.sin(el)])
        cams.append(look_at_camera(eye, CUBE_CENTER, image_size, focal))
    return cams


# ---------------------------------------------------------------------------
# SDF fields


@dataclass(frozen=True)
class SdfField:
    """Evaluable signed-distance field over [0,1]^3, negative inside.

    kind: "sphere" (center, radius), "box" (center, half_sizes),
    "union" (parts), or "callable" (fn mapping [N,3] -> [N], used to wrap
    decoded volumes).
    """

    kind: str
    center: np.ndarray = None
    radius: float = 0.0
    half_sizes: np.ndarray = None
    parts: tuple = ()
    fn: object = None


def sphere_field(center, radius: float) -> SdfField:
    require(radius > 0, "sphere radius must be positive")
    return SdfField("sphere", center=np.asarray(center, dtype=np.float64),
                    radius=float(radius))


def box_field(center, half_sizes) -> SdfField:
    hs = np.asarray(half_sizes, dtype=np.float64)
    require(np.all(hs > 0), "box half sizes must be positive")
    return SdfField("box", center=np.asarray(center, dtype=np.float64),
                    half_sizes=hs)


def union_field(*parts: SdfField) -> SdfField:
    require(len(parts) >= 1, "union needs at least one part")
    return SdfField("union", parts=tuple(parts))


def callable_field(fn) -> SdfField:
    return SdfField("callable", fn=fn)


def eval_sdf_many(field: SdfField, points: np.ndarray) -> np.ndarray:
    """Vectorized signed distance at [N,3] points; float64 [N]."""
    pts = np.asarray(points, dtype=np.float64)
    if field.kind == "sphere":
        return np.linalg.norm(pts - field.center, axis=-1) - field.radius
    if field.kind == "box":
        q = np.abs(pts - field.center) - field.half_sizes
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside
    if field.kind == "union":
        vals = np.stack([eval_sdf_many(p, pts) for p in field.parts])
        return vals.min(axis=0)
    if field.kind == "callable":
        return np.asarray(field.fn(pts), dtype=np.float64)
    raise ConfigurationError(f"unknown SDF kind {field.kind!r}")


def eval_sdf(field: SdfField, p) -> float:
    return float(eval_sdf_many(field, np.asarray(p, dtype=np.float64)
                               .reshape(1, 3))[0])


def s_bias(p) -> float:
    """Distance-to-bounding-sphere offset added to every decoded SDF."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.linalg.norm(p - CUBE_CENTER) - S_BIAS_RADIUS)


def s_bias_many(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return np.linalg.norm(pts - CUBE_CENTER, axis=-1) - S_BIAS_RADIUS


# ---------------------------------------------------------------------------
# ray marching


@dataclass(frozen=True)
class RaySample:
    origin: np.ndarray
    direction: np.ndarray
    t_hit: object          # float or None
    opacity_peak: object   # 3-vector or None


def ray_cube_intersection(origin, direction):
    """(t_enter, t_exit) against [0,1]^3 or None; slab method."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    t0, t1 = -np.inf, np.inf
    for ax in range(3):
        if abs(d[ax]) < 1e-12:
            if o[ax] < 0.0 or o[ax] > 1.0:
                return None
            continue
        a = (0.0 - o[ax]) / d[ax]
        b = (1.0 - o[ax]) / d[ax]
        t0 = max(t0, min(a, b))
        t1 = min(t1, max(a, b))
    if t1 <= t0 or t1 <= 0.0:
        return None
    return max(t0, 0.0), t1


def laplace_density(s: np.ndarray, beta: float) -> np.ndarray:
    """Laplace-CDF transform of the SDF: density = (1/beta) * Psi(-s)."""
    s = np.asarray(s, dtype=np.float64)
    psi = np.where(s >= 0.0,
                   0.5 * np.exp(-s / beta),
                   1.0 - 0.5 * np.exp(s / beta))
    return psi / beta


def surface_point_for_ray(field: SdfField, origin, direction,
                          beta: float = LAPLACE_BETA) -> RaySample:
    """March the unit cube and localize the surface along one ray.

    128 uniform mid-segment samples between cube entry and exit; density via
    the Laplace transform; the opacity peak is the sample whose contribution
    to accumulated opacity (transmittance times per-sample alpha) is largest.
    Rays that keep min s above 3*beta saw nothing and report no peak.  t_hit
    is the first positive-to-negative sign crossing, linearly interpolated.
    """
    require(beta > 0, "beta must be positive")
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    require(norm > 0, "ray direction must be nonzero")
    d = d / norm
    span = ray_cube_intersection(o, d)
    if span is None:
        return RaySample(o, d, None, None)
    t0, t1 = span
    step = (t1 - t0) / N_MARCH
    ts = t0 + (np.arange(N_MARCH) + 0.5) * step
    pts = o[None, :] + ts[:, None] * d[None, :]
    s = eval_sdf_many(field, pts)

    t_hit = None
    if s[0] <= 0.0:
        t_hit = float(ts[0])
    else:
        crossings = np.nonzero((s[:-1] > 0.0) & (s[1:] <= 0.0))[0]
        if crossings.size:
            i = int(crossings[0])
            frac = s[i] / (s[i] - s[i + 1])
            t_hit = float(ts[i] + frac * (ts[i + 1] - ts[i]))

    if s.min() > NO_PEAK_MARGIN * beta:
        return RaySample(o, d, t_hit, None)

    alpha = 1.0 - np.exp(-laplace_density(s, beta) * step)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
    weight = trans * alpha
    peak = pts[int(np.argmax(weight))]
    return RaySample(o, d, t_hit, peak)


def _ray_hits(field: SdfField, origin: np.ndarray,
              dirs: np.ndarray) -> np.ndarray:
    """Boolean forward-hit test for analytic fields; dirs [N,3] unit."""
    o = np.asarray(origin, dtype=np.float64)
    if field.kind == "sphere":
        b = field.center - o
        t_ca = dirs @ b
        perp2 = (b @ b) - t_ca * t_ca
        return (perp2 <= field.radius ** 2) & (t_ca >= -field.radius)
    if field.kind == "box":
        lo = field.center - field.half_sizes
        hi = field.center + field.half_sizes
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[None, :] - o[None, :]) / dirs
            tb = (hi[None, :] - o[None, :]) / dirs
        t0 = np.nanmax(np.minimum(ta, tb), axis=1)
        t1 = np.nanmin(np.maximum(ta, tb), axis=1)
        par = np.abs(dirs) < 1e-12
        inside = (o[None, :] >= lo[None, :]) & (o[None, :] <= hi[None, :])
        ok = ~(par & ~inside).any(axis=1)
        return ok & (t1 >= np.maximum(t0, 0.0))
    if field.kind == "union":
        hit = np.zeros(dirs.shape[0], dtype=bool)
        for part in field.parts:
            hit |= _ray_hits(part, o, dirs)
        return hit
    raise ConfigurationError(
        f"silhouette test undefined for SDF kind {field.kind!r}")


def silhouette_alpha(field: SdfField, camera: Camera) -> np.ndarray:
    """[H,W] float32 alpha: 1 where the pixel ray hits the field."""
    W, H = camera.image_size
    rays = pluecker_rays(camera, (W, H)).astype(np.float64)
    dirs = rays[..., :3].reshape(-1, 3)
    hits = _ray_hits(field, camera.translation, dirs)
    return hits.reshape(H, W).astype(np.float32)


# ---------------------------------------------------------------------------
# scene files (schema 1)


def field_from_json(node: dict) -> SdfField:
    kind = node.get("kind")
    if kind == "sphere":
        return sphere_field(node["center"], node["radius"])
    if kind == "box":
        return box_field(node["center"], node["half_sizes"])
    if kind == "union":
        return union_field(*[field_from_json(p) for p in node["parts"]])
    raise ConfigurationError(f"unknown SDF kind in scene: {kind!r}")


def camera_from_json(node: dict) -> Camera:
    size = tuple(int(s) for s in node["image_size"])
    if "rotation" in node:
        focal = node["focal"]
        fx, fy = (focal, focal) if np.isscalar(focal) else focal
        cx, cy = node.get("principal", (size[0] / 2.0, size[1] / 2.0))
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return Camera(K, np.asarray(node["rotation"], dtype=np.float64),
                      np.asarray(node["position"], dtype=np.float64), size)
    # look-at shorthand
    focal = node.get("focal")
    if focal is None:
        fov = node.get("fov_deg", 50.0)
        focal = 0.5 * size[0] / math.tan(math.radians(fov) / 2.0)
    return look_at_camera(node["position"], node.get("look_at", CUBE_CENTER),
                          size, focal)


def scene_from_json(doc: dict):
    """Parse a scene document; returns (cameras, field).

    Layout: {"schema": 1, "sdf": {...}, and either "cameras": [...] or
    "rig": {"count", "radius", "elevation_deg", "image_size", "fov_deg"}}.
    """
    if doc.get("schema") != 1:
        raise ConfigurationError(
            f"unsupported scene schema {doc.get('schema')!r}, expected 1")
    if "sdf" not in doc:
        raise ConfigurationError("scene missing 'sdf' entry")
    field = field_from_json(doc["sdf"])
    if "cameras" in doc:
        cams = [camera_from_json(c) for c in doc["cameras"]]
    elif "rig" in doc:
        rig = doc["rig"]
        cams = orbit_cameras(int(rig["count"]), float(rig["radius"]),
                             float(rig.get("elevation_deg", 20.0)),
                             tuple(rig["image_size"]),
                             float(rig.get("fov_deg", 50.0)),
                             float(rig.get("phase", 0.0)))
    else:
        raise ConfigurationError("scene needs 'cameras' or 'rig'")
    if not cams:
        raise ConfigurationError("scene has no cameras")
    return cams, field
