"""Differentiable image formation: shading, rigid reprojection, soft splatting.

The canonical factors live on a pixel-aligned depth/albedo card in front of a
pinhole camera looking along +z (x right, y down).  A render shades the card
with a single ambient+diffuse light, rigidly moves it about the object center,
and forward-splats each point to the target raster with bilinear weights
weighted by a softmax depth visibility term, so the whole image is an
analytic function of albedo, depth, light and pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeMismatch
from .tensor import Tensor

OBJECT_CENTER_Z = 1.0
SPLAT_TAU = 0.01
COVERAGE_EPS = 1e-6
BACKGROUND = 1.0

DEPTH_CENTER = 1.0
DEPTH_SPAN = 0.1
ANGLE_BOUND_DEG = 60.0
SHIFT_BOUND = 0.1
DEPTH_SHIFT_BOUND = 0.05


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with the principal point at the image center."""

    height: int
    width: int
    fov_deg: float = 10.0

    def __post_init__(self):
        if not (1.0 < self.fov_deg < 60.0):
            raise ContractError(f"camera field of view {self.fov_deg} outside (1, 60) degrees")
        if self.height < 1 or self.width < 1:
            raise ContractError("camera image size must be positive")

    @property
    def focal(self):
        return (self.width - 1) / 2.0 / np.tan(np.deg2rad(self.fov_deg) / 2.0)

    @property
    def cx(self):
        return (self.width - 1) / 2.0

    @property
    def cy(self):
        return (self.height - 1) / 2.0

    @property
    def intrinsics(self):
        f = self.focal
        return np.array([[f, 0.0, self.cx], [0.0, f, self.cy], [0.0, 0.0, 1.0]])


_grid_cache = {}


def _grids(cam):
    """Constant per-pixel geometry: backprojection rays and the clamped
    neighbor coordinates used for depth differencing."""
    key = (cam.height, cam.width, cam.fov_deg)
    hit = _grid_cache.get(key)
    if hit is not None:
        return hit
    H, W, f = cam.height, cam.width, cam.focal
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    u, v = u.reshape(-1), v.reshape(-1)

    def rays_at(uu, vv):
        return np.stack([(uu - cam.cx) / f, (vv - cam.cy) / f, np.ones_like(uu)])

    shifts = {}
    for name, (du, dv) in {"xp": (1, 0), "xm": (-1, 0), "yp": (0, 1), "ym": (0, -1)}.items():
        uu = np.clip(u + du, 0, W - 1)
        vv = np.clip(v + dv, 0, H - 1)
        shifts[name] = (uu, vv, rays_at(uu, vv))
    hit = {"u": u, "v": v, "rays": rays_at(u, v), "shifts": shifts}
    _grid_cache[key] = hit
    return hit


@dataclass
class Light:
    """Ambient/diffuse intensities plus the tangential direction components."""

    k_amb: Tensor
    k_diff: Tensor
    lx: Tensor
    ly: Tensor

    @classmethod
    def from_raw(cls, raw):
        """Map a raw 4-vector into the valid range via tanh squashing."""
        amb = (T.tanh(T.slice_axis(raw, 0, 0, 1)) + 1.0) * 0.5
        diff = (T.tanh(T.slice_axis(raw, 0, 1, 2)) + 1.0) * 0.5
        lx = T.tanh(T.slice_axis(raw, 0, 2, 3))
        ly = T.tanh(T.slice_axis(raw, 0, 3, 4))
        return cls(amb, diff, lx, ly)

    @classmethod
    def from_values(cls, k_amb, k_diff, lx, ly):
        return cls(Tensor([k_amb]), Tensor([k_diff]), Tensor([lx]), Tensor([ly]))

    def direction(self):
        """Unit direction on the toward-camera hemisphere (z <= 0)."""
        sq = self.lx * self.lx + self.ly * self.ly
        # tiny floor keeps the sqrt gradient finite when (lx, ly) hits the rim
        lz = T.sqrt(T.relu(1.0 - sq) + 1e-12)
        vec = T.concat([self.lx, self.ly, -lz], axis=0)
        norm = T.sqrt((vec * vec).sum(keepdims=True))
        return vec / T.broadcast_to(norm, (3,))

    def mirrored(self):
        return Light(self.k_amb, self.k_diff, -self.lx, self.ly)

    def to_dict(self):
        return {"ambient": self.k_amb.item(), "diffuse": self.k_diff.item(),
                "direction_xy": [self.lx.item(), self.ly.item()]}


@dataclass
class Pose:
    """Rigid motion: intrinsic yaw-pitch-roll (degrees) about the object
    center, then a translation in camera units."""

    angles_deg: Tensor
    translation: Tensor

    def __post_init__(self):
        self.angles_deg = T.as_tensor(self.angles_deg)
        self.translation = T.as_tensor(self.translation)

    @classmethod
    def from_raw(cls, raw):
        angles = ANGLE_BOUND_DEG * T.tanh(T.slice_axis(raw, 0, 0, 3))
        txy = SHIFT_BOUND * T.tanh(T.slice_axis(raw, 0, 3, 5))
        tz = DEPTH_SHIFT_BOUND * T.tanh(T.slice_axis(raw, 0, 5, 6))
        return cls(angles, T.concat([txy, tz], axis=0))

    @classmethod
    def identity(cls):
        return cls(Tensor(np.zeros(3)), Tensor(np.zeros(3)))

    def mirrored(self):
        flip = Tensor(np.array([-1.0, 1.0, -1.0]))
        tflip = Tensor(np.array([-1.0, 1.0, 1.0]))
        return Pose(self.angles_deg * flip, self.translation * tflip)

    def to_dict(self):
        return {"angles_deg": [float(a) for a in self.angles_deg.data],
                "translation": [float(t) for t in self.translation.data]}


@dataclass
class RenderOutput:
    image: Tensor      # [3,H,W] in [0,1]
    coverage: Tensor   # [H,W] in [0,1]
    depth: Tensor      # [H,W] camera-axis depth of the splatted surface


def depth_from_raw(raw):
    """Raw map -> depth in [0.9, 1.1]."""
    return DEPTH_CENTER + DEPTH_SPAN * T.tanh(raw)


def albedo_from_raw(raw):
    """Raw map -> albedo in [0, 1]."""
    return (T.tanh(raw) + 1.0) * 0.5


def depth_to_normals(depth, cam):
    """Per-pixel unit normals from central differences of backprojected
    points; borders replicate, orientation fixed toward the camera (nz <= 0)."""
    depth = T.as_tensor(depth)
    H, W = cam.height, cam.width
    if H < 3 or W < 3:
        raise ShapeMismatch("depth_to_normals", (H, W), detail="image smaller than 3x3")
    if depth.shape != (H, W):
        raise ShapeMismatch("depth_to_normals", depth.shape, (H, W))
    grids = _grids(cam)
    d1 = depth.reshape((1, H * W))
    d1 = T.reshape(d1, (1, H, W))

    def point(shift):
        uu, vv, rays = grids["shifts"][shift]
        dv = T.gather_bilinear(d1, Tensor(uu), Tensor(vv))  # [1, HW]
        return T.broadcast_to(dv, (3, H * W)) * Tensor(rays)

    tx = point("xp") - point("xm")
    ty = point("yp") - point("ym")

    def row(t, i):
        return T.slice_axis(t, 0, i, i + 1)

    # n = cross(ty, tx): faces the camera for a regular front surface
    nx = row(ty, 1) * row(tx, 2) - row(ty, 2) * row(tx, 1)
    ny = row(ty, 2) * row(tx, 0) - row(ty, 0) * row(tx, 2)
    nz = row(ty, 0) * row(tx, 1) - row(ty, 1) * row(tx, 0)
    n = T.concat([nx, ny, nz], axis=0)
    norm = T.sqrt((n * n).sum(axis=0, keepdims=True) + 1e-20)
    n = n / T.broadcast_to(norm, (3, H * W))
    # flip any stray away-facing normal; the mask is locally constant
    sign = np.where(n.data[2] > 0.0, -1.0, 1.0)[None, :]
    n = n * Tensor(sign)
    return T.reshape(n, (3, H, W))


def shade(albedo, normals, light):
    """Lambertian shading: albedo * (k_amb + k_diff * max(0, <n, l>))."""
    albedo = T.as_tensor(albedo)
    normals = T.as_tensor(normals)
    if albedo.shape != normals.shape:
        raise ShapeMismatch("shade", albedo.shape, normals.shape)
    ldir = T.reshape(light.direction(), (3, 1, 1))
    cosine = (normals * T.broadcast_to(ldir, normals.shape)).sum(axis=0, keepdims=True)
    gain = T.broadcast_to(T.reshape(light.k_amb, (1, 1, 1)), cosine.shape) \
        + T.broadcast_to(T.reshape(light.k_diff, (1, 1, 1)), cosine.shape) * T.relu(cosine)
    return T.clamp(albedo * T.broadcast_to(gain, albedo.shape), 0.0, 1.0)


def reproject(image, depth, pose, cam, tau=SPLAT_TAU, background=BACKGROUND):
    """Rigidly move the depth card and forward-splat its colors.

    Each source pixel contributes to its 4 bilinear neighbors, weighted by
    exp(-z/tau) visibility; per-pixel sums are normalized, so occluding
    (nearer) contributions dominate.  The per-pixel softmax stabilizer is
    treated as locally constant in the backward pass; it cancels exactly in
    the color and depth ratios.
    """
    image, depth = T.as_tensor(image), T.as_tensor(depth)
    H, W = cam.height, cam.width
    if image.shape[-2:] != (H, W) or depth.shape != (H, W):
        raise ShapeMismatch("reproject", image.shape, depth.shape, (H, W))
    C = image.shape[0]
    grids = _grids(cam)
    HW = H * W

    P = T.broadcast_to(T.reshape(depth, (1, HW)), (3, HW)) * Tensor(grids["rays"])
    c0 = Tensor(np.array([[0.0], [0.0], [OBJECT_CENTER_Z]]))
    R = T.euler_rotation(pose.angles_deg)
    Q = R @ (P - T.broadcast_to(c0, (3, HW)))
    Q = Q + T.broadcast_to(c0 + T.reshape(pose.translation, (3, 1)), (3, HW))

    qx = T.reshape(T.slice_axis(Q, 0, 0, 1), (HW,))
    qy = T.reshape(T.slice_axis(Q, 0, 1, 2), (HW,))
    qz = T.reshape(T.slice_axis(Q, 0, 2, 3), (HW,))
    x = cam.focal * qx / qz + cam.cx
    y = cam.focal * qy / qz + cam.cy

    # visibility, stabilized by the detached global minimum depth
    z0 = float(qz.data.min())
    vis = T.exp((z0 - qz) / tau)
    vis_row = T.reshape(vis, (1, HW))
    values = T.concat([
        image.reshape((C, HW)) * T.broadcast_to(vis_row, (C, HW)),
        vis_row,
        vis_row * T.reshape(qz, (1, HW)),
    ], axis=0)
    raster = T.scatter_bilinear(values, x, y, H, W)

    numer = T.slice_axis(raster, 0, 0, C)
    denom = T.slice_axis(raster, 0, C, C + 1)
    numer_z = T.slice_axis(raster, 0, C + 1, C + 2)

    # per-target-pixel nearest positive-weight contributor (detached bookkeeping)
    znear = np.full(HW, np.inf)
    x0 = np.floor(x.data).astype(np.int64)
    y0 = np.floor(y.data).astype(np.int64)
    fx, fy = x.data - x0, y.data - y0
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        xi, yi = x0 + dx, y0 + dy
        # cells carrying negligible mass (exact-integer hits) are not contributors
        sel = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H) & (w > 1e-8)
        np.minimum.at(znear, (yi * W + xi)[sel], qz.data[sel])
    stab = np.where(np.isfinite(znear), np.exp((znear - z0) / tau), 1.0).reshape(1, H, W)

    denom_stab = denom * Tensor(stab)
    covered = (denom_stab.data >= COVERAGE_EPS).astype(np.float64)
    covered_t = Tensor(covered)
    denom_safe = denom + Tensor(1.0 - covered)

    image_out = T.broadcast_to(covered_t, (C, H, W)) * (numer / T.broadcast_to(denom_safe, (C, H, W)))
    image_out = image_out + Tensor((1.0 - covered) * background)
    coverage = T.reshape(T.clamp(denom_stab, 0.0, 1.0) * covered_t, (H, W))
    depth_out = T.reshape(covered_t * (numer_z / denom_safe), (H, W))
    return RenderOutput(image=image_out, coverage=coverage, depth=depth_out)


def render(albedo, depth, light, pose, cam, flipped=False):
    """Full image formation; with `flipped` the canonical factors are
    width-reversed first (the weak-symmetry pathway)."""
    albedo, depth = T.as_tensor(albedo), T.as_tensor(depth)
    if flipped:
        albedo = T.flip_w(albedo)
        depth = T.flip_w(depth)
    normals = depth_to_normals(depth, cam)
    shaded = shade(albedo, normals, light)
    return reproject(shaded, depth, pose, cam)


def splat_mass(x, y, height, width):
    """Total in-raster bilinear weight per source point (numpy helper)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    total = np.zeros_like(x)
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        total += w * ok
    return total
