"""Differentiable EWA splat rasterizer and the shared spherical camera model.

Conventions
-----------
* Head frame: +y up, +z toward the viewer at azimuth 0. Elevation is the polar
  angle from +y, so 90 degrees puts the camera on the horizon; azimuth 0 /
  elevation 90 places it on the +z axis looking at ``look_at`` with up = +y.
* Camera frame: x right, y down, z forward (right-handed). A point projects to
  pixel coordinates u = f * x / z + W/2, v = f * y / z + H/2 with
  f = (W/2) / tan(fov/2); pixel (row, col) has its center at (col+0.5, row+0.5).
* World covariance R diag(s^2) R^T is pushed through the view rotation and the
  perspective Jacobian (Sigma' = J W Sigma W^T J^T) and dilated by 0.3 px on the
  diagonal. Compositing is front-to-back with a transmittance early-out; depth
  order is treated as locally constant by the backward pass, so ties in depth
  are a known gradient discontinuity (they are broken deterministically by
  splat index).

The backward pass is fully analytic for all five parameter groups and is
validated against central finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, RenderError
from .splats import SplatCloud, SplatGradients, sigmoid

# diagonal dilation of the projected covariance, in squared pixels
COV2D_DILATION = 0.3


@dataclass(frozen=True)
class CameraPose:
    """Spherical pose around a look-at point, plus image geometry."""

    radius: float
    azimuth_deg: float
    elevation_deg: float
    fov: float
    width: int
    height: int
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def camera_center(self) -> np.ndarray:
        theta = math.radians(self.elevation_deg)
        phi = math.radians(self.azimuth_deg)
        direction = np.array([
            math.sin(theta) * math.sin(phi),
            math.cos(theta),
            math.sin(theta) * math.cos(phi),
        ])
        return np.asarray(self.look_at, dtype=np.float64) + self.radius * direction

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera axes (x right, y down, z forward)."""
        center = self.camera_center
        forward = np.asarray(self.look_at, dtype=np.float64) - center
        forward /= np.linalg.norm(forward)
        up = np.array([0.0, 1.0, 0.0])
        if abs(forward @ up) > 0.999999:  # looking straight along +y
            up = np.array([0.0, 0.0, 1.0])
        x_cam = np.cross(forward, up)
        x_cam /= np.linalg.norm(x_cam)
        y_cam = np.cross(forward, x_cam)
        return np.stack([x_cam, y_cam, forward])

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(0.5 * self.fov)

    @property
    def principal(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height


def pose_from_spherical(radius: float, azimuth_deg: float, elevation_deg: float,
                        fov: float, width: int, height: int,
                        look_at=(0.0, 0.0, 0.0)) -> CameraPose:
    """Validated constructor for :class:`CameraPose`."""
    if not radius > 0.0:
        raise ConfigError("camera radius must be positive", radius=radius)
    if not -180.0 <= azimuth_deg <= 180.0:
        raise ConfigError("azimuth outside [-180, 180]", azimuth=azimuth_deg)
    if not 0.0 <= elevation_deg <= 180.0:
        raise ConfigError("elevation outside [0, 180]", elevation=elevation_deg)
    if not 0.0 < fov < math.pi:
        raise ConfigError("fov must lie in (0, pi) radians", fov=fov)
    if width <= 0 or height <= 0:
        raise ConfigError("image size must be positive", width=width, height=height)
    return CameraPose(
        radius=float(radius), azimuth_deg=float(azimuth_deg),
        elevation_deg=float(elevation_deg), fov=float(fov),
        width=int(width), height=int(height),
        look_at=tuple(float(v) for v in look_at),
    )


def camera_space(pose: CameraPose, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return (pts - pose.camera_center) @ pose.rotation.T


def project_points(pose: CameraPose, points: np.ndarray):
    """Project world points; returns (pixel coords (M, 2), camera depth (M,))."""
    cam = camera_space(pose, points)
    depth = cam[:, 2]
    f = pose.focal
    cx, cy = pose.principal
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([
            f * cam[:, 0] / depth + cx,
            f * cam[:, 1] / depth + cy,
        ], axis=1)
    return uv, depth


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (M, 4), scalar first, to rotation matrices (M, 3, 3)."""
    r, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - r * z)
    m[:, 0, 2] = 2 * (x * z + r * y)
    m[:, 1, 0] = 2 * (x * y + r * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - r * x)
    m[:, 2, 0] = 2 * (x * z - r * y)
    m[:, 2, 1] = 2 * (y * z + r * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


@dataclass
class RenderCache:
    """Everything the backward pass needs, in depth-sorted order."""

    pose: CameraPose
    rows: np.ndarray          # cloud row per sorted splat
    n_cloud: int
    t_cam: np.ndarray         # (M, 3)
    center: np.ndarray        # (M, 2)
    conic: np.ndarray         # (M, 3) upper-triangular of inverse 2D covariance
    cov3_cam: np.ndarray      # (M, 3, 3) covariance in camera frame
    rot_mats: np.ndarray      # (M, 3, 3)
    quats_unit: np.ndarray    # (M, 4)
    quat_norms: np.ndarray    # (M,)
    scales_sq: np.ndarray     # (M, 3)
    colors: np.ndarray        # (M, 3)
    alpha0: np.ndarray        # (M,) sigmoid opacities
    offsets: np.ndarray
    entries: np.ndarray
    visible: np.ndarray       # (M,) touched at least one tile
    final_t: np.ndarray
    nproc: np.ndarray
    background: np.ndarray
    power_cutoff: float
    alpha_max: float


@dataclass
class RenderResult:
    rgb: np.ndarray           # (H, W, 3)
    alpha: np.ndarray         # (H, W) accumulated splat coverage
    cache: RenderCache


def _select_rows(cloud: SplatCloud, region: str) -> np.ndarray:
    if region == "all":
        return np.arange(cloud.n, dtype=np.int64)
    if region == "face":
        return np.where(cloud.face_mask)[0]
    raise ConfigError("unknown render region", region=region)


def _check_finite(cloud: SplatCloud, rows: np.ndarray) -> None:
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors"):
        arr = getattr(cloud, name)[rows]
        bad = ~np.isfinite(arr)
        if bad.any():
            local = int(np.argwhere(bad.reshape(arr.shape[0], -1).any(axis=1))[0, 0])
            raise RenderError(
                f"non-finite {name} at splat {int(rows[local])}",
                field=name, splat=int(rows[local]),
            )


def render(cloud: SplatCloud, pose: CameraPose, *, region: str = "all",
           background=(1.0, 1.0, 1.0), power_cutoff: float = 12.0,
           early_stop: float = 1e-4, alpha_max: float = 0.99,
           near: float = 0.01) -> RenderResult:
    """Rasterize the cloud; deterministic for identical inputs on one platform."""
    if not isinstance(pose, CameraPose):
        raise ConfigError("pose must be a CameraPose")
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    rows = _select_rows(cloud, region)
    _check_finite(cloud, rows)

    w, h = pose.width, pose.height
    empty = RenderCache(
        pose=pose, rows=rows[:0], n_cloud=cloud.n,
        t_cam=np.zeros((0, 3)), center=np.zeros((0, 2)), conic=np.zeros((0, 3)),
        cov3_cam=np.zeros((0, 3, 3)), rot_mats=np.zeros((0, 3, 3)),
        quats_unit=np.zeros((0, 4)), quat_norms=np.zeros(0),
        scales_sq=np.zeros((0, 3)), colors=np.zeros((0, 3)), alpha0=np.zeros(0),
        offsets=np.zeros(1, np.int64), entries=np.zeros(0, np.int64),
        visible=np.zeros(0, dtype=bool),
        final_t=np.ones((h, w)), nproc=np.zeros((h, w), np.int64),
        background=bg, power_cutoff=float(power_cutoff), alpha_max=float(alpha_max),
    )
    if rows.size == 0:
        rgb = np.broadcast_to(bg, (h, w, 3)).copy()
        return RenderResult(rgb=rgb, alpha=np.zeros((h, w)), cache=empty)

    t_cam = camera_space(pose, cloud.positions[rows])
    infront = t_cam[:, 2] > near
    rows = rows[infront]
    t_cam = t_cam[infront]
    if rows.size == 0:
        rgb = np.broadcast_to(bg, (h, w, 3)).copy()
        return RenderResult(rgb=rgb, alpha=np.zeros((h, w)), cache=empty)

    order = np.argsort(t_cam[:, 2], kind="stable")
    rows = rows[order]
    t_cam = t_cam[order]

    quats = cloud.rotations[rows]
    norms = np.linalg.norm(quats, axis=1)
    if np.any(norms < 1e-12):
        raise RenderError(
            "zero-norm quaternion", splat=int(rows[int(np.argmin(norms))]))
    q_unit = quats / norms[:, None]
    rot = quat_to_rotmat(q_unit)
    s2 = np.exp(2.0 * cloud.log_scales[rows])
    cov3 = np.einsum("mik,mk,mjk->mij", rot, s2, rot)
    w_rot = pose.rotation
    cov3_cam = np.einsum("ab,mbc,dc->mad", w_rot, cov3, w_rot)
    if not np.isfinite(cov3_cam).all():
        bad = int(np.argwhere(~np.isfinite(cov3_cam).reshape(rows.size, -1).all(axis=1))[0, 0])
        raise RenderError("non-finite covariance (scale overflow)", splat=int(rows[bad]))

    f = pose.focal
    tz = t_cam[:, 2]
    jac = np.zeros((rows.size, 2, 3))
    jac[:, 0, 0] = f / tz
    jac[:, 0, 2] = -f * t_cam[:, 0] / tz ** 2
    jac[:, 1, 1] = f / tz
    jac[:, 1, 2] = -f * t_cam[:, 1] / tz ** 2
    cov2 = np.einsum("mab,mbc,mdc->mad", jac, cov3_cam, jac)
    cov2[:, 0, 0] += COV2D_DILATION
    cov2[:, 1, 1] += COV2D_DILATION

    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = np.sqrt(2.0 * power_cutoff * lam_max)

    cx, cy = pose.principal
    center = np.stack([
        f * t_cam[:, 0] / tz + cx,
        f * t_cam[:, 1] / tz + cy,
    ], axis=1)
    colors = cloud.colors[rows]
    alpha0 = sigmoid(cloud.opacity_logits[rows])

    offsets, entries, touched = _kernels.bin_splats(center, radius, w, h)
    rgb, accum, final_t, nproc = _kernels.splat_forward(
        center, conic, colors, alpha0, offsets, entries,
        w, h, bg, float(early_stop), float(power_cutoff), float(alpha_max))

    cache = RenderCache(
        pose=pose, rows=rows, n_cloud=cloud.n, t_cam=t_cam, center=center,
        conic=conic, cov3_cam=cov3_cam, rot_mats=rot, quats_unit=q_unit,
        quat_norms=norms, scales_sq=s2, colors=colors, alpha0=alpha0,
        offsets=offsets, entries=entries, visible=touched > 0,
        final_t=final_t, nproc=nproc, background=bg,
        power_cutoff=float(power_cutoff), alpha_max=float(alpha_max),
    )
    return RenderResult(rgb=rgb, alpha=accum, cache=cache)


def render_backward(cache: RenderCache, grad_rgb: np.ndarray) -> SplatGradients:
    """Analytic gradients of a scalar loss through :func:`render`.

    ``grad_rgb`` is dL/d(pixel) with the image's shape. Depth order and the
    early-out stop index are treated as locally constant.
    """
    out = SplatGradients.zeros(cache.n_cloud)
    m = cache.rows.size
    grad_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64)
    pose = cache.pose
    if grad_rgb.shape != (pose.height, pose.width, 3):
        raise RenderError(
            "gradient image shape mismatch",
            expected=[pose.height, pose.width, 3], actual=list(grad_rgb.shape),
        )
    if m == 0:
        return out

    gdata = _kernels.splat_backward(
        cache.center, cache.conic, cache.colors, cache.alpha0,
        cache.offsets, cache.entries, pose.width, pose.height,
        cache.background, cache.power_cutoff, cache.alpha_max,
        cache.final_t, cache.nproc, grad_rgb)
    g9 = np.zeros((m, 9))
    np.add.at(g9, cache.entries, gdata)

    g_center = g9[:, 0:2]
    g_color = g9[:, 5:8]
    g_alpha0 = g9[:, 8]

    # conic -> dilated 2D covariance (inverse of a symmetric 2x2)
    qm = np.empty((m, 2, 2))
    qm[:, 0, 0] = cache.conic[:, 0]
    qm[:, 0, 1] = qm[:, 1, 0] = cache.conic[:, 1]
    qm[:, 1, 1] = cache.conic[:, 2]
    gq = np.empty((m, 2, 2))
    gq[:, 0, 0] = g9[:, 2]
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * g9[:, 3]
    gq[:, 1, 1] = g9[:, 4]
    g_cov2 = -np.einsum("mab,mbc,mcd->mad", qm, gq, qm)

    # 2D covariance -> camera covariance and Jacobian
    f = pose.focal
    t = cache.t_cam
    tz = t[:, 2]
    jac = np.zeros((m, 2, 3))
    jac[:, 0, 0] = f / tz
    jac[:, 0, 2] = -f * t[:, 0] / tz ** 2
    jac[:, 1, 1] = f / tz
    jac[:, 1, 2] = -f * t[:, 1] / tz ** 2
    g_cov3_cam = np.einsum("mba,mbc,mcd->mad", jac, g_cov2, jac)
    g_jac = 2.0 * np.einsum("mab,mbc,mcd->mad", g_cov2, jac, cache.cov3_cam)

    # camera-space mean: projection center plus the Jacobian's own dependence
    g_t = np.zeros((m, 3))
    g_t[:, 0] = g_center[:, 0] * f / tz + g_jac[:, 0, 2] * (-f / tz ** 2)
    g_t[:, 1] = g_center[:, 1] * f / tz + g_jac[:, 1, 2] * (-f / tz ** 2)
    g_t[:, 2] = (
        g_center[:, 0] * (-f * t[:, 0] / tz ** 2)
        + g_center[:, 1] * (-f * t[:, 1] / tz ** 2)
        + g_jac[:, 0, 0] * (-f / tz ** 2)
        + g_jac[:, 1, 1] * (-f / tz ** 2)
        + g_jac[:, 0, 2] * (2.0 * f * t[:, 0] / tz ** 3)
        + g_jac[:, 1, 2] * (2.0 * f * t[:, 1] / tz ** 3)
    )
    g_pos = g_t @ pose.rotation

    # camera covariance -> world covariance -> rotation + log scales
    w_rot = pose.rotation
    g_cov3 = np.einsum("ba,mbc,cd->mad", w_rot, g_cov3_cam, w_rot)
    rot = cache.rot_mats
    s2 = cache.scales_sq
    g_rot = 2.0 * np.einsum("mab,mbc,mc->mac", g_cov3, rot, s2)
    g_logs = 2.0 * s2 * np.einsum("mik,mij,mjk->mk", rot, g_cov3, rot)

    # rotation matrix -> unit quaternion -> raw quaternion
    qr, qx, qy, qz = (cache.quats_unit[:, i] for i in range(4))
    g = g_rot
    g_qhat = np.stack([
        2 * (qz * (g[:, 1, 0] - g[:, 0, 1]) + qy * (g[:, 0, 2] - g[:, 2, 0])
             + qx * (g[:, 2, 1] - g[:, 1, 2])),
        2 * (qy * (g[:, 0, 1] + g[:, 1, 0]) + qz * (g[:, 0, 2] + g[:, 2, 0])
             + qr * (g[:, 2, 1] - g[:, 1, 2]) - 2 * qx * (g[:, 1, 1] + g[:, 2, 2])),
        2 * (qx * (g[:, 0, 1] + g[:, 1, 0]) + qz * (g[:, 1, 2] + g[:, 2, 1])
             + qr * (g[:, 0, 2] - g[:, 2, 0]) - 2 * qy * (g[:, 0, 0] + g[:, 2, 2])),
        2 * (qx * (g[:, 0, 2] + g[:, 2, 0]) + qy * (g[:, 1, 2] + g[:, 2, 1])
             + qr * (g[:, 1, 0] - g[:, 0, 1]) - 2 * qz * (g[:, 0, 0] + g[:, 1, 1])),
    ], axis=1)
    qhat = cache.quats_unit
    g_quat = (g_qhat - qhat * np.sum(qhat * g_qhat, axis=1, keepdims=True)) \
        / cache.quat_norms[:, None]

    g_logit = g_alpha0 * cache.alpha0 * (1.0 - cache.alpha0)

    rows = cache.rows
    out.positions[rows] = g_pos
    out.rotations[rows] = g_quat
    out.log_scales[rows] = g_logs
    out.opacity_logits[rows] = g_logit
    out.colors[rows] = g_color
    out.screen_grad_norm[rows] = np.hypot(
        g_center[:, 0] * 0.5 * pose.width, g_center[:, 1] * 0.5 * pose.height)
    out.visible[rows] = cache.visible
    return out
