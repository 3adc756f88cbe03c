"""Multi-plane image rendering: plane homographies, warping and compositing.

Camera convention: right-handed, the camera looks down ``-z`` with ``+y`` up.
The reference camera sits at the origin with identity rotation and the MPI
planes are the planes ``z = -depth``. Pixel coordinates are continuous with
pixel centres at ``i + 0.5`` and ``v`` pointing down the image. A camera's
extrinsics map reference (world) points into its own frame::

    X_cam = rotation @ X_ref + translation

Tensors are channel-first: an MPI colour image is ``(..., 3, H, W)`` and the
alpha stack ``(..., N, H, W)``, planes ordered front (index 0) to back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError, ShapeError, ValidationError

FOCAL_FACTOR = 1.25
PLANE_NORMAL = np.array([0.0, 0.0, 1.0])


def default_focal(image_size: int) -> float:
    return FOCAL_FACTOR * float(image_size)


def plane_depths(n_planes: int, d_near: float, d_far: float) -> np.ndarray:
    """Depths spaced uniformly in inverse depth, nearest first."""
    if n_planes < 2:
        raise ValidationError(f"need at least 2 planes, got {n_planes}")
    if not 0.0 < d_near < d_far:
        raise ValidationError(f"need 0 < d_near < d_far, got {d_near}, {d_far}")
    disparity = np.linspace(1.0 / d_near, 1.0 / d_far, n_planes)
    return 1.0 / disparity


def _rot_y(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid pose relative to the MPI reference frame."""

    focal: float
    principal_point: tuple[float, float]
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ShapeError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t)) and np.isfinite(self.focal)):
            raise ValidationError("camera parameters must be finite")
        if self.focal <= 0:
            raise ValidationError(f"focal must be positive, got {self.focal}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValidationError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    @property
    def intrinsics(self) -> np.ndarray:
        """Matrix taking camera-frame points to homogeneous pixels.

        The ``-1`` entries fold the look-down-``-z``/``v``-down flips into K,
        so ``K @ X`` has a positive last coordinate for visible points.
        """
        cx, cy = self.principal_point
        return np.array([[self.focal, 0.0, -cx], [0.0, -self.focal, -cy], [0.0, 0.0, -1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def reference(cls, image_size: int, focal: float | None = None) -> "Camera":
        f = default_focal(image_size) if focal is None else focal
        return cls(f, (image_size / 2.0, image_size / 2.0))

    @classmethod
    def orbit(
        cls,
        yaw: float,
        pitch: float,
        pivot_depth: float,
        image_size: int,
        focal: float | None = None,
    ) -> "Camera":
        """Camera rotated by ``yaw``/``pitch`` degrees about a point on the optical axis.

        The camera keeps its distance ``pivot_depth`` to the pivot
        ``(0, 0, -pivot_depth)`` and keeps looking at it. Positive yaw moves
        the camera towards ``+x``; positive pitch moves it towards ``+y``.
        """
        f = default_focal(image_size) if focal is None else focal
        c2w = _rot_y(yaw) @ _rot_x(-pitch)
        pivot = np.array([0.0, 0.0, -pivot_depth])
        center = pivot + c2w @ np.array([0.0, 0.0, pivot_depth])
        rot = c2w.T
        return cls(f, (image_size / 2.0, image_size / 2.0), rot, -rot @ center)

    def scaled(self, factor: float) -> "Camera":
        """Same pose, intrinsics for an image ``factor`` times larger."""
        cx, cy = self.principal_point
        return Camera(self.focal * factor, (cx * factor, cy * factor), self.rotation, self.translation)


def plane_homography(cam: Camera, depth: float, ref: Camera | None = None) -> np.ndarray:
    """Homography taking reference pixels to ``cam`` pixels for the plane at ``depth``.

    ``H = K_cam (R - t n^T / depth) K_ref^-1`` with ``n = (0, 0, 1)``. ``ref``
    supplies the reference intrinsics (its pose is ignored) and defaults to
    ``cam``'s own intrinsics.
    """
    if not depth > 0:
        raise DomainError(f"plane depth must be positive, got {depth}")
    k_ref = (cam if ref is None else ref).intrinsics
    m = cam.rotation - np.outer(cam.translation, PLANE_NORMAL) / depth
    return cam.intrinsics @ m @ np.linalg.inv(k_ref)


def apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Map ``(n, 2)`` pixel points through a 3x3 homography."""
    pts = np.concatenate([points, np.ones((points.shape[0], 1))], axis=1) @ h.T
    return pts[:, :2] / pts[:, 2:3]


@dataclass
class MultiPlaneImage:
    """Shared colour image plus one alpha map per fronto-parallel plane.

    ``color`` is ``(..., 3, H, W)`` and ``alphas`` ``(..., N, H, W)``, both in
    [0, 1]; ``depths`` is a strictly increasing ``(N,)`` array, so plane 0 is
    the nearest. ``focal`` is the reference camera's focal length in pixels.
    """

    color: torch.Tensor
    alphas: torch.Tensor
    depths: np.ndarray
    focal: float

    def __post_init__(self) -> None:
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.alphas.shape[-3] != self.depths.shape[0]:
            raise ShapeError(f"{self.alphas.shape[-3]} alpha planes but {self.depths.shape[0]} depths")
        if self.color.shape[-3] != 3 or self.color.shape[-2:] != self.alphas.shape[-2:]:
            raise ShapeError(f"colour {tuple(self.color.shape)} does not match alphas {tuple(self.alphas.shape)}")
        if np.any(np.diff(self.depths) <= 0) or self.depths[0] <= 0:
            raise ValidationError("plane depths must be positive and strictly increasing")

    @property
    def image_size(self) -> tuple[int, int]:
        return int(self.color.shape[-2]), int(self.color.shape[-1])

    @property
    def n_planes(self) -> int:
        return int(self.depths.shape[0])

    def reference_camera(self) -> Camera:
        h, w = self.image_size
        return Camera(self.focal, (w / 2.0, h / 2.0))

    def check(self) -> None:
        """Raise if colour or alpha values leave [0, 1]."""
        for name, t in (("color", self.color), ("alphas", self.alphas)):
            if not torch.isfinite(t).all() or t.min() < 0 or t.max() > 1:
                raise ValidationError(f"MPI {name} outside [0, 1]")


@dataclass
class RenderedView:
    """Render result; ``rgb`` is ``(..., 3, H, W)``, depth and alpha ``(..., H, W)``."""

    rgb: torch.Tensor
    depth: torch.Tensor
    accumulated_alpha: torch.Tensor


def composite(
    colors: torch.Tensor,
    alphas: torch.Tensor,
    depths: torch.Tensor,
    background: float | Sequence[float] = 0.0,
) -> RenderedView:
    """Front-to-back over-compositing of plane colours.

    Args:
        colors: ``(..., N, 3, H, W)`` per-plane colours, plane 0 nearest.
        alphas: ``(..., N, H, W)``.
        depths: ``(N,)`` plane depths.
        background: grey level or RGB triple shown through residual transmittance.
    """
    ones = torch.ones_like(alphas[..., :1, :, :])
    transmittance = torch.cumprod(torch.cat([ones, 1.0 - alphas], dim=-3), dim=-3)
    weights = alphas * transmittance[..., :-1, :, :]
    acc = weights.sum(dim=-3)
    bg = torch.as_tensor(background, dtype=colors.dtype).reshape(-1, 1, 1)
    rgb = (weights.unsqueeze(-3) * colors).sum(dim=-4) + (1.0 - acc).unsqueeze(-3) * bg
    depth_sum = (weights * depths.to(weights).reshape(-1, 1, 1)).sum(dim=-3)
    far = depths[-1].to(weights)
    depth = torch.where(acc > 0, depth_sum / acc.clamp_min(1e-12), far)
    # alpha-weighted mean can round a hair outside the plane range
    depth = depth.clamp(depths[0].to(weights), far)
    return RenderedView(rgb=rgb, depth=depth, accumulated_alpha=acc)


def _pixel_grid(h: int, w: int, dtype: torch.dtype) -> torch.Tensor:
    v, u = torch.meshgrid(
        torch.arange(h, dtype=dtype) + 0.5, torch.arange(w, dtype=dtype) + 0.5, indexing="ij"
    )
    return torch.stack([u, v, torch.ones_like(u)], dim=-1)


def warp(
    images: torch.Tensor,
    homographies: torch.Tensor,
    out_shape: tuple[int, int] | None = None,
) -> torch.Tensor:
    """Inverse-warp images so that ``out(p) = image(H^-1 p)``.

    Args:
        images: ``(B, C, H, W)`` source images in reference pixels.
        homographies: ``(B, 3, 3)`` reference-to-target homographies.
        out_shape: target ``(H, W)``; defaults to the source size.

    Samples are bilinear; anything falling outside the source is zero.
    """
    b, _, h, w = images.shape
    ho, wo = out_shape or (h, w)
    pix = _pixel_grid(ho, wo, images.dtype).reshape(1, -1, 3)
    inv = torch.linalg.inv(homographies.to(images.dtype))
    src = pix @ inv.transpose(1, 2)
    z = src[..., 2:3]
    behind = z <= 0
    xy = src[..., :2] / torch.where(behind, torch.ones_like(z), z)
    grid = torch.stack([2.0 * xy[..., 0] / w - 1.0, 2.0 * xy[..., 1] / h - 1.0], dim=-1)
    grid = torch.where(behind, torch.full_like(grid, 4.0), grid)
    out = F.grid_sample(
        images, grid.reshape(b, ho, wo, 2), mode="bilinear", padding_mode="zeros", align_corners=False
    )
    return out


def homography_stack(cams: Sequence[Camera], depths: np.ndarray, ref: Camera) -> np.ndarray:
    """``(len(cams), N, 3, 3)`` homographies for every camera/plane pair."""
    return np.stack([np.stack([plane_homography(c, d, ref) for d in depths]) for c in cams])


def render_batch(
    color: torch.Tensor,
    alphas: torch.Tensor,
    depths: np.ndarray,
    homographies: torch.Tensor | np.ndarray,
    out_shape: tuple[int, int] | None = None,
    background: float | Sequence[float] = 0.0,
) -> RenderedView:
    """Render a batch of MPIs, each through its own per-plane homographies.

    Args:
        color: ``(B, 3, H, W)``.
        alphas: ``(B, N, H, W)``.
        depths: ``(N,)``.
        homographies: ``(B, N, 3, 3)`` reference-to-target maps.
    """
    b, n, h, w = alphas.shape
    homs = torch.as_tensor(homographies, dtype=color.dtype)
    identity = torch.eye(3, dtype=color.dtype)
    if out_shape in (None, (h, w)) and bool(((homs - identity).abs() <= 1e-12).all()):
        colors = color.unsqueeze(1).expand(b, n, 3, h, w)
        return composite(colors, alphas, torch.as_tensor(depths, dtype=color.dtype), background)
    rgba = torch.cat([color.unsqueeze(1).expand(b, n, 3, h, w), alphas.unsqueeze(2)], dim=2)
    warped = warp(rgba.reshape(b * n, 4, h, w), homs.reshape(b * n, 3, 3), out_shape)
    ho, wo = warped.shape[-2:]
    warped = warped.reshape(b, n, 4, ho, wo)
    return composite(
        warped[:, :, :3], warped[:, :, 3], torch.as_tensor(depths, dtype=color.dtype), background
    )


def render(
    mpi: MultiPlaneImage,
    cam: Camera,
    out_shape: tuple[int, int] | None = None,
    background: float | Sequence[float] = 0.0,
) -> RenderedView:
    """Render an MPI (optionally batched) from ``cam``."""
    ref = mpi.reference_camera()
    homs = torch.as_tensor(homography_stack([cam], mpi.depths, ref)[0], dtype=mpi.color.dtype)
    batched = mpi.color.dim() == 4
    color = mpi.color if batched else mpi.color.unsqueeze(0)
    alphas = mpi.alphas if batched else mpi.alphas.unsqueeze(0)
    view = render_batch(
        color, alphas, mpi.depths, homs.expand(color.shape[0], -1, -1, -1), out_shape, background
    )
    if not batched:
        view = RenderedView(view.rgb[0], view.depth[0], view.accumulated_alpha[0])
    return view


def orbit_cameras(
    n_views: int, yaw_range: float, pivot_depth: float, image_size: int, focal: float | None = None
) -> list[Camera]:
    """Cameras at uniformly spaced yaw in ``[-yaw_range/2, +yaw_range/2]``."""
    if n_views < 1:
        raise ValidationError(f"n_views must be >= 1, got {n_views}")
    yaws = [0.0] if n_views == 1 else np.linspace(-yaw_range / 2.0, yaw_range / 2.0, n_views)
    return [Camera.orbit(float(y), 0.0, pivot_depth, image_size, focal) for y in yaws]


def render_orbit(
    mpi: MultiPlaneImage,
    n_views: int,
    yaw_range: float = 60.0,
    pivot_depth: float | None = None,
    background: float | Sequence[float] = 0.0,
) -> list[RenderedView]:
    """Render views orbiting the MPI at fixed distance from the pivot.

    The pivot defaults to the middle plane of the stack.
    """
    pivot = float(mpi.depths[mpi.n_planes // 2]) if pivot_depth is None else pivot_depth
    size = mpi.image_size[1]
    return [
        render(mpi, cam, background=background)
        for cam in orbit_cameras(n_views, yaw_range, pivot, size, mpi.focal)
    ]
