import numpy as np
import pytest
import torch
from scipy.ndimage import map_coordinates

from mpi_facedit.errors import DomainError, ValidationError
from mpi_facedit.renderer import (
    Camera,
    MultiPlaneImage,
    apply_homography,
    composite,
    homography_stack,
    plane_depths,
    plane_homography,
    render,
    render_batch,
    render_orbit,
)


def _project(cam: Camera, X: np.ndarray) -> np.ndarray:
    """Pinhole projection written out by hand: look down -z, v grows downwards."""
    Xc = X @ cam.rotation.T + cam.translation
    cx, cy = cam.principal_point
    u = cx + cam.focal * Xc[:, 0] / -Xc[:, 2]
    v = cy - cam.focal * Xc[:, 1] / -Xc[:, 2]
    return np.stack([u, v], axis=1)


def _unproject_plane(cam: Camera, uv: np.ndarray, depth: float) -> np.ndarray:
    cx, cy = cam.principal_point
    x = (uv[:, 0] - cx) * depth / cam.focal
    y = -(uv[:, 1] - cy) * depth / cam.focal
    return np.stack([x, y, np.full_like(x, -depth)], axis=1)


def _smooth_image(rng, c, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    out = np.zeros((c, h, w))
    for k in range(c):
        a, b, p = rng.uniform(1, 3, 3)
        out[k] = 0.5 + 0.4 * np.sin(a * 2 * xx + b * 2 * yy + p)
    return out


def test_plane_depths_inverse_uniform():
    d = plane_depths(5, 1.0, 2.0)
    inv = 1.0 / d
    assert d[0] == pytest.approx(1.0) and d[-1] == pytest.approx(2.0)
    assert np.allclose(np.diff(inv), np.diff(inv)[0])


@pytest.mark.parametrize("depth", [0.5, 1.0, 3.7])
def test_reference_homography_identity(depth):
    h = plane_homography(Camera.reference(32), depth)
    assert np.abs(h - np.eye(3)).max() < 1e-12


@pytest.mark.parametrize("depth", [0.0, -1.0])
def test_homography_rejects_nonpositive_depth(depth):
    with pytest.raises(DomainError):
        plane_homography(Camera.reference(8), depth)


@pytest.mark.parametrize("delta,d", [(0.2, 1.0), (-0.5, 1.5), (0.9, 2.0)])
def test_z_translation_scales_about_principal_point(delta, d):
    ref = Camera.reference(32)
    cx, cy = ref.principal_point
    # camera centre moved to z = -delta, towards the planes
    cam = Camera(ref.focal, ref.principal_point, np.eye(3), np.array([0.0, 0.0, delta]))
    h = plane_homography(cam, d, ref)
    h = h / h[2, 2]
    s = d / (d - delta)
    expect = np.array([[s, 0, cx * (1 - s)], [0, s, cy * (1 - s)], [0, 0, 1.0]])
    assert np.abs(h - expect).max() < 1e-9


@pytest.mark.parametrize("yaw,pitch", [(5.0, 0.0), (-12.0, 4.0), (30.0, -8.0)])
def test_homography_matches_point_transport(yaw, pitch):
    ref = Camera.reference(32)
    cam = Camera.orbit(yaw, pitch, 1.4, 32)
    corners = np.array([[0.0, 0.0], [32.0, 0.0], [0.0, 32.0], [32.0, 32.0], [11.3, 20.9]])
    for d in (1.0, 1.4, 2.0):
        expect = _project(cam, _unproject_plane(ref, corners, d))
        got = apply_homography(plane_homography(cam, d, ref), corners)
        assert np.abs(got - expect).max() < 1e-9


def test_orbit_camera_keeps_pivot_centred():
    cam = Camera.orbit(25.0, -6.0, 1.5, 32)
    uv = _project(cam, np.array([[0.0, 0.0, -1.5]]))
    assert np.allclose(uv, [[16.0, 16.0]], atol=1e-12)
    assert np.linalg.norm(cam.center - np.array([0, 0, -1.5])) == pytest.approx(1.5)
    assert cam.center[0] > 0  # positive yaw moves right


def test_camera_rejects_bad_rotation():
    with pytest.raises(ValidationError):
        Camera(10.0, (4, 4), np.diag([1.0, 1.0, -1.0]))


def _mpi(color, alphas, depths, focal=10.0):
    return MultiPlaneImage(torch.as_tensor(color), torch.as_tensor(alphas), np.asarray(depths), focal)


def test_single_opaque_plane_returns_colour_exactly():
    rng = np.random.default_rng(0)
    c = rng.uniform(size=(3, 6, 6))
    view = render(_mpi(c, np.ones((1, 6, 6)), [1.0]), Camera(10.0, (3.0, 3.0)))
    assert torch.equal(view.rgb, torch.as_tensor(c))
    assert torch.equal(view.accumulated_alpha, torch.ones(6, 6, dtype=torch.float64))


def test_two_plane_over():
    cf, cb = np.full((3, 4, 4), 0.2), np.full((3, 4, 4), 0.8)
    out = composite(
        torch.as_tensor(np.stack([cf, cb])), torch.as_tensor(np.stack([np.full((4, 4), 0.5), np.ones((4, 4))])),
        torch.tensor([1.0, 2.0], dtype=torch.float64),
    )
    assert torch.allclose(out.rgb, torch.full((3, 4, 4), 0.5, dtype=torch.float64), atol=1e-15)
    assert torch.allclose(out.depth, torch.full((4, 4), 1.5, dtype=torch.float64), atol=1e-15)


def test_depth_falls_back_to_far_when_empty():
    out = composite(torch.rand(2, 3, 2, 2), torch.zeros(2, 2, 2), torch.tensor([1.0, 2.0]))
    assert torch.equal(out.depth, torch.full((2, 2), 2.0))
    assert torch.equal(out.rgb, torch.zeros(3, 2, 2))


def _back_to_front(colors, alphas, bg):
    out = np.broadcast_to(bg, colors.shape[-3:]).copy()
    for i in range(colors.shape[-4] - 1, -1, -1):
        a = np.expand_dims(alphas[..., i, :, :], -3)
        out = colors[..., i, :, :, :] * a + (1.0 - a) * out
    return out


def test_compositing_invariants_1000_random_mpis():
    rng = np.random.default_rng(1)
    n, N, h, w = 1000, 5, 6, 6
    colors = rng.uniform(size=(n, N, 3, h, w))
    alphas = rng.uniform(size=(n, N, h, w)) ** 2
    depths = torch.as_tensor(plane_depths(N, 1.0, 2.0))
    bg = np.array([0.1, 0.4, 0.9])
    out = composite(torch.as_tensor(colors), torch.as_tensor(alphas), depths, bg.tolist())
    rgb, acc, dep = out.rgb.numpy(), out.accumulated_alpha.numpy(), out.depth.numpy()
    # bounds
    assert acc.min() >= 0 and acc.max() <= 1 + 1e-12
    assert rgb.min() >= 0 and rgb.max() <= 1 + 1e-12
    bound = acc[:, None] + (1 - acc[:, None]) * bg[None, :, None, None]
    assert np.all(rgb <= bound + 1e-12)
    assert dep.min() >= 1.0 and dep.max() <= 2.0
    # premultiplied back-to-front oracle
    assert np.abs(rgb - _back_to_front(colors, alphas, bg[:, None, None])).max() < 1e-6
    # occlusion: an opaque plane hides everything behind it exactly
    k = rng.integers(0, N - 1, size=n)
    a2 = alphas.copy()
    a2[np.arange(n), k] = 1.0
    c3, a3 = colors.copy(), a2.copy()
    for i in range(n):
        c3[i, k[i] + 1 :] = rng.uniform(size=c3[i, k[i] + 1 :].shape)
        a3[i, k[i] + 1 :] = rng.uniform(size=a3[i, k[i] + 1 :].shape)
    o2 = composite(torch.as_tensor(colors), torch.as_tensor(a2), depths)
    o3 = composite(torch.as_tensor(c3), torch.as_tensor(a3), depths)
    assert torch.equal(o2.rgb, o3.rgb)
    assert torch.equal(o2.depth, o3.depth)


def _oracle_warp(img: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """out(p) = img(H^-1 p), bilinear via scipy, pixel centres at i + 0.5.

    Also returns where the sample lies at least one pixel inside the source.
    """
    c, H, W = img.shape
    v, u = np.mgrid[0:H, 0:W] + 0.5
    pts = np.stack([u.ravel(), v.ravel()], axis=1)
    src = apply_homography(np.linalg.inv(h), pts) - 0.5
    out = np.stack([map_coordinates(img[k], [src[:, 1], src[:, 0]], order=1, mode="constant").reshape(H, W) for k in range(c)])
    inside = (src[:, 0] >= 1) & (src[:, 0] <= W - 2) & (src[:, 1] >= 1) & (src[:, 1] <= H - 2)
    return out, inside.reshape(H, W)


@pytest.mark.parametrize("yaw", [5.0, -15.0, 25.0])
def test_single_plane_render_equals_warp_of_frontal(yaw):
    rng = np.random.default_rng(2)
    size = 32
    color = _smooth_image(rng, 3, size, size)
    mpi = _mpi(color, np.ones((1, size, size)), [1.5], focal=40.0)
    frontal = render(mpi, mpi.reference_camera()).rgb.numpy()
    cam = Camera.orbit(yaw, 0.0, 1.5, size, 40.0)
    yawed = render(mpi, cam).rgb.numpy()
    expect, inside = _oracle_warp(frontal, plane_homography(cam, 1.5, mpi.reference_camera()))
    assert inside.mean() > 0.6
    assert np.abs(yawed - expect)[:, inside].max() < 2 / 255


def test_resolution_equivariance():
    rng = np.random.default_rng(3)
    size, N = 16, 4
    color = _smooth_image(rng, 3, size, size)
    alphas = np.stack([_smooth_image(rng, 1, size, size)[0] for _ in range(N)])
    depths = plane_depths(N, 1.0, 2.0)
    mpi = _mpi(color, alphas, depths, focal=20.0)
    cam = Camera.orbit(6.0, 2.0, depths[N // 2], size, 20.0)
    native = render(mpi, cam).rgb.numpy()
    big = render(mpi, cam.scaled(2.0), out_shape=(2 * size, 2 * size)).rgb.numpy()
    down = big.reshape(3, size, 2, size, 2).mean(axis=(2, 4))
    inner = (slice(None), slice(2, -2), slice(2, -2))
    assert np.abs(down[inner] - native[inner]).max() < 4 / 255


def test_render_batch_identity_fast_path_matches_warp_path():
    rng = np.random.default_rng(4)
    color = torch.as_tensor(rng.uniform(size=(2, 3, 8, 8)))
    alphas = torch.as_tensor(rng.uniform(size=(2, 3, 8, 8)))
    depths = plane_depths(3, 1.0, 2.0)
    eye = torch.eye(3, dtype=torch.float64).expand(2, 3, 3, 3)
    fast = render_batch(color, alphas, depths, eye).rgb
    # a homography equal to the identity up to scale takes the sampling path
    slow = render_batch(color, alphas, depths, 2.0 * eye).rgb
    assert torch.allclose(fast, slow, atol=1e-12)


def _random_mpi(seed=5, size=16, N=4):
    rng = np.random.default_rng(seed)
    return _mpi(_smooth_image(rng, 3, size, size), rng.uniform(0.2, 0.8, (N, size, size)), plane_depths(N, 1.0, 2.0), 20.0)


def test_orbit_single_view_is_reference():
    mpi = _random_mpi()
    (view,) = render_orbit(mpi, 1)
    assert torch.equal(view.rgb, render(mpi, mpi.reference_camera()).rgb)


def test_orbit_zero_range_identical():
    views = render_orbit(_random_mpi(), 3, yaw_range=0.0)
    assert torch.equal(views[0].rgb, views[1].rgb) and torch.equal(views[1].rgb, views[2].rgb)


def test_orbit_difference_grows_with_gap():
    views = [v.rgb.numpy() for v in render_orbit(_random_mpi(), 9, yaw_range=60.0)]
    assert all(np.abs(views[i] - views[i + 1]).mean() > 0 for i in range(8))
    by_gap = [np.mean([np.abs(views[i] - views[i + g]).mean() for i in range(9 - g)]) for g in range(1, 9)]
    assert all(a < b for a, b in zip(by_gap, by_gap[1:]))


def test_orbit_rejects_zero_views():
    with pytest.raises(ValidationError):
        render_orbit(_random_mpi(), 0)


def test_homography_stack_shape():
    cams = [Camera.orbit(y, 0, 1.5, 8) for y in (-5, 0, 5)]
    hs = homography_stack(cams, plane_depths(4, 1, 2), Camera.reference(8))
    assert hs.shape == (3, 4, 3, 3)
    assert np.abs(hs[1] - np.eye(3)).max() < 1e-12


def test_mpi_validation():
    with pytest.raises(ValidationError):
        _mpi(np.zeros((3, 2, 2)), np.zeros((2, 2, 2)), [2.0, 1.0])
    mpi = _mpi(np.full((3, 2, 2), 1.5), np.zeros((1, 2, 2)), [1.0])
    with pytest.raises(ValidationError):
        mpi.check()
