"""TV-L1 optical flow and one-step flow extrapolation.

The solver is the classic duality-based scheme: a coarse-to-fine pyramid,
several linearizations ("warps") per level, and per warp a fixed number of
alternations between a pointwise thresholding step on the linearized
brightness residual and a projected dual ascent on the flow gradient.

Flow convention: ``tvl1_flow(I0, I1)`` returns ``f`` with
``I1(x + f(x)) ~ I0(x)``, i.e. the displacement of content from I0 to I1,
with ``f.u`` along columns and ``f.v`` along rows.  :func:`warp` moves an
image forward along such a field, ``out(x) = I(x - f(x))``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# Intensities in [0, 1] are stretched to the 8-bit range inside the solver so
# that the attachment weight keeps its customary magnitude.
INTENSITY_SCALE = 255.0
MIN_LEVEL_SIZE = 4
_GRAD_IS_ZERO = 1e-10


@dataclass
class FlowParams:
    lam: float = 0.15
    theta: float = 0.3
    tau: float = 0.25
    n_scales: int = 5
    scale_factor: float = 0.5
    n_warps: int = 5
    n_inner_iters: int = 30
    median_filter: bool = True

    def __post_init__(self):
        if not 0 < self.tau <= 0.25:
            raise ValueError(f"tau must be in (0, 0.25], got {self.tau}")
        if not 0 < self.scale_factor < 1:
            raise ValueError(f"scale_factor must be in (0, 1), got {self.scale_factor}")
        if min(self.n_scales, self.n_warps, self.n_inner_iters) < 1:
            raise ValueError("n_scales, n_warps and n_inner_iters must be >= 1")
        if self.lam < 0 or self.theta <= 0:
            raise ValueError("lam must be >= 0 and theta > 0")


@dataclass
class FlowField:
    u: np.ndarray  # column displacement, px per step
    v: np.ndarray  # row displacement, px per step

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def stack(self) -> np.ndarray:
        return np.stack([self.u, self.v])


def _check_raster(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 2:
        raise ValueError(f"{name} must be a 2D raster with H, W >= 2, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def _sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear sampling at fractional positions, border values outside."""
    return ndimage.map_coordinates(img, [rows, cols], order=1, mode="nearest")


def warp(img: np.ndarray, flow: FlowField) -> np.ndarray:
    """Advect ``img`` along ``flow``: out(x) = img(x - flow(x))."""
    img = _check_raster(img, "img")
    if flow.shape != img.shape:
        raise ValueError(f"flow shape {flow.shape} != image shape {img.shape}")
    rows, cols = np.indices(img.shape, dtype=np.float64)
    return _sample(img, rows - flow.v, cols - flow.u)


def _central_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(img, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def _forward_gradient(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`_forward_gradient`."""
    div = np.zeros_like(px)
    div[:, 0] = px[:, 0]
    div[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    div[:, -1] = -px[:, -2]
    div[0, :] += py[0, :]
    div[1:-1, :] += py[1:-1, :] - py[:-2, :]
    div[-1, :] -= py[-2, :]
    return div


def _resize(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling onto ``shape`` with pixel-center alignment."""
    h, w = img.shape
    rows = (np.arange(shape[0]) + 0.5) * h / shape[0] - 0.5
    cols = (np.arange(shape[1]) + 0.5) * w / shape[1] - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return _sample(img, rr, cc)


def _zoom_out(img: np.ndarray, factor: float, shape: tuple[int, int]) -> np.ndarray:
    sigma = 0.6 * np.sqrt(1.0 / factor ** 2 - 1.0)
    return _resize(ndimage.gaussian_filter(img, sigma, mode="nearest"), shape)


def pyramid_shapes(shape: tuple[int, int], p: FlowParams) -> list[tuple[int, int]]:
    shapes = [shape]
    for _ in range(1, p.n_scales):
        h, w = shapes[-1]
        nxt = (int(h * p.scale_factor + 0.5), int(w * p.scale_factor + 0.5))
        if min(nxt) < MIN_LEVEL_SIZE:
            warnings.warn(
                f"pyramid truncated to {len(shapes)} scales: level {nxt} below "
                f"{MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}",
                stacklevel=3,
            )
            break
        shapes.append(nxt)
    return shapes


def _solve_level(i0, i1, u1, u2, p: FlowParams):
    """Warps and primal-dual iterations on one pyramid level (in place on u)."""
    lt = p.lam * p.theta
    step = p.tau / p.theta
    p11 = np.zeros_like(u1)
    p12 = np.zeros_like(u1)
    p21 = np.zeros_like(u1)
    p22 = np.zeros_like(u1)
    i1x, i1y = _central_gradient(i1)
    rows, cols = np.indices(i0.shape, dtype=np.float64)

    for _ in range(p.n_warps):
        rr, cc = rows + u2, cols + u1
        i1w = _sample(i1, rr, cc)
        i1wx = _sample(i1x, rr, cc)
        i1wy = _sample(i1y, rr, cc)
        grad = i1wx * i1wx + i1wy * i1wy
        rho_c = i1w - i1wx * u1 - i1wy * u2 - i0
        lo = -lt * grad
        hi = lt * grad
        nz = grad > _GRAD_IS_ZERO
        safe = np.where(nz, grad, 1.0)

        for _ in range(p.n_inner_iters):
            rho = rho_c + i1wx * u1 + i1wy * u2
            # thresholding: closed-form minimizer of the pointwise data term
            coef = np.where(rho < lo, lt, np.where(rho > hi, -lt, np.where(nz, -rho / safe, 0.0)))
            v1 = u1 + coef * i1wx
            v2 = u2 + coef * i1wy
            u1 = v1 + p.theta * _divergence(p11, p12)
            u2 = v2 + p.theta * _divergence(p21, p22)
            # dual ascent with reprojection onto the unit ball
            u1x, u1y = _forward_gradient(u1)
            u2x, u2y = _forward_gradient(u2)
            ng1 = 1.0 + step * np.sqrt(u1x * u1x + u1y * u1y)
            ng2 = 1.0 + step * np.sqrt(u2x * u2x + u2y * u2y)
            p11 = (p11 + step * u1x) / ng1
            p12 = (p12 + step * u1y) / ng1
            p21 = (p21 + step * u2x) / ng2
            p22 = (p22 + step * u2y) / ng2

        if p.median_filter:
            u1 = ndimage.median_filter(u1, size=3, mode="nearest")
            u2 = ndimage.median_filter(u2, size=3, mode="nearest")
    return u1, u2


def tvl1_flow(i0: np.ndarray, i1: np.ndarray, params: FlowParams | None = None) -> FlowField:
    """Dense TV-L1 flow from ``i0`` to ``i1`` (both rasters in [0, 1])."""
    p = params or FlowParams()
    i0 = _check_raster(i0, "I0")
    i1 = _check_raster(i1, "I1")
    if i0.shape != i1.shape:
        raise ValueError(f"dimension mismatch: {i0.shape} vs {i1.shape}")
    i0 = i0 * INTENSITY_SCALE
    i1 = i1 * INTENSITY_SCALE

    shapes = pyramid_shapes(i0.shape, p)
    pyr0, pyr1 = [i0], [i1]
    for shape in shapes[1:]:
        pyr0.append(_zoom_out(pyr0[-1], p.scale_factor, shape))
        pyr1.append(_zoom_out(pyr1[-1], p.scale_factor, shape))

    u1 = np.zeros(shapes[-1])
    u2 = np.zeros(shapes[-1])
    for level in range(len(shapes) - 1, -1, -1):
        u1, u2 = _solve_level(pyr0[level], pyr1[level], u1, u2, p)
        if level:
            fine = shapes[level - 1]
            u1 = _resize(u1, fine) * (fine[1] / shapes[level][1])
            u2 = _resize(u2, fine) * (fine[0] / shapes[level][0])
    return FlowField(u=u1, v=u2)


def nowcast_error(i_m30: np.ndarray, i_m15: np.ndarray, i_0: np.ndarray,
                  params: FlowParams | None = None) -> np.ndarray:
    """|flow-extrapolated frame - observed frame| for one 15-minute step."""
    i_0 = _check_raster(i_0, "I_0")
    flow = tvl1_flow(i_m30, i_m15, params)
    if flow.shape != i_0.shape:
        raise ValueError(f"dimension mismatch: {flow.shape} vs {i_0.shape}")
    return np.abs(warp(i_m15, flow) - i_0)
