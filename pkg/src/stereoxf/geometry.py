"""Multi-plane disparity reconstruction, flows, warping, masks and blending.

Conventions: a scene point with disparity d sits at x(u) = x_c - d * u, so
stored view Jacobians are non-negative disparities and the epipolar sign
is applied once, in :func:`view_flow`. Time Jacobians are signed pixel
velocities per unit of normalized time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class PlaneSpec:
    """Uniformly spaced plane anchors d_1 < ... < d_K (pixels)."""

    disparities: tuple[float, ...]

    def __post_init__(self):
        d = np.asarray(self.disparities, dtype=float)
        if d.size < 1:
            raise ValueError("need at least one plane")
        if d.size > 1:
            gaps = np.diff(d)
            if np.any(gaps <= 0) or not np.allclose(gaps, gaps[0]):
                raise ValueError(f"plane anchors must ascend uniformly: {self.disparities}")

    @property
    def gap(self) -> float:
        d = self.disparities
        return float(d[1] - d[0]) if len(d) > 1 else math.inf

    @property
    def count(self) -> int:
        return len(self.disparities)

    @classmethod
    def uniform(cls, n_planes: int, gap: float) -> "PlaneSpec":
        return cls(tuple(float(k * gap) for k in range(n_planes)))

    @classmethod
    def for_max_disparity(cls, max_disparity: float, n_planes: int = 6) -> "PlaneSpec":
        """Default anchors: gap = ceil(max / (K - 1)) rounded up to an even integer."""
        if n_planes == 1:
            return cls((0.0,))
        gap = math.ceil(max_disparity / (n_planes - 1)) if max_disparity > 0 else 2
        gap += gap % 2
        return cls.uniform(n_planes, gap)


# -- plane shifting -------------------------------------------------------------------

@lru_cache(maxsize=256)
def _shift_matrix(width: int, shift: float) -> np.ndarray:
    """Dense (W, W) matrix S with out_row = row @ S.T sampling at x + shift."""
    pos = np.arange(width) + shift
    lo = np.floor(pos)
    frac = pos - lo
    i0 = np.clip(lo, 0, width - 1).astype(int)
    i1 = np.clip(lo + 1, 0, width - 1).astype(int)
    s = np.zeros((width, width), dtype=np.float64)
    rows = np.arange(width)
    np.add.at(s, (rows, i0), 1.0 - frac)
    np.add.at(s, (rows, i1), frac)
    s.setflags(write=False)
    return s


def shift_planes(planes, shifts: Sequence[float]) -> Tensor:
    """Translate channel k of ``planes`` (N, K, H, W) left by ``shifts[k]`` pixels.

    Fractional shifts interpolate linearly between the two nearest columns;
    columns sampled beyond the frame replicate the edge.
    """
    planes = T.as_tensor(planes)
    n, k, h, w = planes.shape
    if len(shifts) != k:
        raise T.ShapeError("shift_planes", (k,), (len(shifts),))
    mats = [_shift_matrix(w, float(s)).astype(planes.dtype) for s in shifts]
    out = np.empty_like(planes.data)
    for j, m in enumerate(mats):
        out[:, j] = planes.data[:, j] @ m.T

    def backward(g):
        gp = np.empty_like(g)
        for j, m in enumerate(mats):
            gp[:, j] = g[:, j] @ m
        return (gp,)

    return T.make_op(out, (planes,), backward)


def shift_plane(plane, shift_px: float) -> Tensor:
    """Single-plane shift; accepts (H, W) arrays or (N, 1, H, W) tensors."""
    if isinstance(plane, np.ndarray) and plane.ndim == 2:
        return shift_planes(Tensor(plane[None, None]), [shift_px])[0, 0]
    return shift_planes(plane, [shift_px])


def reconstruct_jacobian(planes, plane_spec: PlaneSpec, u: float, merge: str = "max") -> Tensor:
    """Shift plane k by d_k * u and merge per pixel (max, or sum for the ablation)."""
    planes = T.as_tensor(planes)
    shifted = shift_planes(planes, [d * u for d in plane_spec.disparities])
    if merge == "max":
        return T.channel_max(shifted)[0]
    if merge == "sum":
        return T.channel_sum(shifted)
    raise ValueError(f"unknown plane merge {merge!r}")


# -- flows and warping ----------------------------------------------------------------

def view_flow(J, u_from: float, u_to: float) -> Tensor:
    """Horizontal displacement taking a pixel at view ``u_from`` to view ``u_to``."""
    return T.as_tensor(J) * float(-(u_to - u_from))


def time_flow(J, t_from: float, t_to: float, branch: str | None = None) -> Tensor:
    """Displacement (t_to - t_from) * J; ``branch`` asserts the direction it serves."""
    if branch == "next" and t_to < t_from:
        raise ValueError(f"next-frame Jacobian used for a backward step {t_from} -> {t_to}")
    if branch == "prev" and t_to > t_from:
        raise ValueError(f"previous-frame Jacobian used for a forward step {t_from} -> {t_to}")
    return T.as_tensor(J) * float(t_to - t_from)


@lru_cache(maxsize=32)
def _base_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    xs.setflags(write=False)
    ys.setflags(write=False)
    return xs, ys


def backward_warp(image, flow) -> Tensor:
    """Sample ``image`` at p + flow(p) for every output pixel p.

    ``flow`` has one channel (horizontal only) or two (x, y).
    """
    image, flow = T.as_tensor(image), T.as_tensor(flow)
    if image.ndim != 4 or flow.ndim != 4 or image.shape[2:] != flow.shape[2:] \
            or flow.shape[1] not in (1, 2) or flow.shape[0] != image.shape[0]:
        raise T.ShapeError("backward_warp", image.shape, flow.shape)
    h, w = image.shape[2:]
    xs, ys = _base_grid(h, w)
    if flow.shape[1] == 1:
        sx = flow + xs[None, None]
        sy = Tensor(np.broadcast_to(ys, flow.shape).astype(flow.dtype))
    else:
        sx = flow[:, 0:1] + xs[None, None]
        sy = flow[:, 1:2] + ys[None, None]
    return T.grid_sample_bilinear(image, sx, sy)


def _np_warp(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Numpy convenience: (C, H, W) image, (1|2, H, W) flow."""
    with T.no_grad():
        return backward_warp(Tensor(image[None]), Tensor(flow[None])).data[0]


# -- masks ---------------------------------------------------------------------------------

def _as_hw(a) -> np.ndarray:
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    return a.reshape(a.shape[-2:]).astype(np.float32)


def occlusion_mask_from_guidance(J_left, J_right, tol_px: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Forward-backward disparity consistency; 1 = visible in the other view.

    A left pixel p is kept when its disparity agrees (within ``tol_px``)
    with the right disparity found at p - J_left(p); symmetrically for the
    right view.
    """
    jl, jr = _as_hw(J_left), _as_hw(J_right)
    jr_at_l = _np_warp(jr[None], jl[None] * -1.0)[0]
    jl_at_r = _np_warp(jl[None], jr[None])[0]
    left = (np.abs(jl - jr_at_l) <= tol_px).astype(np.float32)
    right = (np.abs(jr - jl_at_r) <= tol_px).astype(np.float32)
    return left, right


def _as_chw(a) -> np.ndarray:
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float32)
    if a.ndim == 4:
        a = a[0]
    if a.ndim == 2:
        a = a[None]
    return a.astype(np.float32)


def consistency_weights(flow_fwd, flow_bwd, sigma: float = 1.0) -> np.ndarray:
    """exp(-e / sigma) with e(p) = |flow_fwd(p) + flow_bwd(p + flow_fwd(p))|."""
    ff, fb = _as_chw(flow_fwd), _as_chw(flow_bwd)
    if ff.shape != fb.shape:
        raise T.ShapeError("consistency_weights", ff.shape, fb.shape)
    back = _np_warp(fb, ff)
    err = np.sqrt(((ff + back) ** 2).sum(axis=0))
    return np.exp(-err / sigma).astype(np.float32)


def decompose_guidance(J_tilde, plane_spec: PlaneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Split a guidance disparity map into per-plane maps and binary band masks.

    Plane k owns [d_k - l/2, d_k + l/2); the lowest band is open below and
    the top band is open above, so the masks partition the image.
    """
    j = _as_hw(J_tilde)
    d = np.asarray(plane_spec.disparities, dtype=np.float64)
    k = d.size
    if k == 1:
        masks = np.ones((1,) + j.shape, dtype=np.float32)
    else:
        edges = d[1:] - plane_spec.gap / 2.0
        band = np.searchsorted(edges, j, side="right")
        masks = (band[None] == np.arange(k)[:, None, None]).astype(np.float32)
    return (j[None] * masks).astype(np.float32), masks


def residual_edge_mask(flow_x, grad_threshold: float = 0.5, kernel: int = 7, erode: int = 3,
                       signed: bool = True) -> np.ndarray:
    """Binary mask around flow discontinuities, grown horizontally.

    With ``signed`` only fold-overs (d flow_x / dx <= -threshold), the side
    where backward warping duplicates the occluder, are flagged; otherwise
    any |gradient| above the threshold. Edges are dilated by a 1 x ``kernel``
    row element and eroded by a 1 x ``erode`` one.
    """
    fx = _as_hw(flow_x)
    if fx.shape[1] < 2:
        return np.zeros_like(fx)
    grad = np.gradient(fx, axis=1)
    edges = grad <= -grad_threshold if signed else np.abs(grad) >= grad_threshold
    if not edges.any():
        return np.zeros_like(fx)
    grown = ndimage.binary_dilation(edges, structure=np.ones((1, kernel), dtype=bool))
    if erode > 1:
        grown = ndimage.binary_erosion(grown, structure=np.ones((1, erode), dtype=bool),
                                       border_value=1)
    return grown.astype(np.float32)


def combine_weights(weights, residual_mask) -> np.ndarray:
    """Zero the weights wherever the residual mask is set."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    return (w * (1.0 - residual_mask)).astype(np.float32)


# -- blending --------------------------------------------------------------------------------

BLEND_EPS = 1e-6


def blend(I_l, I_r, W_l, W_r, c: float) -> Tensor:
    """((1-c) W_l I_l + c W_r I_r) / ((1-c) W_l + c W_r), evaluated as I_l + w (I_r - I_l).

    Pixels where both weighted terms vanish fall back to the linear blend.
    """
    I_l, I_r = T.as_tensor(I_l), T.as_tensor(I_r)
    W_l, W_r = T.as_tensor(W_l), T.as_tensor(W_r)
    c = float(c)
    den_data = (1.0 - c) * W_l.data + c * W_r.data
    degenerate = den_data < BLEND_EPS
    if degenerate.any():
        fix = degenerate.astype(W_l.dtype)
        W_l = W_l * (1.0 - fix) + fix
        W_r = W_r * (1.0 - fix) + fix
    den = W_l * (1.0 - c) + W_r * c
    omega = (W_r * c) / den
    out = I_l + omega * (I_r - I_l)
    # x + (y - x) can miss y by an ulp; make the c = 1 endpoint exact
    full = omega.data == 1.0
    if full.any():
        sel = np.broadcast_to(full, out.shape).astype(out.dtype)
        out = out * (1.0 - sel) + I_r * sel
    return out
