"""View, time and two-stage view-time rendering from optimized decoders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .coords import U_LEFT, U_RIGHT, EncodingConfig
from .decoder import BlenderUNet, CoordDecoder, blender_forward
from .geometry import (PlaneSpec, backward_warp, blend, combine_weights, consistency_weights,
                       reconstruct_jacobian, residual_edge_mask, time_flow, view_flow)
from .tensor import Tensor
from .training import OptimConfig, SIDES, network_from_checkpoint, time_jacobians, view_coord

BLEND_MODES = ("learned", "consistency")
RESIDUAL_MODES = ("learned", "always", "never")


class RenderError(ValueError):
    pass


def _chw(x) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    return a[0] if a.ndim == 4 else a


@dataclass
class ViewModel:
    net: CoordDecoder
    spec: PlaneSpec
    merge: str
    encoding: EncodingConfig

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ViewModel":
        if ckpt.kind != "view":
            raise RenderError(f"expected a view checkpoint, got kind {ckpt.kind!r}")
        cfg = OptimConfig.from_dict(ckpt.config["optim"]).resolved()
        net = network_from_checkpoint(ckpt)
        return cls(net, PlaneSpec(tuple(net.cfg.plane_disparities)), cfg.merge, cfg.encoding)

    def jacobian(self, u: float, t: float) -> Tensor:
        planes = self.net(view_coord(u, t, self.encoding))
        return reconstruct_jacobian(planes, self.spec, u, self.merge)


@dataclass
class TimeModel:
    net: CoordDecoder
    mode: str
    encoding: EncodingConfig

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TimeModel":
        if ckpt.kind != "time":
            raise RenderError(f"expected a time checkpoint, got kind {ckpt.kind!r}")
        cfg = OptimConfig.from_dict(ckpt.config["optim"]).resolved()
        return cls(network_from_checkpoint(ckpt), cfg.time_mode, cfg.encoding)


@dataclass
class RenderOptions:
    blend_mode: str = "consistency"
    # consistency weights already reject disoccluded samples, so by default
    # the residual mask only sharpens learned weight maps
    residual_mask: str = "learned"
    residual_threshold: float = 0.5
    residual_signed: bool = True
    sigma: float = 1.0

    def __post_init__(self):
        if self.blend_mode not in BLEND_MODES:
            raise RenderError(f"blend mode must be one of {BLEND_MODES}, got {self.blend_mode!r}")
        if self.residual_mask not in RESIDUAL_MODES:
            raise RenderError(f"residual mask must be one of {RESIDUAL_MODES}, got {self.residual_mask!r}")

    def masks(self) -> bool:
        return self.residual_mask == "always" or (self.residual_mask == "learned" and self.blend_mode == "learned")


def _check_u(u: float) -> None:
    if not U_LEFT <= u <= U_RIGHT:
        raise RenderError(f"u={u} outside [{U_LEFT}, {U_RIGHT}]")


def _check_t(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise RenderError(f"t={t} outside [0, 1]")


def render_view(u: float, t: float, left, right, model: ViewModel, blender: BlenderUNet | None = None,
                opts: RenderOptions = RenderOptions(), return_parts: bool = False):
    """Warp the left and right images to view u and blend them.

    ``t`` selects the view decoder's time input; ``left`` and ``right`` are
    the (3, H, W) source images at that time.
    """
    _check_u(u)
    if opts.blend_mode == "learned" and blender is None:
        raise RenderError("learned blending requested without a blender checkpoint")
    left, right = np.asarray(_chw(left), np.float32), np.asarray(_chw(right), np.float32)
    with T.no_grad():
        J = model.jacobian(u, t)
        flow_l, flow_r = view_flow(J, u, U_LEFT), view_flow(J, u, U_RIGHT)
        warp_l = backward_warp(Tensor(left[None]), flow_l)
        warp_r = backward_warp(Tensor(right[None]), flow_r)
        c = u - U_LEFT
        if opts.blend_mode == "learned":
            w_l = blender_forward(blender, left, right, warp_l, warp_r, flow_l.data, flow_r.data).data[0, 0]
            w_r = 1.0 - w_l
        else:
            J_l, J_r = model.jacobian(U_LEFT, t), model.jacobian(U_RIGHT, t)
            w_l = consistency_weights(flow_l, view_flow(J_l, U_LEFT, u), opts.sigma)
            w_r = consistency_weights(flow_r, view_flow(J_r, U_RIGHT, u), opts.sigma)
        if opts.masks():
            w_l = combine_weights(w_l, residual_edge_mask(flow_l, opts.residual_threshold,
                                                          signed=opts.residual_signed))
            w_r = combine_weights(w_r, residual_edge_mask(flow_r, opts.residual_threshold,
                                                          signed=opts.residual_signed))
        out = blend(warp_l, warp_r, w_l[None, None], w_r[None, None], c)
    image = out.data[0]
    if return_parts:
        return image, {"J": J.data[0, 0], "warp_l": warp_l.data[0], "warp_r": warp_r.data[0],
                       "w_l": np.asarray(w_l), "w_r": np.asarray(w_r), "c": c}
    return image


def frame_interval(t: float, n_frames: int) -> tuple[int, float]:
    """Index i of the interval [t_i, t_{i+1}] holding t, and c = (t - t_i) / delta."""
    _check_t(t)
    if n_frames < 2:
        raise RenderError("need at least two frames")
    delta = 1.0 / (n_frames - 1)
    i = min(int(math.floor(t / delta)), n_frames - 2)
    c = (t - i * delta) / delta
    if c > 1.0 - 1e-9 and i == n_frames - 2:
        c = 1.0
    return i, c


def render_time(t: float, frames: np.ndarray, model: TimeModel, sigma: float = 1.0,
                return_parts: bool = False):
    """Interpolate one view's video (frames: (N, 3, H, W)) at time t."""
    n = frames.shape[0]
    i, c = frame_interval(t, n)
    delta = 1.0 / (n - 1)
    t_i, t_j = i * delta, (i + 1) * delta
    if c == 0.0:
        t = t_i
    with T.no_grad():
        jac = time_jacobians(model.net, t, delta, model.mode, model.encoding)
        f_prev = time_flow(jac["prev"], t, t_i, "prev")
        f_next = time_flow(jac["next"], t, t_j, "next")
        back_prev = time_flow(time_jacobians(model.net, t_i, delta, model.mode, model.encoding, ("next",))["next"],
                              t_i, t, "next")
        back_next = time_flow(time_jacobians(model.net, t_j, delta, model.mode, model.encoding, ("prev",))["prev"],
                              t_j, t, "prev")
        w_prev = consistency_weights(f_prev, back_prev, sigma)
        w_next = consistency_weights(f_next, back_next, sigma)
        warp_p = backward_warp(Tensor(frames[i][None]), f_prev)
        warp_n = backward_warp(Tensor(frames[i + 1][None]), f_next)
        out = blend(warp_p, warp_n, w_prev[None, None], w_next[None, None], c)
    if return_parts:
        return out.data[0], {"J_a": jac["next"].data[0], "J_b": jac["prev"].data[0], "c": c, "interval": i}
    return out.data[0]


@dataclass
class Pipeline:
    """Decoders for one scene plus its observed frames (N, 2, 3, H, W)."""

    frames: np.ndarray
    view: ViewModel | None = None
    time: dict[int, TimeModel] = field(default_factory=dict)
    blender: BlenderUNet | None = None
    opts: RenderOptions = field(default_factory=RenderOptions)

    @classmethod
    def from_checkpoints(cls, frames, view: Checkpoint | None = None, time_l: Checkpoint | None = None,
                         time_r: Checkpoint | None = None, blender: Checkpoint | None = None,
                         opts: RenderOptions | None = None) -> "Pipeline":
        p = cls(np.asarray(frames, dtype=np.float32), opts=opts or RenderOptions())
        if view is not None:
            p.view = ViewModel.from_checkpoint(view)
        for side, ck in (("L", time_l), ("R", time_r)):
            if ck is not None:
                tm = TimeModel.from_checkpoint(ck)
                if ck.config.get("side") not in (None, side):
                    raise RenderError(f"time checkpoint for side {ck.config.get('side')} given as {side}")
                p.time[SIDES[side]] = tm
        if blender is not None:
            from .decoder import blender_from_checkpoint
            p.blender = blender_from_checkpoint(blender)
        return p

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def render_view(self, u: float, t: float, left=None, right=None) -> np.ndarray:
        if self.view is None:
            raise RenderError("view checkpoint missing")
        if left is None or right is None:
            i, c = frame_interval(t, self.n_frames)
            if c not in (0.0, 1.0):
                raise RenderError(f"t={t} is not an observed frame time; pass source images")
            i = i + int(c == 1.0)
            left, right = self.frames[i, 0], self.frames[i, 1]
        return render_view(u, t, left, right, self.view, self.blender, self.opts)

    def render_time(self, view: int, t: float) -> np.ndarray:
        if view not in self.time:
            raise RenderError(f"time checkpoint for view {'LR'[view]} missing")
        return render_time(t, self.frames[:, view], self.time[view], self.opts.sigma)

    def render_view_time(self, u: float, t: float) -> np.ndarray:
        """Stage 1: time-interpolate both views to t; stage 2: view-interpolate to u."""
        _check_u(u)
        i, c = frame_interval(t, self.n_frames)
        if c in (0.0, 1.0):
            # both time stages reduce to the observed frame
            return self.render_view(u, t)
        left = self.render_time(0, t)
        right = self.render_time(1, t)
        return self.render_view(u, t, left, right)
