"""Per-scene optimization of the view decoder and the two time decoders."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .coords import U_LEFT, U_RIGHT, EncodingConfig, assemble_coord, coord_dim, non_uniform_tau
from .decoder import CoordDecoder, DecoderConfig, build_time_decoder, build_view_decoder
from .geometry import (PlaneSpec, backward_warp, consistency_weights, decompose_guidance,
                       shift_planes, time_flow, view_flow, blend)
from .tensor import Tensor

log = logging.getLogger(__name__)

VIEW_ABLATIONS = ("single-plane", "no-plane-reg", "no-disp-mask", "sum-merge", "appearance-only")
TIME_ABLATIONS = ("single-jac", "dual-jac")
ABLATIONS = VIEW_ABLATIONS + TIME_ABLATIONS
TIME_MODES = ("non-uniform", "single", "dual")
SIDES = {"L": 0, "R": 1}


class GuidanceError(ValueError):
    """A loss needs guidance the bundle does not provide."""


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, sample: str, terms: dict):
        self.iteration, self.sample, self.terms = iteration, sample, terms
        super().__init__(f"non-finite loss at iteration {iteration} (sample {sample}): {terms}")


@dataclass
class OptimConfig:
    iterations: int = 20000
    lr: float = 1e-4
    lr_decay: float = 0.4
    lambda_scale: float = 20.0      # Jacobian weight = lambda_scale / w
    gamma_scale: float = 1.0        # per-plane weight = gamma_scale / w
    n_planes: int = 6
    merge: str = "max"
    plane_masks: bool = True
    time_mode: str = "non-uniform"
    ablation: str | None = None
    capacity: int = 16
    n_levels: int = 4
    seed: int = 0
    log_every: int = 100
    encoding: EncodingConfig = field(default_factory=EncodingConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.merge not in ("max", "sum"):
            raise ValueError(f"merge must be max or sum, got {self.merge!r}")
        if self.time_mode not in TIME_MODES:
            raise ValueError(f"time_mode must be one of {TIME_MODES}")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {', '.join(ABLATIONS)}")

    def resolved(self) -> "OptimConfig":
        """The config with its ablation flag folded into the concrete settings."""
        a = self.ablation
        if a == "single-plane":
            return replace(self, n_planes=1, gamma_scale=0.0, ablation=None)
        if a == "no-plane-reg":
            return replace(self, gamma_scale=0.0, ablation=None)
        if a == "no-disp-mask":
            return replace(self, plane_masks=False, ablation=None)
        if a == "sum-merge":
            return replace(self, merge="sum", ablation=None)
        if a == "appearance-only":
            return replace(self, n_planes=1, gamma_scale=0.0, lambda_scale=0.0, ablation=None)
        if a == "single-jac":
            return replace(self, time_mode="single", ablation=None)
        if a == "dual-jac":
            return replace(self, time_mode="dual", ablation=None)
        return self

    def lam(self, width: int) -> float:
        return self.lambda_scale / width

    def gam(self, width: int) -> float:
        return self.gamma_scale / width

    def lr_at(self, it: int) -> float:
        """Step decay by ``lr_decay`` at one and two thirds of the run."""
        n = self.iterations
        drops = sum(1 for k in (1, 2) if n and 3 * it >= k * n)
        return self.lr * self.lr_decay ** drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoding"] = self.encoding.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        d = dict(d)
        d["encoding"] = EncodingConfig(**d.get("encoding", {}))
        return cls(**d)


@dataclass
class LossReport:
    iteration: int
    sample: str
    lr: float
    terms: dict[str, float]
    running: dict[str, float]

    @property
    def total(self) -> float:
        return sum(self.terms.values())

    def to_json(self) -> str:
        return json.dumps({"iteration": self.iteration, "sample": self.sample, "lr": self.lr,
                           "total": self.total, **self.terms,
                           **{f"mean_{k}": v for k, v in self.running.items()}})


# -- guidance ---------------------------------------------------------------------------------

def view_u(view: int) -> float:
    return U_LEFT if view == 0 else U_RIGHT


def plane_spec_for(bundle, n_planes: int) -> PlaneSpec:
    return PlaneSpec.for_max_disparity(float(bundle.disparity.max()), n_planes)


def _b(a: np.ndarray) -> Tensor:
    return Tensor(a[None] if a.ndim == 3 else a[None, None])


@dataclass
class _ViewTarget:
    image: Tensor          # (1, 3, H, W)
    other: Tensor          # opposite view, the warp source
    guidance: Tensor       # (1, 1, H, W)
    occ: np.ndarray        # (1, 1, H, W)
    plane_guidance: Tensor  # (1, K, H, W)
    plane_masks: np.ndarray


def _view_target(bundle, spec: PlaneSpec, v: int, i: int) -> _ViewTarget:
    jt = bundle.disparity[i, v]
    per_plane, masks = decompose_guidance(jt, spec)
    return _ViewTarget(_b(bundle.frames[i, v]), _b(bundle.frames[i, 1 - v]), _b(jt),
                       bundle.occlusion[i, v][None, None], Tensor(per_plane[None]), masks[None])


def _view_targets(bundle, spec: PlaneSpec) -> dict:
    return {(v, i): _view_target(bundle, spec, v, i) for i in range(bundle.n_frames) for v in (0, 1)}


# -- view loss ----------------------------------------------------------------------------------

def view_coord(u: float, t: float, enc: EncodingConfig) -> np.ndarray:
    return assemble_coord("view-net", (u, t), enc)


def view_loss_terms(net: CoordDecoder, target: _ViewTarget, u: float, t: float, spec: PlaneSpec,
                    cfg: OptimConfig, width: int) -> dict[str, Tensor]:
    """Masked appearance, Jacobian supervision and per-plane regularization at (u, t)."""
    planes = net(view_coord(u, t, cfg.encoding))
    shifted = shift_planes(planes, [d * u for d in spec.disparities])
    J = T.channel_max(shifted)[0] if cfg.merge == "max" else T.channel_sum(shifted)
    u_other = U_RIGHT if u == U_LEFT else U_LEFT
    warped = backward_warp(target.other, view_flow(J, u, u_other))
    terms = {"appearance": T.mean_abs(warped - target.image, target.occ)}
    lam, gam = cfg.lam(width), cfg.gam(width)
    if lam:
        terms["jacobian"] = T.mean_abs(J - target.guidance) * lam
    if gam:
        diff = shifted - target.plane_guidance
        if cfg.plane_masks:
            m = target.plane_masks
            per_plane = [T.mean_abs(diff[:, k:k + 1], m[:, k:k + 1]) for k in range(spec.count)]
            terms["plane"] = _sum(per_plane) * gam
        else:
            terms["plane"] = T.mean_abs(diff) * (gam * spec.count)
    return terms


def view_loss(net, bundle, view: int, frame: int, cfg: OptimConfig, spec: PlaneSpec | None = None) -> Tensor:
    cfg = cfg.resolved()
    if bundle.disparity is None:
        raise GuidanceError("view loss needs guidance disparity")
    spec = spec or plane_spec_for(bundle, cfg.n_planes)
    target = _view_target(bundle, spec, view, frame)
    terms = view_loss_terms(net, target, view_u(view), bundle.t(frame), spec, cfg, bundle.width)
    return _sum(terms)


def _sum(terms) -> Tensor:
    vals = list(terms.values()) if isinstance(terms, dict) else list(terms)
    total = vals[0]
    for v in vals[1:]:
        total = total + v
    return total


# -- time loss ------------------------------------------------------------------------------------

def time_jacobians(net: CoordDecoder, t: float, delta: float, mode: str, enc: EncodingConfig,
                   branches: tuple[str, ...] = ("next", "prev")) -> dict[str, Tensor]:
    """J_a (to the next frame) and J_b (to the previous frame) at time t.

    ``non-uniform`` queries the one decoder at tau = t for J_a and
    tau = t - alpha * delta for J_b; ``single`` uses one query for both;
    ``dual`` reads two 2-channel heads from one query at tau = t.
    """
    out = {}
    if mode == "non-uniform":
        for b in branches:
            out[b] = net(assemble_coord("time-net", non_uniform_tau(t, b, delta, enc), enc))
    elif mode == "single":
        j = net(assemble_coord("time-net", t, enc))
        out = {b: j for b in branches}
    elif mode == "dual":
        j = net(assemble_coord("time-net", t, enc))
        heads = {"next": j[:, 0:2], "prev": j[:, 2:4]}
        out = {b: heads[b] for b in branches}
    else:
        raise ValueError(f"unknown time mode {mode!r}")
    return out


def time_loss_terms(net: CoordDecoder, bundle, view: int, frame: int, cfg: OptimConfig) -> dict[str, Tensor]:
    n = bundle.n_frames
    if not 0 < frame < n - 1:
        raise GuidanceError(f"time loss needs an interior frame, got {frame} of {n}")
    if (view, frame) not in bundle.flow_next or (view, frame) not in bundle.flow_prev:
        raise GuidanceError(f"missing flow guidance for view {view} frame {frame}")
    delta, enc, mode = bundle.delta, cfg.encoding, cfg.time_mode
    t_prev, t, t_next = bundle.t(frame - 1), bundle.t(frame), bundle.t(frame + 1)
    jac = time_jacobians(net, t, delta, mode, enc)
    # consistency weights come from the neighbours' Jacobians pointing back at frame i
    with T.no_grad():
        ja_prev = time_jacobians(net, t_prev, delta, mode, enc, ("next",))["next"]
        jb_next = time_jacobians(net, t_next, delta, mode, enc, ("prev",))["prev"]
    f_prev = time_flow(jac["prev"], t, t_prev, "prev")
    f_next = time_flow(jac["next"], t, t_next, "next")
    w_prev = consistency_weights(f_prev.data, time_flow(ja_prev, t_prev, t, "next").data)
    w_next = consistency_weights(f_next.data, time_flow(jb_next, t_next, t, "prev").data)
    src_prev = _b(bundle.frames[frame - 1, view])
    src_next = _b(bundle.frames[frame + 1, view])
    recon = blend(backward_warp(src_prev, f_prev), backward_warp(src_next, f_next),
                  w_prev[None], w_next[None], 0.5)
    terms = {"appearance": T.mean_abs(recon - _b(bundle.frames[frame, view]))}
    lam = cfg.lam(bundle.width)
    if lam:
        terms["jacobian"] = (T.mean_abs(jac["next"] - _b(bundle.flow_next[(view, frame)]))
                             + T.mean_abs(jac["prev"] - _b(bundle.flow_prev[(view, frame)]))) * lam
    return terms


def time_loss(net, bundle, view: int, frame: int, cfg: OptimConfig) -> Tensor:
    return _sum(time_loss_terms(net, bundle, view, frame, cfg.resolved()))


# -- network construction ------------------------------------------------------------------------

def make_view_net(height: int, width: int, spec: PlaneSpec, cfg: OptimConfig) -> CoordDecoder:
    dcfg = DecoderConfig(out_height=height, out_width=width, out_channels=spec.count,
                         coord_dim=coord_dim("view-net", cfg.encoding), capacity=cfg.capacity,
                         n_levels=cfg.n_levels, seed=cfg.seed)
    return build_view_decoder(dcfg, spec.disparities)


def make_time_net(height: int, width: int, n_frames: int, cfg: OptimConfig, side: int) -> CoordDecoder:
    dcfg = DecoderConfig(out_height=height, out_width=width,
                         out_channels=4 if cfg.time_mode == "dual" else 2,
                         coord_dim=coord_dim("time-net", cfg.encoding), capacity=cfg.capacity,
                         n_levels=cfg.n_levels, output_scale=float(n_frames - 1),
                         seed=cfg.seed * 2 + side)
    return build_time_decoder(dcfg)


def network_from_checkpoint(ckpt: Checkpoint) -> CoordDecoder:
    dcfg = DecoderConfig(**{k: (tuple(v) if k == "plane_disparities" else v)
                            for k, v in ckpt.config["decoder"].items()})
    net = CoordDecoder(dcfg)
    net.load_state_dict(ckpt.params)
    return net


def scene_summary(bundle) -> dict:
    m = bundle.manifest
    return {"preset": m.get("preset"), "seed": m.get("seed"), "height": bundle.height,
            "width": bundle.width, "frames": bundle.n_frames}


# -- optimization loop -------------------------------------------------------------------------------

def _sample_rng(seed: int, it: int) -> np.random.Generator:
    # one stream per iteration, so a resumed run draws the same samples
    return np.random.default_rng([seed, it, 0x5EED])


def optimize_scene(kind: str, bundle, cfg: OptimConfig, side: str = "L",
                   on_report: Callable[[LossReport], None] | None = None,
                   resume: Checkpoint | None = None, stop_at: int | None = None) -> Checkpoint:
    """Fit a view decoder (``kind='view'``) or the time decoder of one view.

    ``stop_at`` ends the loop early (the lr schedule still follows
    ``cfg.iterations``); resuming from that checkpoint continues the same run.
    """
    h, w, n = bundle.height, bundle.width, bundle.n_frames
    cfg = replace(cfg, encoding=cfg.encoding.for_frames(n))
    cfg_r = cfg.resolved()
    if kind == "view":
        if cfg.ablation in TIME_ABLATIONS:
            raise ValueError(f"ablation {cfg.ablation} applies to time optimization")
        spec = plane_spec_for(bundle, cfg_r.n_planes)
        net = make_view_net(h, w, spec, cfg_r)
        targets = _view_targets(bundle, spec)
        samples = [(v, i) for i in range(n) for v in (0, 1)]

        def loss_terms(v, i):
            return view_loss_terms(net, targets[(v, i)], view_u(v), bundle.t(i), spec, cfg_r, w)
    elif kind == "time":
        if cfg.ablation in VIEW_ABLATIONS:
            raise ValueError(f"ablation {cfg.ablation} applies to view optimization")
        if side not in SIDES:
            raise ValueError(f"side must be L or R, got {side!r}")
        if n < 3:
            raise GuidanceError("time optimization needs at least three frames")
        v_side = SIDES[side]
        net = make_time_net(h, w, n, cfg_r, v_side)
        samples = [(v_side, i) for i in range(1, n - 1)]

        def loss_terms(v, i):
            return time_loss_terms(net, bundle, v, i, cfg_r)
    else:
        raise ValueError(f"kind must be view or time, got {kind!r}")

    config = {"kind": kind, "side": side if kind == "time" else None, "optim": cfg.to_dict(),
              "decoder": net.cfg.to_dict(), "scene": scene_summary(bundle)}
    opt = T.Adam(net.params, lr=cfg.lr)
    start = 0
    if resume is not None:
        if resume.config.get("decoder") != config["decoder"]:
            raise ValueError("resume checkpoint was made for a different network")
        net.load_state_dict(resume.params)
        if resume.adam is not None:
            opt.state = resume.adam
            start = resume.adam.step_count
    running: dict[str, float] = {}
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    for it in range(start, end):
        v, i = samples[int(_sample_rng(cfg.seed, it).integers(len(samples)))]
        opt.lr = cfg_r.lr_at(it)
        opt.zero_grad()
        terms = loss_terms(v, i)
        values = {k: t.item() for k, t in terms.items()}
        if not all(math.isfinite(x) for x in values.values()):
            raise TrainingDiverged(it, f"{'LR'[v]}{i}", values)
        _sum(terms).backward()
        opt.step()
        for k, x in values.items():
            running[k] = x if k not in running else 0.98 * running[k] + 0.02 * x
        if on_report is not None and (it % cfg.log_every == 0 or it == end - 1):
            on_report(LossReport(it, f"{'LR'[v]}{i}", opt.lr, values, dict(running)))
    return Checkpoint(config, net.state_dict(), opt.state)
