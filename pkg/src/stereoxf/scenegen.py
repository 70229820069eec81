"""Deterministic layered stereo-video scenes with exact guidance.

Each layer is a textured sprite translated rigidly: at view u and time t
its centre sits at (x_c(t) - d * u, y_c(t)), with x_c, y_c piecewise-linear
over frame indices. Layers composite back to front by ``z_order``. This
module is the single source of that placement convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .coords import U_LEFT, U_RIGHT, frame_spacing
from .geometry import PlaneSpec

VIEWS = ("L", "R")
VIEW_U = {0: U_LEFT, 1: U_RIGHT}


class SceneError(ValueError):
    pass


@dataclass
class LayerSpec:
    name: str
    texture: np.ndarray                 # (3, h, w) in [0, 1]
    alpha: np.ndarray                   # (h, w) bool
    disparity: float
    keyframes: tuple[tuple[float, float, float], ...]   # (frame index, x_c, y_c)
    z_order: int
    fills_frame: bool = False
    recipe: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.alpha.shape

    def centre(self, frame: float) -> tuple[float, float]:
        kf = np.asarray(self.keyframes, dtype=float)
        if len(kf) == 1:
            return float(kf[0, 1]), float(kf[0, 2])
        return float(np.interp(frame, kf[:, 0], kf[:, 1])), float(np.interp(frame, kf[:, 0], kf[:, 2]))

    def top_left(self, u: float, frame: float) -> tuple[float, float]:
        xc, yc = self.centre(frame)
        h, w = self.size
        return xc - self.disparity * u - w / 2.0, yc - h / 2.0


@dataclass
class Scene:
    name: str
    height: int
    width: int
    n_frames: int
    layers: list[LayerSpec]
    seed: int = 0
    gain_jitter: float = 0.0
    recommended: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = sorted(self.layers, key=lambda l: l.z_order)
        validate_scene(self)

    @property
    def delta(self) -> float:
        return frame_spacing(self.n_frames)

    @property
    def disparities(self) -> list[float]:
        return sorted({float(l.disparity) for l in self.layers})

    @property
    def max_disparity(self) -> float:
        return max(self.disparities)

    def frame_of(self, t: float) -> float:
        return t * (self.n_frames - 1)

    def gain(self, t: float) -> float:
        if not self.gain_jitter:
            return 1.0
        rng = np.random.default_rng([self.seed, 7919])
        gains = 1.0 + self.gain_jitter * rng.uniform(-1, 1, self.n_frames)
        return float(np.interp(self.frame_of(t), np.arange(self.n_frames), gains))


def validate_scene(scene: Scene) -> None:
    for layer in scene.layers:
        if layer.disparity < 0:
            raise SceneError(f"layer {layer.name}: negative disparity")
        h, w = layer.size
        for frame, _, _ in layer.keyframes:
            for u in (U_LEFT, U_RIGHT):
                x0, y0 = layer.top_left(u, frame)
                ys, xs = np.nonzero(layer.alpha)
                if layer.fills_frame:
                    ok = x0 <= 0 and y0 <= 0 and x0 + w >= scene.width and y0 + h >= scene.height
                else:
                    ok = (x0 + xs.min() >= 1 and y0 + ys.min() >= 1
                          and x0 + xs.max() + 1 <= scene.width - 1
                          and y0 + ys.max() + 1 <= scene.height - 1)
                if not ok:
                    raise SceneError(f"layer {layer.name} leaves the frame at frame {frame}, u={u}")


# -- rendering ------------------------------------------------------------------------------

def _resample_shift(a: np.ndarray, frac: float, axis: int) -> np.ndarray:
    """Sub-pixel translate by ``frac`` in [0, 1) along ``axis``; output grows by one."""
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    p = np.pad(a, pad)
    n = a.shape[axis] + 1
    cur = np.take(p, np.arange(1, n + 1), axis=axis)
    prev = np.take(p, np.arange(0, n), axis=axis)
    return (1.0 - frac) * cur + frac * prev


def _place(layer: LayerSpec, u: float, frame: float, height: int, width: int):
    """Premultiplied colour and alpha of one layer on the canvas."""
    x0, y0 = layer.top_left(u, frame)
    ix, iy = math.floor(x0), math.floor(y0)
    fx, fy = x0 - ix, y0 - iy
    a = layer.alpha.astype(np.float64)
    col = layer.texture.astype(np.float64) * a[None]
    if fx:
        a, col = _resample_shift(a, fx, 1), _resample_shift(col, fx, 2)
    if fy:
        a, col = _resample_shift(a, fy, 0), _resample_shift(col, fy, 1)
    h, w = a.shape
    canvas_a = np.zeros((height, width))
    canvas_c = np.zeros((3, height, width))
    ys0, xs0 = max(iy, 0), max(ix, 0)
    ys1, xs1 = min(iy + h, height), min(ix + w, width)
    if ys1 > ys0 and xs1 > xs0:
        canvas_a[ys0:ys1, xs0:xs1] = a[ys0 - iy:ys1 - iy, xs0 - ix:xs1 - ix]
        canvas_c[:, ys0:ys1, xs0:xs1] = col[:, ys0 - iy:ys1 - iy, xs0 - ix:xs1 - ix]
    return canvas_c, canvas_a


@dataclass
class Rendered:
    image: np.ndarray       # (3, H, W) float32
    disparity: np.ndarray   # (H, W) disparity of the top visible layer
    layer_id: np.ndarray    # (H, W) index into scene.layers, -1 where empty


def render_full(scene: Scene, u: float, t: float) -> Rendered:
    if not -0.5 <= u <= 0.5 or not 0.0 <= t <= 1.0:
        raise SceneError(f"coordinate (u={u}, t={t}) outside the view-time domain")
    frame = scene.frame_of(t)
    img = np.zeros((3, scene.height, scene.width))
    disp = np.zeros((scene.height, scene.width), dtype=np.float32)
    ids = np.full((scene.height, scene.width), -1, dtype=np.int32)
    for idx, layer in enumerate(scene.layers):
        col, a = _place(layer, u, frame, scene.height, scene.width)
        img = img * (1.0 - a)[None] + col
        top = a >= 0.5
        disp[top] = layer.disparity
        ids[top] = idx
    img = np.clip(img * scene.gain(t), 0.0, 1.0).astype(np.float32)
    return Rendered(img, disp, ids)


def render_scene_at(scene: Scene, u: float, t: float) -> np.ndarray:
    """Analytic image at any view-time coordinate."""
    return render_full(scene, u, t).image


def disparity_at(scene: Scene, u: float, t: float) -> np.ndarray:
    return render_full(scene, u, t).disparity


def flow_between(scene: Scene, u: float, t_from: float, t_to: float, ids: np.ndarray | None = None) -> np.ndarray:
    """Pixel displacement (2, H, W) of the top visible layer from t_from to t_to."""
    if ids is None:
        ids = render_full(scene, u, t_from).layer_id
    out = np.zeros((2,) + ids.shape, dtype=np.float32)
    f0, f1 = scene.frame_of(t_from), scene.frame_of(t_to)
    for idx, layer in enumerate(scene.layers):
        sel = ids == idx
        if not sel.any():
            continue
        (x0, y0), (x1, y1) = layer.centre(f0), layer.centre(f1)
        out[0][sel] = x1 - x0
        out[1][sel] = y1 - y0
    return out


def exact_occlusion(ids_self: np.ndarray, ids_other: np.ndarray, disparity: np.ndarray,
                    direction: float) -> np.ndarray:
    """1 where the surface seen at p is also seen at its match p + direction * d in the other view."""
    h, w = ids_self.shape
    xs = np.arange(w)[None, :] + int(direction) * np.rint(disparity).astype(int)
    inside = (xs >= 0) & (xs < w)
    xs_c = np.clip(xs, 0, w - 1)
    match = ids_other[np.arange(h)[:, None], xs_c] == ids_self
    return (inside & match & (ids_self >= 0)).astype(np.float32)


# -- bundles ---------------------------------------------------------------------------------

@dataclass
class SceneBundle:
    """Observed stereo frames and guidance, indexed [frame][view] (view 0 = left)."""

    scene: Scene | None
    frames: np.ndarray              # (N, 2, 3, H, W)
    disparity: np.ndarray           # (N, 2, H, W)
    occlusion: np.ndarray           # (N, 2, H, W) 1 = visible in the other view
    flow_next: dict                 # (view, i) -> (2, H, W) Jacobian per normalized time, i < N-1
    flow_prev: dict                 # (view, i) -> (2, H, W), i > 0
    manifest: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[-2]

    @property
    def width(self) -> int:
        return self.frames.shape[-1]

    @property
    def delta(self) -> float:
        return frame_spacing(self.n_frames)

    def t(self, i: int) -> float:
        return i / (self.n_frames - 1)

    def image(self, view: int, i: int) -> np.ndarray:
        return self.frames[i, view]


def emit_bundle(scene: Scene) -> SceneBundle:
    """Render every observed frame with exact disparity, flow and occlusion guidance."""
    n, h, w = scene.n_frames, scene.height, scene.width
    if n < 3:
        raise SceneError("a bundle needs at least three frames")
    delta = scene.delta
    frames = np.zeros((n, 2, 3, h, w), dtype=np.float32)
    disp = np.zeros((n, 2, h, w), dtype=np.float32)
    occ = np.zeros((n, 2, h, w), dtype=np.float32)
    flow_next, flow_prev = {}, {}
    for i in range(n):
        t = i / (n - 1)
        rl, rr = render_full(scene, U_LEFT, t), render_full(scene, U_RIGHT, t)
        frames[i, 0], frames[i, 1] = rl.image, rr.image
        disp[i, 0], disp[i, 1] = rl.disparity, rr.disparity
        occ[i, 0] = exact_occlusion(rl.layer_id, rr.layer_id, rl.disparity, -1.0)
        occ[i, 1] = exact_occlusion(rr.layer_id, rl.layer_id, rr.disparity, +1.0)
        for v, r in ((0, rl), (1, rr)):
            u = VIEW_U[v]
            if i < n - 1:
                flow_next[(v, i)] = flow_between(scene, u, t, (i + 1) / (n - 1), r.layer_id) / delta
            if i > 0:
                flow_prev[(v, i)] = -flow_between(scene, u, t, (i - 1) / (n - 1), r.layer_id) / delta
    manifest = make_manifest(scene)
    return SceneBundle(scene, frames, disp, occ, flow_next, flow_prev, manifest)


def make_manifest(scene: Scene) -> dict:
    planes = PlaneSpec.for_max_disparity(scene.max_disparity, scene.recommended.get("planes", 6))
    return {
        "format_version": 1,
        "preset": scene.name,
        "seed": scene.seed,
        "height": scene.height,
        "width": scene.width,
        "frames": scene.n_frames,
        "views": list(VIEWS),
        "view_coords": [U_LEFT, U_RIGHT],
        "max_disparity": scene.max_disparity,
        "gain_jitter": scene.gain_jitter,
        "plane_anchors": list(planes.disparities),
        "recommended": dict(scene.recommended),
        "layers": [
            {"name": l.name, "disparity": l.disparity, "z_order": l.z_order,
             "size": list(l.size), "fills_frame": l.fills_frame,
             "keyframes": [list(k) for k in l.keyframes], "recipe": l.recipe}
            for l in scene.layers
        ],
    }


# -- procedural textures ------------------------------------------------------------------------

def _quantize(a: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(a, 0, 1) * 255.0) / 255.0).astype(np.float32)


def make_texture(rng: np.random.Generator, h: int, w: int, smooth: float = 3.0) -> np.ndarray:
    """Seeded smooth noise in two tinted tones plus a few solid discs and bars."""
    base = rng.uniform(0.15, 0.85, 3)
    tint = rng.uniform(-0.35, 0.35, 3)
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), smooth, mode="wrap")
    noise /= max(np.abs(noise).max(), 1e-6)
    tex = base[:, None, None] + tint[:, None, None] * noise[None]
    fine = ndimage.gaussian_filter(rng.standard_normal((3, h, w)), (0, 1.2, 1.2), mode="wrap")
    tex += 0.08 * fine / max(np.abs(fine).max(), 1e-6)
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(2, 5))):
        colour = rng.uniform(0.05, 0.95, 3)
        if rng.uniform() < 0.5:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(0.08, 0.22) * min(h, w)
            sel = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        else:
            y0 = int(rng.integers(0, max(h - 4, 1)))
            sel = (ys >= y0) & (ys < y0 + int(rng.integers(2, max(h // 6, 3))))
        tex[:, sel] = 0.5 * tex[:, sel] + 0.5 * colour[:, None]
    tex = ndimage.gaussian_filter(tex, (0, 0.7, 0.7))
    return _quantize(tex)


def make_alpha(h: int, w: int, shape: str) -> np.ndarray:
    if shape == "rect":
        return np.ones((h, w), dtype=bool)
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if shape == "ellipse":
        return ((ys - cy) / (h / 2.0)) ** 2 + ((xs - cx) / (w / 2.0)) ** 2 <= 1.0
    if shape == "rounded":
        r = min(h, w) / 4.0
        dy = np.maximum(np.abs(ys - cy) - (h / 2.0 - r), 0)
        dx = np.maximum(np.abs(xs - cx) - (w / 2.0 - r), 0)
        return dy ** 2 + dx ** 2 <= r * r
    raise SceneError(f"unknown alpha shape {shape!r}")


def make_layer(rng: np.random.Generator, name: str, size: tuple[int, int], disparity: float,
               keyframes: Sequence[Sequence[float]], z_order: int, shape: str = "rect",
               fills_frame: bool = False, smooth: float = 3.0) -> LayerSpec:
    h, w = size
    return LayerSpec(name=name, texture=make_texture(rng, h, w, smooth), alpha=make_alpha(h, w, shape),
                     disparity=float(disparity), keyframes=tuple(tuple(float(v) for v in k) for k in keyframes),
                     z_order=z_order, fills_frame=fills_frame,
                     recipe={"shape": shape, "smooth": smooth})


def background(rng: np.random.Generator, height: int, width: int, disparity: float = 0.0,
               margin: int = 0) -> LayerSpec:
    h, w = height + 2 * margin, width + 2 * margin + int(math.ceil(disparity)) + 2
    w += w % 2
    h += h % 2
    return make_layer(rng, "background", (h, w), disparity, [(0, width / 2.0, height / 2.0)],
                      z_order=0, fills_frame=True, smooth=5.0)


def linear_path(n_frames: int, start: tuple[float, float], velocity: tuple[float, float]):
    return [(i, start[0] + velocity[0] * i, start[1] + velocity[1] * i) for i in range(n_frames)]


def path_from_steps(start: tuple[float, float], steps: Sequence[tuple[float, float]]):
    kf = [(0, start[0], start[1])]
    x, y = start
    for i, (dx, dy) in enumerate(steps, start=1):
        x, y = x + dx, y + dy
        kf.append((i, x, y))
    return kf


# -- presets ------------------------------------------------------------------------------------

PRESETS = ("reference", "large-disparity", "motion-spike", "nonlinear", "blender-corpus")

SPIKE_FACTOR = 4


def _reference(rng, n, h, w):
    sy, sx = h / 96.0, w / 160.0
    slab = make_layer(rng, "slab", (44, 56), 12, linear_path(n, (round(58 * sx), round(52 * sy)), (2, 0)),
                      z_order=1, shape="rounded")
    disc = make_layer(rng, "disc", (36, 36), 24, linear_path(n, (round(104 * sx), round(40 * sy)), (-2, 2)),
                      z_order=2, shape="ellipse")
    return [background(rng, h, w), slab, disc]


def _large_disparity(rng, n, h, w):
    mid = make_layer(rng, "wall", (36, 72), 24, linear_path(n, (130, h // 2), (2, 0)),
                     z_order=1, shape="rounded")
    post = make_layer(rng, "post", (44, 12), 36, linear_path(n, (250, h // 2), (0, 0)),
                      z_order=2, shape="rect")
    fg = make_layer(rng, "ball", (28, 40), 48, linear_path(n, (172, h // 2 - 2), (-2, 0)),
                    z_order=3, shape="ellipse")
    return [background(rng, h, w), mid, post, fg]


def spike_steps(n: int) -> list[tuple[float, float]]:
    """Per-interval displacement: 2 px/frame with one 4x interval in the middle."""
    spike = (n - 1) // 2
    return [(2.0 * (SPIKE_FACTOR if i == spike else 1), 0.0) for i in range(n - 1)]


def _motion_spike(rng, n, h, w):
    steps = spike_steps(n)
    runner = make_layer(rng, "runner", (28, 28), 8, path_from_steps((30, h // 2 + 4), steps),
                        z_order=1, shape="rounded")
    buddy = make_layer(rng, "buddy", (20, 24), 16, path_from_steps((46, h // 2 - 12), steps),
                       z_order=2, shape="ellipse")
    return [background(rng, h, w), runner, buddy]


def _nonlinear(rng, n, h, w):
    xs = [2 * round(i * i / 4) for i in range(n)]
    ys = [2 * round(3 * math.sin(i / 2.0)) for i in range(n)]
    kf = [(i, 40 + xs[i], h // 2 + ys[i]) for i in range(n)]
    mover = make_layer(rng, "parabola", (32, 32), 12, kf, z_order=1, shape="ellipse")
    still = make_layer(rng, "block", (40, 24), 20, [(0, w - 40, h // 2)], z_order=2, shape="rect")
    return [background(rng, h, w), mover, still]


def _blender_scene(rng, n, h, w):
    layers = [background(rng, h, w)]
    for k in range(int(rng.integers(1, 3))):
        d = float(4 * rng.integers(1, 5))
        sh = int(2 * rng.integers(6, 12))
        sw = int(2 * rng.integers(6, 12))
        lo_x = int(math.ceil(d / 2 + sw / 2 + 2))
        x = int(2 * rng.integers(lo_x // 2 + 1, (w - lo_x) // 2))
        y = int(rng.integers(sh // 2 + 2, h - sh // 2 - 2))
        layers.append(make_layer(rng, f"sprite{k}", (sh, sw), d, [(0, x, y)], z_order=k + 1,
                                 shape=["rect", "ellipse", "rounded"][int(rng.integers(3))]))
    return layers


_PRESET_DEFAULTS = {
    # name: (frames, height, width, builder, recommended)
    "reference": (9, 96, 160, _reference, {"planes": 6, "iterations": 20000}),
    "large-disparity": (5, 64, 320, _large_disparity, {"planes": 6, "iterations": 6000}),
    "motion-spike": (9, 64, 128, _motion_spike, {"planes": 6, "iterations": 6000}),
    "nonlinear": (9, 96, 160, _nonlinear, {"planes": 6, "iterations": 6000}),
    "blender-corpus": (3, 64, 64, _blender_scene, {"planes": 6, "scenes": 48}),
}


def preset(name: str, seed: int = 0, frames: int | None = None,
           size: tuple[int, int] | None = None, gain_jitter: float = 0.0) -> Scene:
    """Named scene recipe; ``frames``/``size`` override the preset defaults."""
    try:
        n, h, w, builder, rec = _PRESET_DEFAULTS[name]
    except KeyError:
        raise SceneError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    n = frames or n
    h, w = size or (h, w)
    rng = np.random.default_rng([seed, PRESETS.index(name)])
    layers = builder(rng, n, h, w)
    return Scene(name=name, height=h, width=w, n_frames=n, layers=layers, seed=seed,
                 gain_jitter=gain_jitter, recommended=dict(rec))


def regenerate(manifest: dict) -> Scene:
    return preset(manifest["preset"], seed=manifest["seed"], frames=manifest["frames"],
                  size=(manifest["height"], manifest["width"]), gain_jitter=manifest.get("gain_jitter", 0.0))


def blender_corpus(n_scenes: int = 48, seed: int = 0, size: tuple[int, int] = (64, 64),
                   positions: Sequence[float] = (-0.25, 0.0, 0.25)):
    """View triplets (left, right, in-between view) with oracle flows, for blender training."""
    from .decoder import BlendSample
    from .geometry import _np_warp, view_flow
    samples = []
    for k in range(n_scenes):
        scene = preset("blender-corpus", seed=seed * 100003 + k, size=size)
        left = render_scene_at(scene, U_LEFT, 0.0)
        right = render_scene_at(scene, U_RIGHT, 0.0)
        u = float(positions[k % len(positions)])
        mid = render_full(scene, u, 0.0)
        J = mid.disparity[None]
        fl = view_flow(J, u, U_LEFT).data
        fr = view_flow(J, u, U_RIGHT).data
        samples.append(BlendSample(left=left, right=right, target=mid.image,
                                   left_warped=_np_warp(left, fl), right_warped=_np_warp(right, fr),
                                   flow_l=fl, flow_r=fr, c=u - U_LEFT))
    return samples
