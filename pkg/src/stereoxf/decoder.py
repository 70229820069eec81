"""Coordinate-conditioned convolutional decoders and the blending UNet."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class DecoderConfig:
    out_height: int
    out_width: int
    out_channels: int
    coord_dim: int
    capacity: int = 16
    n_levels: int = 4
    plane_disparities: tuple[float, ...] = ()
    head_init_scale: float = 0.1
    zero_head: bool = False
    output_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.plane_disparities = tuple(float(d) for d in self.plane_disparities)
        f = 2 ** self.n_levels
        if self.out_height % f or self.out_width % f:
            raise ValueError(
                f"output size {self.out_height}x{self.out_width} not divisible by 2^{self.n_levels}")
        if self.capacity < 1 or self.out_channels < 1 or self.n_levels < 0:
            raise ValueError("capacity, out_channels must be >= 1 and n_levels >= 0")
        if self.plane_disparities and len(self.plane_disparities) != self.out_channels:
            raise ValueError("one plane disparity per output channel required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["plane_disparities"] = list(self.plane_disparities)
        return d

    @property
    def widths(self) -> list[int]:
        """Channel count of the base grid followed by each upsampling block."""
        top = self.capacity * 8
        return [top] + [max(self.capacity, top >> (i + 1)) for i in range(self.n_levels)]


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = np.sqrt(2.0)):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Network:
    """Holds named parameters; subclasses implement ``forward``."""

    params: dict[str, Tensor]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            arr = state[k]
            if arr.shape != p.shape:
                raise T.ShapeError(f"load {k}", p.shape, arr.shape)
            p.data = np.array(arr, dtype=np.float32)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


class CoordDecoder(Network):
    """Learned base grid, modulated per channel by the coordinate, then upsampled.

    The coordinate vector enters through two 1x1 heads that scale and shift
    each channel of a learned low-resolution feature grid; L blocks of
    [2x bilinear upsample, 3x3 conv, LeakyReLU] follow, and a linear 3x3
    conv produces the output channels.
    """

    def __init__(self, cfg: DecoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        widths = cfg.widths
        h0 = cfg.out_height >> cfg.n_levels
        w0 = cfg.out_width >> cfg.n_levels
        c0, d = widths[0], cfg.coord_dim
        p: dict[str, Tensor] = {}
        p["grid"] = _param(rng.uniform(-1.0, 1.0, (1, c0, h0, w0)))
        p["mod_scale.w"] = _param(_kaiming_uniform(rng, (c0, d, 1, 1), d, gain=1.0))
        p["mod_scale.b"] = _param(_kaiming_uniform(rng, (c0,), d, gain=1.0 / np.sqrt(3.0)))
        p["mod_shift.w"] = _param(_kaiming_uniform(rng, (c0, d, 1, 1), d, gain=1.0))
        p["mod_shift.b"] = _param(_kaiming_uniform(rng, (c0,), d, gain=1.0 / np.sqrt(3.0)))
        for i in range(cfg.n_levels):
            cin, cout = widths[i], widths[i + 1]
            fan = cin * 9
            p[f"up{i}.w"] = _param(_kaiming_uniform(rng, (cout, cin, 3, 3), fan))
            p[f"up{i}.b"] = _param(_kaiming_uniform(rng, (cout,), fan, gain=1.0 / np.sqrt(3.0)))
        k, cl = cfg.out_channels, widths[-1]
        if cfg.zero_head:
            p["head.w"] = _param(np.zeros((k, cl, 3, 3)))
            p["head.b"] = _param(np.zeros(k))
        else:
            p["head.w"] = _param(cfg.head_init_scale * _kaiming_uniform(rng, (k, cl, 3, 3), cl * 9))
            bias = np.array(cfg.plane_disparities) if cfg.plane_disparities else np.zeros(k)
            p["head.b"] = _param(bias)
        self.params = p

    def forward(self, coord: np.ndarray | Tensor) -> Tensor:
        p = self.params
        c = T.as_tensor(coord)
        if c.size != self.cfg.coord_dim:
            raise T.ShapeError("decoder coordinate", (self.cfg.coord_dim,), c.shape)
        c = T.reshape(c, (1, self.cfg.coord_dim, 1, 1))
        scale = T.conv2d(c, p["mod_scale.w"], p["mod_scale.b"])
        shift = T.conv2d(c, p["mod_shift.w"], p["mod_shift.b"])
        x = T.leaky_relu(p["grid"] * (scale + 1.0) + shift)
        for i in range(self.cfg.n_levels):
            x = T.upsample_bilinear2x(x)
            x = T.leaky_relu(T.conv2d(x, p[f"up{i}.w"], p[f"up{i}.b"], padding=1))
        out = T.conv2d(x, p["head.w"], p["head.b"], padding=1)
        return out if self.cfg.output_scale == 1.0 else out * float(self.cfg.output_scale)

    __call__ = forward


def _param(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=True)


def build_view_decoder(cfg: DecoderConfig, plane_disparities: Sequence[float]) -> CoordDecoder:
    """Decoder emitting one disparity plane per anchor, head bias set to the anchor."""
    if len(plane_disparities) != cfg.out_channels:
        raise ValueError(
            f"{len(plane_disparities)} plane disparities for {cfg.out_channels} output channels")
    cfg.plane_disparities = tuple(float(d) for d in plane_disparities)
    return CoordDecoder(cfg)


def build_time_decoder(cfg: DecoderConfig) -> CoordDecoder:
    """Decoder emitting a 2-channel time Jacobian (4 channels for two-head variants)."""
    if cfg.out_channels not in (2, 4):
        raise ValueError("time decoders emit 2 (or 4 for two heads) channels")
    return CoordDecoder(cfg)


# -- blending UNet -------------------------------------------------------------------

BLENDER_IN_CHANNELS = 16


@dataclass
class BlenderConfig:
    in_channels: int = BLENDER_IN_CHANNELS
    levels: int = 5
    base_channels: int = 32
    max_multiplier: int = 4
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * min(2 ** i, self.max_multiplier) for i in range(self.levels + 1)]


class BlenderUNet(Network):
    """UNet mapping the 16-channel stack to a one-channel weight map in (0, 1)."""

    def __init__(self, cfg: BlenderConfig = BlenderConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w = cfg.widths
        p: dict[str, Tensor] = {}

        def conv(name, cin, cout):
            p[f"{name}.w"] = _param(_kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9))
            p[f"{name}.b"] = _param(np.zeros(cout))

        conv("in0", cfg.in_channels, w[0])
        conv("in1", w[0], w[0])
        for i in range(1, cfg.levels + 1):
            conv(f"down{i}", w[i - 1], w[i])
            conv(f"enc{i}", w[i], w[i])
        for i in range(cfg.levels, 0, -1):
            conv(f"dec{i}", w[i] + w[i - 1], w[i - 1])
        p["out.w"] = _param(0.1 * _kaiming_uniform(rng, (1, w[0], 3, 3), w[0] * 9, gain=1.0))
        p["out.b"] = _param(np.zeros(1))
        self.params = p

    def forward(self, x: Tensor) -> Tensor:
        p, lv = self.params, self.cfg.levels
        if x.shape[1] != self.cfg.in_channels:
            raise T.ShapeError("blender input channels", (self.cfg.in_channels,), (x.shape[1],))
        f = 2 ** lv
        if x.shape[2] % f or x.shape[3] % f:
            raise T.ShapeError(f"blender input (H, W must divide {f})", x.shape)

        def cv(name, h, stride=1):
            return T.leaky_relu(T.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=1))

        h = cv("in1", cv("in0", x))
        skips = [h]
        for i in range(1, lv + 1):
            h = cv(f"enc{i}", cv(f"down{i}", h, stride=2))
            skips.append(h)
        for i in range(lv, 0, -1):
            h = T.upsample_bilinear2x(h)
            h = cv(f"dec{i}", T.concat([h, skips[i - 1]], axis=1))
        return T.sigmoid(T.conv2d(h, p["out.w"], p["out.b"], padding=1))

    __call__ = forward


def _as_two_channels(flow: np.ndarray) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim == 3:
        flow = flow[None]
    if flow.shape[1] == 1:
        return np.repeat(flow, 2, axis=1)
    if flow.shape[1] != 2:
        raise T.ShapeError("blender flow channels", (2,), flow.shape)
    return flow


def _batched(img) -> np.ndarray:
    a = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float32)
    return a[None] if a.ndim == 3 else a


def blender_input(left_src, right_src, left_warped, right_warped, flow_l, flow_r) -> np.ndarray:
    """Stack into the fixed 16-channel layout, padded (edge) to a multiple of 32."""
    parts = [_batched(left_src), _batched(right_src), _batched(left_warped), _batched(right_warped),
             _as_two_channels(flow_l), _as_two_channels(flow_r)]
    shapes = [a.shape for a in parts]
    if len({(s[0], s[2], s[3]) for s in shapes}) != 1:
        raise T.ShapeError("blender inputs", *shapes)
    x = np.concatenate(parts, axis=1)
    if x.shape[1] != BLENDER_IN_CHANNELS:
        raise T.ShapeError("blender input channels", (BLENDER_IN_CHANNELS,), (x.shape[1],))
    return x


def _pad_to(x: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = x.shape[2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return x, (h, w)


def blender_forward(net: BlenderUNet, left_src, right_src, left_warped, right_warped,
                    flow_l, flow_r) -> Tensor:
    """Weight map W_l in (0, 1) for the left warp; the right weight is 1 - W_l."""
    x = blender_input(left_src, right_src, left_warped, right_warped, flow_l, flow_r)
    xp, (h, w) = _pad_to(x, 2 ** net.cfg.levels)
    out = net(Tensor(xp))
    if xp.shape != x.shape:
        out = out[:, :, :h, :w]
    return out


# -- blender training -----------------------------------------------------------------

@dataclass
class BlendSample:
    """One view triplet: sources, target and the flows from target to each source."""

    left: np.ndarray          # (3, H, W)
    right: np.ndarray
    target: np.ndarray
    left_warped: np.ndarray
    right_warped: np.ndarray
    flow_l: np.ndarray        # (1 or 2, H, W), displacement from target pixel into left
    flow_r: np.ndarray
    c: float                  # blend position in [0, 1], 0 at the left view


@dataclass
class BlenderTrainConfig:
    iterations: int = 10000
    lr: float = 1e-4
    recon_weight: float = 100.0
    seed: int = 0
    log_every: int = 500
    blender: BlenderConfig = field(default_factory=BlenderConfig)


def blended_image(net: BlenderUNet, s: BlendSample) -> Tensor:
    from .geometry import blend
    wl = blender_forward(net, s.left, s.right, s.left_warped, s.right_warped, s.flow_l, s.flow_r)
    wr = 1.0 - wl
    return blend(Tensor(s.left_warped[None]), Tensor(s.right_warped[None]), wl, wr, s.c)


def blender_loss(net: BlenderUNet, s: BlendSample, recon_weight: float = 100.0) -> Tensor:
    return recon_weight * T.mean_abs(blended_image(net, s) - Tensor(s.target[None]))


def train_blender(corpus: Sequence[BlendSample], cfg: BlenderTrainConfig = BlenderTrainConfig(),
                  on_log=None) -> tuple[BlenderUNet, T.AdamState]:
    """Fit the blending UNet to minimise the weighted L1 reconstruction loss."""
    if not corpus:
        raise ValueError("empty blender corpus")
    net = BlenderUNet(cfg.blender)
    opt = T.Adam(net.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    for it in range(cfg.iterations):
        s = corpus[int(rng.integers(len(corpus)))]
        opt.zero_grad()
        loss = blender_loss(net, s, cfg.recon_weight)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite blender loss at iteration {it}")
        loss.backward()
        opt.step()
        if on_log is not None and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            on_log(it, loss.item())
    return net, opt.state


def blender_checkpoint(net: BlenderUNet, state: T.AdamState | None, train_cfg: BlenderTrainConfig | None = None):
    from .checkpoint import Checkpoint
    config = {"kind": "blender", "blender": net.cfg.to_dict()}
    if train_cfg is not None:
        config["train"] = {k: v for k, v in asdict(train_cfg).items() if k != "blender"}
    return Checkpoint(config, net.state_dict(), state)


def blender_from_checkpoint(ckpt) -> BlenderUNet:
    if ckpt.kind != "blender":
        raise ValueError(f"expected a blender checkpoint, got kind {ckpt.kind!r}")
    net = BlenderUNet(BlenderConfig(**ckpt.config["blender"]))
    net.load_state_dict(ckpt.params)
    return net
