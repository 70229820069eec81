import numpy as np
import pytest

from stereoxf.coords import EncodingConfig, assemble_coord, non_uniform_tau
from stereoxf.decoder import BlenderConfig, BlenderUNet, CoordDecoder, DecoderConfig
from stereoxf.formats import from_uint8, to_uint8
from stereoxf.metrics import psnr
from stereoxf.render import (Pipeline, RenderError, RenderOptions, TimeModel, frame_interval, render_time,
                             render_view)
from stereoxf.scenegen import Scene, background, emit_bundle, flow_between, make_layer, preset, render_full
from stereoxf.tensor import Tensor
from stereoxf.training import OptimConfig, optimize_scene
from stereoxf.coords import coord_dim


@pytest.fixture(scope="module")
def small():
    rng = np.random.default_rng(4)
    layers = [background(rng, 32, 64),
              make_layer(rng, "box", (10, 12), 8.0, [(0, 24, 16), (4, 36, 16)], z_order=1)]
    return emit_bundle(Scene("custom", 32, 64, 5, layers))


@pytest.fixture(scope="module")
def ckpts(small):
    cfg = OptimConfig(iterations=3, capacity=2)
    return (optimize_scene("view", small, cfg), optimize_scene("time", small, cfg, side="L"),
            optimize_scene("time", small, cfg, side="R"))


@pytest.fixture(scope="module")
def pipe(small, ckpts):
    return Pipeline.from_checkpoints(small.frames, *ckpts)


def test_view_endpoints_are_source_images(small, pipe):
    for i in (0, 2, 4):
        np.testing.assert_array_equal(pipe.render_view(-0.5, small.t(i)), small.frames[i, 0])
        np.testing.assert_array_equal(pipe.render_view(0.5, small.t(i)), small.frames[i, 1])


def test_time_endpoints_are_frames(small, pipe):
    for v in (0, 1):
        for i in range(small.n_frames):
            np.testing.assert_array_equal(pipe.render_time(v, small.t(i)), small.frames[i, v])


def test_corner_fixed_points_after_png_round_trip(small, pipe):
    for i in (1, 2):
        for v, u in ((0, -0.5), (1, 0.5)):
            out = from_uint8(to_uint8(pipe.render_view_time(u, small.t(i))))
            assert np.abs(out - small.frames[i, v]).max() <= 1e-6


def test_render_is_deterministic(pipe):
    np.testing.assert_array_equal(pipe.render_view_time(0.1, 0.3), pipe.render_view_time(0.1, 0.3))


def test_static_scene_time_render_is_the_frame():
    rng = np.random.default_rng(5)
    layers = [background(rng, 32, 64), make_layer(rng, "box", (10, 12), 6.0, [(0, 30, 16)], z_order=1)]
    b = emit_bundle(Scene("custom", 32, 64, 4, layers))
    net = CoordDecoder(DecoderConfig(32, 64, 2, coord_dim("time-net"), capacity=2, zero_head=True))
    model = TimeModel(net, "non-uniform", EncodingConfig())
    for t in (0.1, 0.5, 0.77):
        np.testing.assert_array_equal(render_time(t, b.frames[:, 0], model), b.frames[0, 0])


class _Lookup:
    """Time 'decoder' returning oracle Jacobians for known coordinates."""

    def __init__(self, table):
        self.table = table

    def __call__(self, coord):
        return Tensor(self.table[np.asarray(coord, np.float32).tobytes()][None])


def _velocity(scene, u, s, delta):
    ids = render_full(scene, u, s).layer_id
    step = delta if s + delta <= 1.0 else -delta
    return flow_between(scene, u, s, s + step, ids) / step


def test_linear_motion_midpoint_with_oracle_jacobians():
    s = preset("reference")
    b = emit_bundle(s)
    enc, delta, i = EncodingConfig(), b.delta, 3
    t_i, t_j = b.t(i), b.t(i + 1)
    t = (t_i + t_j) / 2
    key = lambda tau: assemble_coord("time-net", tau, enc).tobytes()
    table = {key(t): _velocity(s, -0.5, t, delta),
             key(non_uniform_tau(t, "prev", delta, enc)): _velocity(s, -0.5, t, delta),
             key(t_i): _velocity(s, -0.5, t_i, delta),
             key(non_uniform_tau(t_j, "prev", delta, enc)): _velocity(s, -0.5, t_j, delta)}
    out = render_time(t, b.frames[:, 0], TimeModel(_Lookup(table), "non-uniform", enc))
    gt = render_full(s, -0.5, t)
    # stay away from pixels that change visibility over the interval
    ids = [render_full(s, -0.5, x).layer_id for x in (t_i, t, t_j)]
    ok = (ids[0] == ids[1]) & (ids[2] == ids[1])
    for _ in range(2):
        ok[1:] &= ok[:-1]
        ok[:-1] &= ok[1:]
        ok[:, 1:] &= ok[:, :-1]
        ok[:, :-1] &= ok[:, 1:]
    assert ok.mean() > 0.8
    assert psnr(out[:, ok], gt.image[:, ok]) >= 35.0


def test_frame_interval():
    assert frame_interval(0.0, 5) == (0, 0.0)
    assert frame_interval(1.0, 5) == (3, 1.0)
    i, c = frame_interval(0.3, 5)
    assert i == 1 and c == pytest.approx(0.2)
    assert frame_interval(0.6, 2) == (0, pytest.approx(0.6))
    with pytest.raises(RenderError):
        frame_interval(1.2, 5)


def test_two_frame_video_any_t(small, ckpts):
    frames = small.frames[[0, 4]]
    from stereoxf.render import TimeModel as TM
    model = TM.from_checkpoint(ckpts[1])
    assert render_time(0.4, frames[:, 0], model).shape == (3, 32, 64)


def test_learned_blend_mode(small, ckpts):
    blender = BlenderUNet(BlenderConfig(levels=2, base_channels=4))
    from stereoxf.render import ViewModel
    vm = ViewModel.from_checkpoint(ckpts[0])
    opts = RenderOptions(blend_mode="learned")
    out = render_view(0.0, 0.0, small.frames[0, 0], small.frames[0, 1], vm, blender, opts)
    assert out.shape == (3, 32, 64) and np.isfinite(out).all()
    np.testing.assert_array_equal(render_view(-0.5, 0.0, small.frames[0, 0], small.frames[0, 1], vm,
                                              blender, opts), small.frames[0, 0])
    with pytest.raises(RenderError):
        render_view(0.0, 0.0, small.frames[0, 0], small.frames[0, 1], vm, None, opts)


def test_identical_sources_blend_to_themselves(small, ckpts):
    from stereoxf.render import ViewModel
    vm = ViewModel.from_checkpoint(ckpts[0])
    flat = np.full((3, 32, 64), 0.3, np.float32)
    np.testing.assert_array_equal(render_view(0.2, 0.0, flat, flat, vm), flat)


def test_pipeline_errors(small, ckpts):
    p = Pipeline.from_checkpoints(small.frames, view=ckpts[0])
    with pytest.raises(RenderError):
        p.render_view(0.7, 0.0)
    with pytest.raises(RenderError):
        p.render_view(0.0, 0.1)
    with pytest.raises(RenderError):
        p.render_view_time(0.0, 0.3)
    with pytest.raises(RenderError):
        Pipeline(small.frames).render_view(0.0, 0.0)
    with pytest.raises(RenderError):
        Pipeline.from_checkpoints(small.frames, time_l=ckpts[2])
    with pytest.raises(RenderError):
        Pipeline.from_checkpoints(small.frames, view=ckpts[1])
    with pytest.raises(RenderError):
        RenderOptions(blend_mode="average")


def test_residual_mask_modes():
    assert not RenderOptions().masks()
    assert RenderOptions(blend_mode="learned").masks()
    assert RenderOptions(residual_mask="always").masks()
    assert not RenderOptions(blend_mode="learned", residual_mask="never").masks()
    with pytest.raises(RenderError):
        RenderOptions(residual_mask="sometimes")
