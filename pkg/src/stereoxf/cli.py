"""Command-line entry point: generate, optimize, render, eval, train-blender, ablate.

Failures print one line ``error: <category>: <message>`` to stderr and exit
with the category's code.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("stereoxf")

EXIT_CODES = {
    "usage": 2,
    "missing-file": 3,
    "malformed-manifest": 4,
    "malformed-file": 5,
    "invalid-argument": 6,
    "training-diverged": 7,
    "render-error": 8,
    "internal": 70,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 96x160, got {text!r}") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    from .scenegen import PRESETS
    from .training import ABLATIONS

    p = _Parser(prog="stereoxf", description="Stereo video view-time interpolation with coordinate decoders")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic scene bundle")
    g.add_argument("--preset", required=True, choices=PRESETS)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int)
    g.add_argument("--size", type=_size, help="HxW")
    g.add_argument("--gain-jitter", type=float, default=0.0, help="per-frame global gain variation")
    g.add_argument("--samples", type=int, default=48, help="blender-corpus: number of triplets")

    o = sub.add_parser("optimize", help="fit a view or time decoder to a scene")
    o.add_argument("--scene", required=True)
    o.add_argument("--kind", required=True, choices=("view", "time"))
    o.add_argument("--out", required=True)
    o.add_argument("--iters", type=int, default=20000)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--planes", type=int, default=6)
    o.add_argument("--ablate", choices=ABLATIONS)
    o.add_argument("--side", choices=("L", "R"), default="L", help="view whose time decoder is fitted")
    o.add_argument("--resume", help="continue from a checkpoint")
    o.add_argument("--log-every", type=int, default=100)
    o.add_argument("--no-band-limit", action="store_true",
                   help="keep positional-encoding frequencies that alias at the frame spacing")

    r = sub.add_parser("render", help="render one view-time coordinate to PNG")
    _add_model_args(r)
    r.add_argument("--u", type=float, required=True)
    r.add_argument("--t", type=float, required=True)
    r.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="held-out mid view/time sweep against the analytic scene")
    _add_model_args(e)
    e.add_argument("--out", required=True)

    b = sub.add_parser("train-blender", help="fit the blending UNet on a synthetic corpus")
    b.add_argument("--corpus", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--iters", type=int, default=10000)
    b.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="run paired configs and rank them")
    a.add_argument("--scene", required=True)
    a.add_argument("--suite", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--iters", type=int, help="override the suite's iteration count")
    return p


def _add_model_args(p):
    p.add_argument("--scene", required=True)
    p.add_argument("--view", dest="view_ckpt")
    p.add_argument("--timeL", dest="time_l")
    p.add_argument("--timeR", dest="time_r")
    p.add_argument("--blender")
    p.add_argument("--blend", choices=("learned", "consistency"))
    p.add_argument("--residual-mask", choices=("learned", "always", "never"), default="learned",
                   help="which weight maps the residual edge mask is applied to")


# -- commands -------------------------------------------------------------------------------------

def cmd_generate(args) -> None:
    from .formats import save_bundle, write_json
    from .scenegen import blender_corpus, emit_bundle, make_manifest, preset

    if args.frames is not None and args.frames < 3 and args.preset != "blender-corpus":
        raise CliError("invalid-argument", "a scene needs at least three frames")
    if args.preset == "blender-corpus":
        size = args.size or (64, 64)
        corpus = blender_corpus(args.samples, seed=args.seed, size=size)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_corpus(out / "corpus.npz", corpus)
        manifest = make_manifest(preset("blender-corpus", seed=args.seed, size=size))
        manifest["samples"] = len(corpus)
        manifest["corpus"] = "corpus.npz"
        write_json(out / "manifest.json", manifest)
        print(json.dumps({"out": str(out), "samples": len(corpus)}))
        return
    scene = preset(args.preset, seed=args.seed, frames=args.frames, size=args.size, gain_jitter=args.gain_jitter)
    bundle = emit_bundle(scene)
    save_bundle(bundle, args.out)
    print(json.dumps({"out": args.out, "frames": scene.n_frames, "height": scene.height,
                      "width": scene.width, "max_disparity": scene.max_disparity}))


CORPUS_FIELDS = ("left", "right", "target", "left_warped", "right_warped", "flow_l", "flow_r")


def save_corpus(path, corpus) -> None:
    from .formats import atomic_write
    arrays = {f: np.stack([getattr(s, f) for s in corpus]) for f in CORPUS_FIELDS}
    arrays["c"] = np.array([s.c for s in corpus], dtype=np.float32)
    with atomic_write(path) as fh:
        np.savez(fh, **arrays)


def load_corpus(corpus_dir):
    from .decoder import BlendSample
    path = Path(corpus_dir)
    if path.is_dir():
        path = path / "corpus.npz"
    if not path.is_file():
        raise FileNotFoundError(f"no blender corpus at {path}")
    with np.load(path) as z:
        missing = [f for f in CORPUS_FIELDS + ("c",) if f not in z]
        if missing:
            raise CliError("malformed-file", f"corpus lacks {', '.join(missing)}")
        n = len(z["c"])
        return [BlendSample(**{f: z[f][k] for f in CORPUS_FIELDS}, c=float(z["c"][k])) for k in range(n)]


def cmd_optimize(args) -> None:
    from . import checkpoint
    from .formats import load_bundle
    from .coords import EncodingConfig
    from .training import OptimConfig, optimize_scene

    if args.iters < 0:
        raise CliError("invalid-argument", "--iters must be >= 0")
    if args.planes < 1:
        raise CliError("invalid-argument", "--planes must be >= 1")
    bundle = load_bundle(args.scene)
    cfg = OptimConfig(iterations=args.iters, seed=args.seed, n_planes=args.planes, ablation=args.ablate,
                      log_every=args.log_every, encoding=EncodingConfig(band_limit=not args.no_band_limit))
    resume = checkpoint.load(args.resume) if args.resume else None
    ck = optimize_scene(args.kind, bundle, cfg, side=args.side, resume=resume,
                        on_report=lambda r: print(r.to_json(), flush=True))
    checkpoint.save(args.out, ck)
    log.info("wrote %s", args.out)


def _pipeline(args, bundle):
    from . import checkpoint
    from .render import Pipeline, RenderOptions

    def opt_load(path):
        return checkpoint.load(path) if path else None

    mode = args.blend or ("learned" if args.blender else "consistency")
    return Pipeline.from_checkpoints(bundle.frames, view=opt_load(args.view_ckpt), time_l=opt_load(args.time_l),
                                     time_r=opt_load(args.time_r), blender=opt_load(args.blender),
                                     opts=RenderOptions(blend_mode=mode, residual_mask=args.residual_mask))


def cmd_render(args) -> None:
    from .formats import load_bundle, write_png

    bundle = load_bundle(args.scene, with_scene=False)
    pipe = _pipeline(args, bundle)
    img = pipe.render_view_time(args.u, args.t)
    write_png(args.out, img)
    print(json.dumps({"out": args.out, "u": args.u, "t": args.t}))


def cmd_eval(args) -> None:
    from .ablate import eval_pipeline
    from .formats import load_bundle, write_json
    from .plots import plot_metrics

    bundle = load_bundle(args.scene)
    pipe = _pipeline(args, bundle)
    if pipe.view is None and len(pipe.time) < 2:
        raise CliError("missing-file", "eval needs a view checkpoint or both time checkpoints")
    rep, seconds = eval_pipeline(bundle, pipe)
    metrics = rep.to_dict()
    metrics["render_seconds_mean"] = float(np.mean(seconds)) if seconds else None
    write_json(args.out, metrics)
    plot_metrics(metrics, Path(args.out).with_suffix(".png"))
    print(json.dumps(metrics["aggregate"]))


def cmd_train_blender(args) -> None:
    from . import checkpoint
    from .decoder import BlenderConfig, BlenderTrainConfig, blender_checkpoint, train_blender

    corpus = load_corpus(args.corpus)
    cfg = BlenderTrainConfig(iterations=args.iters, seed=args.seed, blender=BlenderConfig(seed=args.seed))
    net, state = train_blender(corpus, cfg, on_log=lambda it, loss: print(
        json.dumps({"iteration": it, "loss": loss}), flush=True))
    checkpoint.save(args.out, blender_checkpoint(net, state, cfg))


def cmd_ablate(args) -> None:
    from .ablate import ordering_table, run_suite
    from .formats import load_bundle, read_json, write_json
    from .plots import plot_ablation, plot_flow_tracking

    bundle = load_bundle(args.scene)
    suite = read_json(args.suite)
    if args.iters is not None:
        suite["iterations"] = args.iters
    report = run_suite(bundle, suite)
    write_json(args.out, report)
    out = Path(args.out)
    plot_ablation(report, out.with_suffix(".png"))
    if "flow_tracking" in report:
        plot_flow_tracking(report["flow_tracking"], out.with_name(out.stem + "_flow.png"))
    print(ordering_table(report))


COMMANDS = {"generate": cmd_generate, "optimize": cmd_optimize, "render": cmd_render, "eval": cmd_eval,
            "train-blender": cmd_train_blender, "ablate": cmd_ablate}


def _classify(exc: BaseException) -> str:
    from .ablate import SuiteError
    from .checkpoint import CheckpointError
    from .formats import FormatError
    from .render import RenderError
    from .scenegen import SceneError
    from .training import GuidanceError, TrainingDiverged

    if isinstance(exc, FileNotFoundError):
        return "missing-file"
    if isinstance(exc, CheckpointError):
        return "malformed-file"
    if isinstance(exc, FormatError):
        return "malformed-manifest" if "manifest" in str(exc) else "malformed-file"
    if isinstance(exc, TrainingDiverged):
        return "training-diverged"
    if isinstance(exc, RenderError):
        return "render-error"
    if isinstance(exc, (SceneError, GuidanceError, SuiteError, ValueError)):
        return "invalid-argument"
    return "internal"


@contextlib.contextmanager
def _thread_limit():
    n = os.environ.get("SXF_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=max(1, int(n))):
        yield


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            COMMANDS[args.command](args)
        return 0
    except CliError as exc:
        category, message = exc.category, str(exc)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one categorized line
        category, message = _classify(exc), str(exc)
        log.debug("failure", exc_info=True)
    message = " ".join(message.split())
    print(f"error: {category}: {message}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
