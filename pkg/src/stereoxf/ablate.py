"""Paired ablation runs on one scene and the evaluation protocols they share."""

from __future__ import annotations

import logging
import time
from dataclasses import replace

import numpy as np

from .coords import U_LEFT, U_RIGHT
from .metrics import MetricsReport
from .render import Pipeline, RenderOptions, TimeModel, ViewModel, render_time, render_view
from .scenegen import render_scene_at
from .training import ABLATIONS, OptimConfig, optimize_scene, time_jacobians

log = logging.getLogger(__name__)

BORDER = 4


class SuiteError(ValueError):
    pass


def _needs_scene(bundle):
    if bundle.scene is None:
        raise SuiteError("evaluation needs the analytic scene; the manifest does not name a known preset")
    return bundle.scene


def eval_view(bundle, model: ViewModel, opts: RenderOptions = RenderOptions(), u: float = 0.0,
              blender=None) -> MetricsReport:
    """Render view u at every observed frame against the analytic image."""
    scene = _needs_scene(bundle)
    rep = MetricsReport(scene_seed=scene.seed)
    for i in range(bundle.n_frames):
        t = bundle.t(i)
        img = render_view(u, t, bundle.frames[i, 0], bundle.frames[i, 1], model, blender, opts)
        rep.add(u, t, img, render_scene_at(scene, u, t), BORDER)
    return rep


def mid_times(n_frames: int) -> list[float]:
    return [(i + 0.5) / (n_frames - 1) for i in range(n_frames - 1)]


def eval_time(bundle, model: TimeModel, view: int = 0) -> MetricsReport:
    """Render the held-out midpoint of every frame interval of one view."""
    scene = _needs_scene(bundle)
    u = U_LEFT if view == 0 else U_RIGHT
    rep = MetricsReport(scene_seed=scene.seed)
    for t in mid_times(bundle.n_frames):
        rep.add(u, t, render_time(t, bundle.frames[:, view], model), render_scene_at(scene, u, t), BORDER)
    return rep


def eval_pipeline(bundle, pipe: Pipeline) -> tuple[MetricsReport, list[float]]:
    """Held-out sweep: u = 0 at observed frames, both views and u = 0 at interval midpoints."""
    scene = _needs_scene(bundle)
    rep = MetricsReport(scene_seed=scene.seed)
    requests = [(0.0, bundle.t(i)) for i in range(bundle.n_frames)] if pipe.view else []
    for t in mid_times(bundle.n_frames):
        if pipe.time.keys() >= {0, 1}:
            requests += [(U_LEFT, t), (U_RIGHT, t)]
            if pipe.view:
                requests.append((0.0, t))
    seconds = []
    for u, t in requests:
        start = time.perf_counter()
        img = pipe.render_view_time(u, t)
        seconds.append(time.perf_counter() - start)
        rep.add(u, t, img, render_scene_at(scene, u, t), BORDER)
    return rep, seconds


def flow_tracking(bundle, model: TimeModel, view: int = 0) -> dict:
    """Per-frame mean magnitude of the encoded next-frame flow against the guidance.

    Only frames whose next-frame Jacobian is supervised (interior frames)
    are compared. Errors are reported relative to the largest guidance
    magnitude (the spike).
    """
    frames = list(range(1, bundle.n_frames - 1))
    delta = bundle.delta
    enc, guide = [], []
    for i in frames:
        j = time_jacobians(model.net, bundle.t(i), delta, model.mode, model.encoding, ("next",))["next"].data[0]
        enc.append(float(np.sqrt((j ** 2).sum(0)).mean() * delta))
        g = bundle.flow_next[(view, i)]
        guide.append(float(np.sqrt((g ** 2).sum(0)).mean() * delta))
    enc, guide = np.array(enc), np.array(guide)
    spike = int(np.argmax(guide))
    err = np.abs(enc - guide)
    return {"frames": frames, "encoded": enc.tolist(), "guidance": guide.tolist(),
            "spike_frame": frames[spike], "spike_magnitude": float(guide[spike]),
            "mean_rel_error": float(err.mean() / guide[spike]),
            "spike_rel_error": float(err[spike] / guide[spike])}


# -- suites ---------------------------------------------------------------------------------------

def parse_suite(suite: dict) -> dict:
    if not isinstance(suite, dict):
        raise SuiteError("suite must be a JSON object")
    kind = suite.get("kind", "view")
    if kind not in ("view", "time"):
        raise SuiteError(f"suite kind must be view or time, got {kind!r}")
    configs = suite.get("configs")
    if not configs or not isinstance(configs, list):
        raise SuiteError("suite needs a non-empty 'configs' list")
    names = set()
    for c in configs:
        if "name" not in c:
            raise SuiteError("every suite config needs a name")
        if c["name"] in names:
            raise SuiteError(f"duplicate config name {c['name']!r}")
        names.add(c["name"])
        if c.get("ablation") not in (None,) + ABLATIONS:
            raise SuiteError(f"unknown ablation {c.get('ablation')!r} in config {c['name']!r}")
    baseline = suite.get("baseline", configs[0]["name"])
    if baseline not in names:
        raise SuiteError(f"baseline {baseline!r} is not a config name")
    return {"kind": kind, "configs": configs, "baseline": baseline,
            "iterations": int(suite.get("iterations", 6000)), "seed": int(suite.get("seed", 0)),
            "view": suite.get("view", "L")}


def run_suite(bundle, suite: dict, base_cfg: OptimConfig | None = None, on_report=None) -> dict:
    """Optimize every config of the suite on one scene and rank them by mean PSNR."""
    s = parse_suite(suite)
    base_cfg = base_cfg or OptimConfig()
    rows = []
    tracking = {}
    for c in s["configs"]:
        cfg = replace(base_cfg, iterations=s["iterations"], seed=s["seed"], ablation=c.get("ablation"),
                      **{k: v for k, v in c.items() if k in ("n_planes", "merge", "gamma_scale", "lambda_scale")})
        log.info("ablate: %s (%s)", c["name"], c.get("ablation"))
        start = time.perf_counter()
        ck = optimize_scene(s["kind"], bundle, cfg, side=s["view"], on_report=on_report)
        seconds = time.perf_counter() - start
        if s["kind"] == "view":
            rep = eval_view(bundle, ViewModel.from_checkpoint(ck))
        else:
            view = 0 if s["view"] == "L" else 1
            model = TimeModel.from_checkpoint(ck)
            rep = eval_time(bundle, model, view)
            tracking[c["name"]] = flow_tracking(bundle, model, view)
        agg = rep.aggregate()
        rows.append({"name": c["name"], "ablation": c.get("ablation"), "psnr_mean": agg["psnr_mean"],
                     "ssim_mean": agg["ssim_mean"], "train_seconds": seconds,
                     "samples": rep.to_dict()["samples"]})
    base = next(r for r in rows if r["name"] == s["baseline"])
    for r in rows:
        r["delta_psnr"] = r["psnr_mean"] - base["psnr_mean"]
    ordering = [r["name"] for r in sorted(rows, key=lambda r: -r["psnr_mean"])]
    report = {"format_version": 1, "kind": s["kind"], "scene": bundle.manifest.get("preset"),
              "scene_seed": bundle.manifest.get("seed"), "iterations": s["iterations"],
              "baseline": s["baseline"], "results": rows, "ordering": ordering}
    if tracking:
        report["flow_tracking"] = tracking
    return report


def ordering_table(report: dict) -> str:
    """Tab-separated ranking, one config per line."""
    lines = ["rank\tname\tpsnr\tssim\tdelta_psnr"]
    by_name = {r["name"]: r for r in report["results"]}
    for k, name in enumerate(report["ordering"], 1):
        r = by_name[name]
        lines.append(f"{k}\t{name}\t{r['psnr_mean']:.2f}\t{r['ssim_mean']:.4f}\t{r['delta_psnr']:+.2f}")
    return "\n".join(lines)
