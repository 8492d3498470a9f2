"""Finite-difference verification suite for every differentiable loss.

Each probe names a loss, builds a seeded random evaluation point, and
compares the analytic gradient against central differences over every
coordinate of every input. The suite is the programmatic face of the
`gradcheck` subcommand and of the automated gradient acceptance check:
all probes at twenty seeded points each, step 1e-5, worst relative error
below 1e-4.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .assignment import qbs_assign
from .config import rng_for
from .dem import DemParams, FrameOutput, QuerySlot, dem_probe_loss
from .geometry import BBox
from .losses import (LossWeights, ProjectionHeads, collective_loss,
                     collective_loss_extended, detection_loss, gradcheck,
                     loss_focal, loss_i2t, loss_i2tce, loss_t2i,
                     loss_t2i_multipos, loss_triplet)
from .scene import FrameTruth, TruthObject


def _heads(rng) -> ProjectionHeads:
    return ProjectionHeads.create(4, 4, 3, rng)


def _probe_truth(rng, frame: int = 1, n: int = 2) -> FrameTruth:
    objs = tuple(TruthObject(
        identity=i + 1,
        box=BBox(0.2 + 0.22 * i, 0.3 + 0.14 * i, 0.1, 0.16),
        visibility=1.0, latent=rng.normal(size=4)) for i in range(n))
    return FrameTruth(frame=frame, objects=objs)


def _probe_frame(rng, truth: FrameTruth, live_ids=()) -> FrameOutput:
    slots = []
    visible = {o.identity: o for o in truth.visible()}
    for identity in sorted(live_ids):
        box = visible[identity].box
        slots.append(QuerySlot(
            kind="track",
            box=BBox(box.cx + 0.01, box.cy - 0.01, box.w, box.h),
            class_logit=float(rng.normal(loc=2.0, scale=0.5)),
            embed=rng.normal(size=4), output=rng.normal(size=6),
            identity=identity))
    for identity, obj in sorted(visible.items()):
        slots.append(QuerySlot(
            kind="detect",
            box=BBox(obj.box.cx - 0.008, obj.box.cy + 0.012,
                     obj.box.w * 1.04, obj.box.h * 0.97),
            class_logit=float(rng.normal(loc=1.5, scale=0.5)),
            embed=rng.normal(size=4), output=rng.normal(size=6)))
    slots.append(QuerySlot(
        kind="detect",
        box=BBox(rng.uniform(0.6, 0.85), rng.uniform(0.6, 0.85),
                 rng.uniform(0.05, 0.1), rng.uniform(0.05, 0.1)),
        class_logit=float(rng.normal(loc=-1.0, scale=0.5)),
        embed=rng.normal(size=4), output=rng.normal(size=6)))
    return FrameOutput(frame=truth.frame, slots=tuple(slots))


def _rebuild(frame: FrameOutput, logits: np.ndarray, boxes: np.ndarray
             ) -> FrameOutput:
    slots = tuple(
        QuerySlot(kind=s.kind, box=BBox(*boxes[k]),
                  class_logit=float(logits[k]), embed=s.embed,
                  output=s.output, identity=s.identity)
        for k, s in enumerate(frame.slots))
    return FrameOutput(frame=frame.frame, slots=slots)


# -- probe builders: seed -> (fn, params) -------------------------------------------


def _build_i2t(seed: int):
    rng = rng_for(seed, "probe-i2t")
    heads = _heads(rng)

    def fn(params):
        rebuilt = ProjectionHeads(w_v=params["proj_v"], w_t=params["proj_t"])
        return loss_i2t(params["v"], params["t"], rebuilt)

    return fn, {"v": rng.normal(size=(3, 4)), "t": rng.normal(size=(3, 4)),
                "proj_v": heads.w_v, "proj_t": heads.w_t}


def _build_t2i(seed: int):
    rng = rng_for(seed, "probe-t2i")
    heads = _heads(rng)

    def fn(params):
        rebuilt = ProjectionHeads(w_v=params["proj_v"], w_t=params["proj_t"])
        return loss_t2i(params["v"], params["t"], rebuilt)

    return fn, {"v": rng.normal(size=(3, 4)), "t": rng.normal(size=(3, 4)),
                "proj_v": heads.w_v, "proj_t": heads.w_t}


def _build_multipos(seed: int):
    rng = rng_for(seed, "probe-mp")
    heads = _heads(rng)
    ids = [1, 2, 1, 3]

    def fn(params):
        rebuilt = ProjectionHeads(w_v=params["proj_v"], w_t=params["proj_t"])
        return loss_t2i_multipos(params["v"], params["t"], ids, rebuilt)

    return fn, {"v": rng.normal(size=(4, 4)), "t": rng.normal(size=(4, 4)),
                "proj_v": heads.w_v, "proj_t": heads.w_t}


def _build_triplet(seed: int):
    rng = rng_for(seed, "probe-tri")
    ids = [1, 1, 2, 3]

    def fn(params):
        value, grad, _ = loss_triplet(params["e"], ids, margin=0.3)
        return value, grad

    return fn, {"e": 0.8 * rng.normal(size=(4, 3))}


def _build_i2tce(seed: int):
    rng = rng_for(seed, "probe-ce")
    heads = _heads(rng)

    def fn(params):
        rebuilt = ProjectionHeads(w_v=params["proj_v"], w_t=params["proj_t"])
        return loss_i2tce(params["v"].reshape(-1), params["texts"], 2, 0.1,
                          rebuilt)

    return fn, {"v": rng.normal(size=4), "texts": rng.normal(size=(4, 4)),
                "proj_v": heads.w_v, "proj_t": heads.w_t}


def _build_focal(seed: int):
    rng = rng_for(seed, "probe-focal")
    targets = (rng.uniform(size=6) < 0.5).astype(np.float64)

    def fn(params):
        return loss_focal(params["logits"], targets)

    return fn, {"logits": rng.normal(size=6)}


def _build_detection(seed: int):
    rng = rng_for(seed, "probe-det")
    weights = LossWeights()
    truth = _probe_truth(rng)
    frame = _probe_frame(rng, truth, live_ids=(1,))
    labels = qbs_assign(frame, truth, {1}, weights)

    def fn(params):
        rebuilt = _rebuild(frame, params["cls_logits"], params["boxes"])
        breakdown, grad = detection_loss(rebuilt, labels, weights)
        return breakdown.total, grad

    return fn, {"cls_logits": frame.class_logits, "boxes": frame.boxes}


def _build_clip(seed: int):
    rng = rng_for(seed, "probe-clip")
    weights = LossWeights()
    truths = [_probe_truth(rng, frame=f, n=2) for f in (1, 2)]
    frames = [_probe_frame(rng, truths[0]),
              _probe_frame(rng, truths[1], live_ids=(1, 2))]

    def fn(params):
        rebuilt = [_rebuild(frames[k], params[f"frame{k:02d}.cls_logits"],
                            params[f"frame{k:02d}.boxes"])
                   for k in range(2)]
        breakdown, grad = collective_loss(rebuilt, truths, weights,
                                          qbs_assign)
        return breakdown.total, grad

    params = {}
    for k, frame in enumerate(frames):
        params[f"frame{k:02d}.cls_logits"] = frame.class_logits
        params[f"frame{k:02d}.boxes"] = frame.boxes
    return fn, params


def _build_extended(seed: int):
    rng = rng_for(seed, "probe-ext")
    weights = LossWeights()
    truth = _probe_truth(rng, n=2)
    frame = _probe_frame(rng, truth)
    descriptions = {i: _unit_row(rng.normal(size=3)) for i in (1, 2, 3)}
    pool_ids = [1, 1, 2, 3]
    heads = _heads(rng)

    def fn(params):
        rebuilt = _rebuild(frame, params["frame00.cls_logits"],
                           params["frame00.boxes"])
        breakdown, grad = collective_loss_extended(
            [rebuilt], [truth], descriptions, weights, qbs_assign,
            params["proj_v"], pool=(pool_ids, params["pool.embeddings"]))
        return breakdown.total, grad

    return fn, {"frame00.cls_logits": frame.class_logits,
                "frame00.boxes": frame.boxes,
                "pool.embeddings": 0.8 * rng.normal(size=(4, 4)),
                "proj_v": heads.w_v}


def _build_dedup(seed: int):
    rng = rng_for(seed, "probe-dem")
    model_dim, heads, hidden, n = 4, 2, 6, 5
    params = DemParams.create(model_dim, heads, hidden, rng)
    arrays = dict(params.registry())
    arrays["x"] = rng.normal(size=(n, model_dim))
    targets_dedup = (rng.uniform(size=n) < 0.5).astype(np.float64)
    targets_cls = (rng.uniform(size=n) < 0.5).astype(np.float64)

    def fn(work):
        return dem_probe_loss(work, heads, targets_dedup, targets_cls)

    return fn, arrays


def _unit_row(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x)


PROBES = {
    "contrastive-i2t": _build_i2t,
    "contrastive-t2i": _build_t2i,
    "t2i-multipos": _build_multipos,
    "triplet": _build_triplet,
    "description-ce": _build_i2tce,
    "focal": _build_focal,
    "detection-frame": _build_detection,
    "clip-collective": _build_clip,
    "clip-extended": _build_extended,
    "dedup-attention": _build_dedup,
}


@dataclass
class ProbeResult:
    name: str
    points: int
    worst_rel_err: float
    passed: bool
    seconds: float


def run_probe(name: str, points: int = 20, step: float = 1e-5,
              rtol: float = 1e-4) -> ProbeResult:
    builder = PROBES[name]
    worst = 0.0
    ok = True
    t0 = time.perf_counter()
    for p in range(points):
        fn, params = builder(p)
        report = gradcheck(fn, params, step=step, rtol=rtol)
        worst = max(worst, max(e.max_rel_err for e in report.entries))
        ok = ok and report.passed
    return ProbeResult(name=name, points=points, worst_rel_err=worst,
                       passed=ok, seconds=time.perf_counter() - t0)


def run_suite(points: int = 20, step: float = 1e-5, rtol: float = 1e-4
              ) -> list[ProbeResult]:
    return [run_probe(name, points=points, step=step, rtol=rtol)
            for name in PROBES]


def suite_text(results: list[ProbeResult]) -> str:
    rows = [f"{'probe':18s} {'points':>6s} {'worst_rel_err':>14s} "
            f"{'time':>7s} {'status':>7s}"]
    for r in results:
        rows.append(f"{r.name:18s} {r.points:6d} {r.worst_rel_err:14.3e} "
                    f"{r.seconds:6.2f}s {'pass' if r.passed else 'FAIL':>7s}")
    rows.append("all probes pass" if all(r.passed for r in results)
                else "FAILURES present")
    return "\n".join(rows) + "\n"
