"""Synthetic scene scripting and ground-truth generation.

Scenes are described in a small line-oriented text format so fixtures stay
reviewable in diffs:

    scene <width> <height> <frames>
    appearance-seed <int>                      # optional, default 0
    object <id> <enter> <exit> <w> <h>         # frames are 1-based, exit inclusive
    waypoint <id> <frame> <cx> <cy>            # pixel centers, linear in between
    occlude <id> <from> <to> [visibility]      # visibility in the window, default 0

Blank lines and '#' comments are allowed. Box centers interpolate linearly
between waypoints; before the first / after the last waypoint the position
holds constant. Identities get a fixed appearance latent for the whole
sequence, drawn from a seeded stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import rng_for
from .geometry import BBox
from .motio import MotFile, MotLine

VISIBILITY_CUTOFF = 0.5  # targets below this are not scored and not emitted as gt


class SceneScriptError(ValueError):
    pass


@dataclass(frozen=True)
class TruthObject:
    identity: int
    box: BBox
    visibility: float
    latent: np.ndarray


@dataclass(frozen=True)
class FrameTruth:
    frame: int
    objects: tuple[TruthObject, ...]

    def visible(self, cutoff: float = VISIBILITY_CUTOFF) -> tuple[TruthObject, ...]:
        return tuple(o for o in self.objects if o.visibility >= cutoff)


@dataclass
class _ObjectSpec:
    identity: int
    enter: int
    exit: int
    w: float
    h: float
    waypoints: list[tuple[int, float, float]] = field(default_factory=list)
    occlusions: list[tuple[int, int, float]] = field(default_factory=list)


@dataclass
class SceneScript:
    width: float
    height: float
    frames: int
    appearance_seed: int
    objects: dict[int, _ObjectSpec]

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0 or self.frames < 1:
            raise SceneScriptError("scene dimensions and frame count must be positive")
        for spec in self.objects.values():
            if not (1 <= spec.enter < spec.exit <= self.frames):
                raise SceneScriptError(
                    f"object {spec.identity}: need 1 <= enter < exit <= {self.frames}, "
                    f"got [{spec.enter},{spec.exit}]")
            if spec.w <= 0 or spec.h <= 0:
                raise SceneScriptError(f"object {spec.identity}: box size must be positive")
            if not spec.waypoints:
                raise SceneScriptError(f"object {spec.identity}: needs >= 1 waypoint")
            for f, cx, cy in spec.waypoints:
                if not (spec.enter <= f <= spec.exit):
                    raise SceneScriptError(
                        f"object {spec.identity}: waypoint frame {f} outside "
                        f"[{spec.enter},{spec.exit}]")
                if not (spec.w / 2 <= cx <= self.width - spec.w / 2
                        and spec.h / 2 <= cy <= self.height - spec.h / 2):
                    raise SceneScriptError(
                        f"object {spec.identity}: waypoint at frame {f} leaves the scene")
            frames_seen = [f for f, _, _ in spec.waypoints]
            if len(set(frames_seen)) != len(frames_seen):
                raise SceneScriptError(
                    f"object {spec.identity}: duplicate waypoint frame")
            for lo, hi, vis in spec.occlusions:
                if not (spec.enter <= lo <= hi <= spec.exit):
                    raise SceneScriptError(
                        f"object {spec.identity}: occlusion [{lo},{hi}] outside lifespan")
                if not (0.0 <= vis < VISIBILITY_CUTOFF):
                    raise SceneScriptError(
                        f"object {spec.identity}: occlusion visibility {vis} must be "
                        f"in [0,{VISIBILITY_CUTOFF})")


def parse_scene(text: str) -> SceneScript:
    width = height = None
    frames = 0
    appearance_seed = 0
    objects: dict[int, _ObjectSpec] = {}

    def err(line_no: int, msg: str):
        raise SceneScriptError(f"line {line_no}: {msg}")

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind, args = parts[0], parts[1:]
        try:
            if kind == "scene":
                width, height, frames = float(args[0]), float(args[1]), int(args[2])
            elif kind == "appearance-seed":
                appearance_seed = int(args[0])
            elif kind == "object":
                oid = int(args[0])
                if oid in objects:
                    err(line_no, f"duplicate object id {oid}")
                objects[oid] = _ObjectSpec(
                    identity=oid, enter=int(args[1]), exit=int(args[2]),
                    w=float(args[3]), h=float(args[4]))
            elif kind == "waypoint":
                oid = int(args[0])
                if oid not in objects:
                    err(line_no, f"waypoint for unknown object {oid}")
                objects[oid].waypoints.append(
                    (int(args[1]), float(args[2]), float(args[3])))
            elif kind == "occlude":
                oid = int(args[0])
                if oid not in objects:
                    err(line_no, f"occlusion for unknown object {oid}")
                vis = float(args[3]) if len(args) > 3 else 0.0
                objects[oid].occlusions.append((int(args[1]), int(args[2]), vis))
            else:
                err(line_no, f"unknown record {kind!r}")
        except (IndexError, ValueError) as e:
            if isinstance(e, SceneScriptError):
                raise
            err(line_no, f"malformed {kind!r} record: {raw.strip()!r}")
    if width is None:
        raise SceneScriptError("missing scene record")
    script = SceneScript(width=width, height=height, frames=frames,
                         appearance_seed=appearance_seed, objects=objects)
    script.validate()
    return script


def _position_at(spec: _ObjectSpec, frame: int) -> tuple[float, float]:
    pts = sorted(spec.waypoints)
    if frame <= pts[0][0]:
        return pts[0][1], pts[0][2]
    if frame >= pts[-1][0]:
        return pts[-1][1], pts[-1][2]
    for (f0, x0, y0), (f1, x1, y1) in zip(pts, pts[1:]):
        if f0 <= frame <= f1:
            t = (frame - f0) / (f1 - f0)
            return x0 + t * (x1 - x0), y0 + t * (y1 - y0)
    raise AssertionError("unreachable")


def _visibility_at(spec: _ObjectSpec, frame: int) -> float:
    for lo, hi, vis in spec.occlusions:
        if lo <= frame <= hi:
            return vis
    return 1.0


def generate_scene(script: SceneScript, seed: int, latent_dim: int = 8
                   ) -> list[FrameTruth]:
    """Deterministic per-frame truth; latents fixed per identity."""
    script.validate()
    latents = {}
    for oid in sorted(script.objects):
        rng = rng_for(seed, "latent", script.appearance_seed, oid)
        latents[oid] = rng.normal(size=latent_dim)
    truths = []
    for frame in range(1, script.frames + 1):
        objs = []
        for oid in sorted(script.objects):
            spec = script.objects[oid]
            if not (spec.enter <= frame <= spec.exit):
                continue
            cx, cy = _position_at(spec, frame)
            objs.append(TruthObject(
                identity=oid,
                box=BBox(cx, cy, spec.w, spec.h),
                visibility=_visibility_at(spec, frame),
                latent=latents[oid]))
        truths.append(FrameTruth(frame=frame, objects=tuple(objs)))
    return truths


def normalize_truths(truths: list[FrameTruth], width: int, height: int
                     ) -> list[FrameTruth]:
    """Rescale pixel boxes to unit coordinates for model-side consumers."""
    out = []
    for ft in truths:
        objs = tuple(
            TruthObject(identity=o.identity,
                        box=BBox(o.box.cx / width, o.box.cy / height,
                                 o.box.w / width, o.box.h / height),
                        visibility=o.visibility, latent=o.latent)
            for o in ft.objects)
        out.append(FrameTruth(frame=ft.frame, objects=objs))
    return out


def truths_to_gt(truths: list[FrameTruth]) -> MotFile:
    """Ground-truth file rows: visible targets only, pixel ltwh boxes."""
    lines = []
    for ft in truths:
        for obj in ft.visible():
            l, t, w, h = obj.box.to_ltwh()
            lines.append(MotLine(frame=ft.frame, track_id=obj.identity,
                                 left=l, top=t, width=w, height=h,
                                 conf=1.0, cls=1, visibility=obj.visibility))
    return MotFile(lines=lines)


# -- built-in scripts (benchmark fixtures) ---------------------------------------

BUILTIN_SCRIPTS: dict[str, str] = {
    # Two targets walking opposite diagonals, overlapping mid-sequence.
    "crossing": """\
scene 640 480 30
object 1 1 30 40 80
object 2 1 30 40 80
waypoint 1 1 80 120
waypoint 1 30 560 360
waypoint 2 1 560 120
waypoint 2 30 80 360
""",
    # One target fully hidden for a stretch, then reappearing on its path.
    "occlusion": """\
scene 640 480 40
object 1 1 40 50 100
object 2 1 40 50 100
waypoint 1 1 100 240
waypoint 1 40 540 240
waypoint 2 1 320 100
waypoint 2 40 320 380
occlude 1 15 18
""",
    # Four persistent targets moving in parallel lanes.
    "parade": """\
scene 640 480 20
object 1 1 20 40 90
object 2 1 20 40 90
object 3 1 20 40 90
object 4 1 20 40 90
waypoint 1 1 60 80
waypoint 1 20 580 80
waypoint 2 1 60 190
waypoint 2 20 580 190
waypoint 3 1 580 300
waypoint 3 20 60 300
waypoint 4 1 60 410
waypoint 4 20 580 410
""",
    # Targets entering and leaving at staggered frames.
    "churn": """\
scene 640 480 36
object 1 1 20 45 85
object 2 6 30 45 85
object 3 12 36 45 85
waypoint 1 1 80 100
waypoint 1 20 380 160
waypoint 2 6 560 120
waypoint 2 30 140 300
waypoint 3 12 320 400
waypoint 3 36 520 220
""",
    # Dense group with a brief partial occlusion and a crossing.
    "cluster": """\
scene 640 480 28
object 1 1 28 42 84
object 2 1 28 42 84
object 3 4 28 42 84
waypoint 1 1 120 200
waypoint 1 28 500 260
waypoint 2 1 500 200
waypoint 2 28 120 260
waypoint 3 4 300 420
waypoint 3 28 320 100
occlude 2 10 13
""",
}


def builtin_script(name: str) -> SceneScript:
    if name not in BUILTIN_SCRIPTS:
        raise SceneScriptError(
            f"unknown scene {name!r}; available: {sorted(BUILTIN_SCRIPTS)}")
    return parse_scene(BUILTIN_SCRIPTS[name])
