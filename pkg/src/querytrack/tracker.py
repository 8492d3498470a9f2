"""Per-frame tracking state machine on top of a synthetic decoder.

The decoder stand-in turns scripted ground truth into query slots: one
detect slot per visible (non-dropped) target, clutter slots, and one track
slot per live track. Slot states are linear images of per-identity
appearance latents plus a kind offset, so the dedup head can recognize a
detect slot re-covering an already-tracked target by content. Class logits
are calibrated so zero noise saturates the correct decisions.

Per frame the tracker runs decoder -> dedup logits -> tracking scores ->
keep/drop update, promotes confident detect slots to fresh tracks, retires
tracks whose miss counter expires, and appends scored boxes to
trajectories. An optional re-association pass relabels a newborn with a
retired output identity when its projected embedding matches that
identity's prompt description; among retirees inside the window it adopts
the one with the most emitted evidence.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assignment import LabelAssignment, assignment_fn, qbs_assign
from .config import RunConfig, make_manifest, rng_for
from .dem import (DemParams, FrameOutput, QuerySlot, dem_forward,
                  dem_train_step, qim_update, tracking_score)
from .geometry import BBox
from .losses import LossWeights
from .motio import MotFile, MotLine
from .scene import (FrameTruth, SceneScript, generate_scene, normalize_truths,
                    parse_scene, truths_to_gt)
from .trackbook import TrackBook, descriptions, image_encoder_matrix

HIT_LOGIT = 8.0        # class logit of a located target (sigmoid 0.99966)
MISS_LOGIT = -8.0      # class logit of an unlocated track slot
CLUTTER_LOGIT = 4.0    # class logit of a spurious detection
LOCK_MIN_COSINE = 0.5  # weakest embedding match a track will follow


@dataclass(frozen=True)
class NoiseModel:
    """Corruption applied by the decoder stand-in.

    Box jitter is in units of the box's own size; logit noise is additive;
    embedding noise perturbs both instance embeddings and slot states
    relative to their typical norm. The domain shift displaces every
    appearance latent along one fixed direction, modelling a change of
    capture conditions between training and evaluation scenes.
    """

    box_sigma: float = 0.0
    logit_sigma: float = 0.0
    embed_sigma: float = 0.0
    drop_prob: float = 0.0
    clutter_rate: float = 0.0
    domain_shift: float = 0.0

    def __post_init__(self):
        for name in ("box_sigma", "logit_sigma", "embed_sigma",
                     "clutter_rate", "domain_shift"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must be in [0,1]")

    @staticmethod
    def zero() -> "NoiseModel":
        return NoiseModel()

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class StubEncoders:
    """Frozen linear maps shared by the decoder stand-in.

    `w_img` is the same matrix the prompt book uses, so slot embeddings
    live in the book's image space. `w_app` plus the per-kind offsets
    build the slot states the dedup head attends over.
    """

    w_app: np.ndarray     # (latent_dim, model_dim)
    b_det: np.ndarray     # (model_dim,)
    b_tck: np.ndarray     # (model_dim,)
    w_img: np.ndarray     # (latent_dim, embed_dim)
    shift_dir: np.ndarray  # (latent_dim,), unit norm

    @staticmethod
    def create(config: RunConfig) -> "StubEncoders":
        seed = config.encoder_seed
        rng = rng_for(seed, "stub-app")
        w_app = rng.normal(size=(config.latent_dim, config.model_dim)
                           ) / np.sqrt(config.latent_dim)
        offs = rng_for(seed, "stub-offsets")
        b_det = offs.normal(size=config.model_dim)
        b_tck = offs.normal(size=config.model_dim)
        raw = rng_for(seed, "stub-shift").normal(size=config.latent_dim)
        return StubEncoders(w_app=w_app, b_det=b_det, b_tck=b_tck,
                            w_img=image_encoder_matrix(
                                seed, config.latent_dim, config.embed_dim),
                            shift_dir=raw / np.linalg.norm(raw))

    def embed(self, latent: np.ndarray) -> np.ndarray:
        feat = latent @ self.w_img
        return feat / np.linalg.norm(feat)


@dataclass
class TrackState:
    """One live track: identity bookkeeping plus propagated state."""

    ident: int                 # internal slot identity, never reused
    out_id: int                # identity written to result files
    box: BBox
    output: np.ndarray         # propagated query state
    embed: np.ndarray          # instance embedding, EMA-updated on hits
    miss: int = 0
    age: int = 0
    active: bool = True
    book_id: int | None = None


def detect_capacity(config: RunConfig, max_targets: int) -> int:
    return int(config.detect_factor * max_targets) + config.detect_extra


def _jitter_box(box: BBox, sigma: float, rng: np.random.Generator) -> BBox:
    if sigma == 0.0:
        return box
    g = rng.normal(size=4)
    w = box.w * max(0.1, 1.0 + sigma * g[2])
    h = box.h * max(0.1, 1.0 + sigma * g[3])
    return BBox(box.cx + sigma * box.w * g[0],
                box.cy + sigma * box.h * g[1], w, h)


def _noisy(vec: np.ndarray, sigma: float, rng: np.random.Generator
           ) -> np.ndarray:
    if sigma == 0.0:
        return vec.copy()
    return vec + sigma * rng.normal(size=vec.shape)


def decoder_stub(truth: FrameTruth, tracks: list[TrackState],
                 noise: NoiseModel, enc: StubEncoders, seed: int,
                 capacity: int | None = None, aux_layers: int = 1
                 ) -> FrameOutput:
    """Synthetic decoder pass for one frame.

    Track slots lock onto visible targets by greedy exclusive cosine
    matching of the track's embedding against the frame's (noisy) observed
    embeddings; an unlocked track emits its last box with a miss logit and
    a bare track-offset state. Detect slots cover every visible target
    that survives the drop coin, plus clutter up to `capacity`. All
    randomness comes from (seed, frame), so repeated calls are
    bit-identical.
    """
    rng = rng_for(seed, "stub", truth.frame)
    visible = list(truth.visible())
    shifted = {o.identity: o.latent + noise.domain_shift * enc.shift_dir
               for o in visible}
    observed = {o.identity: _unit(_noisy(shifted[o.identity] @ enc.w_img,
                                         noise.embed_sigma, rng))
                for o in visible}

    # greedy exclusive lock: best cosine first, deterministic tie order
    pairs = []
    for t in tracks:
        for o in visible:
            pairs.append((-float(t.embed @ observed[o.identity]),
                          t.ident, o.identity))
    pairs.sort()
    locked: dict[int, int] = {}
    claimed: set[int] = set()
    for neg_cos, ident, obj_id in pairs:
        if -neg_cos < LOCK_MIN_COSINE:
            break
        if ident in locked or obj_id in claimed:
            continue
        locked[ident] = obj_id
        claimed.add(obj_id)

    by_id = {o.identity: o for o in visible}
    slots: list[QuerySlot] = []
    for t in tracks:
        if t.ident in locked:
            obj = by_id[locked[t.ident]]
            state = enc.w_app.T @ shifted[obj.identity] + enc.b_tck
            slots.append(QuerySlot(
                kind="track",
                box=_jitter_box(obj.box, noise.box_sigma, rng),
                class_logit=HIT_LOGIT + noise.logit_sigma * rng.normal(),
                embed=observed[obj.identity].copy(),
                output=_noisy(state, noise.embed_sigma, rng),
                identity=t.ident))
        else:
            slots.append(QuerySlot(
                kind="track", box=t.box,
                class_logit=MISS_LOGIT + noise.logit_sigma * rng.normal(),
                embed=t.embed.copy(),
                output=_noisy(enc.b_tck, noise.embed_sigma, rng),
                identity=t.ident))

    cap = capacity if capacity is not None else len(visible) + 8
    emitted = 0
    for o in visible:
        if noise.drop_prob > 0.0 and rng.uniform() < noise.drop_prob:
            continue
        if emitted >= cap:
            break
        state = enc.w_app.T @ shifted[o.identity] + enc.b_det
        slots.append(QuerySlot(
            kind="detect",
            box=_jitter_box(o.box, noise.box_sigma, rng),
            class_logit=HIT_LOGIT + noise.logit_sigma * rng.normal(),
            embed=observed[o.identity].copy(),
            output=_noisy(state, noise.embed_sigma, rng)))
        emitted += 1

    if noise.clutter_rate > 0.0:
        for _ in range(int(rng.poisson(noise.clutter_rate))):
            if emitted >= cap:
                break
            latent = rng.normal(size=enc.w_app.shape[0])
            state = enc.w_app.T @ latent + enc.b_det
            box = BBox(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9),
                       rng.uniform(0.04, 0.12), rng.uniform(0.04, 0.12))
            slots.append(QuerySlot(
                kind="detect", box=box,
                class_logit=CLUTTER_LOGIT + noise.logit_sigma * rng.normal(),
                embed=_unit(_noisy(latent @ enc.w_img, noise.embed_sigma,
                                   rng)),
                output=_noisy(state, noise.embed_sigma, rng)))
            emitted += 1

    aux = []
    for _ in range(max(0, aux_layers - 1)):
        logits = np.array([s.class_logit for s in slots]) + 0.5 * rng.normal(
            size=len(slots))
        boxes = np.array([s.box.as_tuple() for s in slots]) if slots else \
            np.zeros((0, 4))
        boxes = boxes + 0.01 * rng.normal(size=boxes.shape)
        aux.append((logits, boxes))
    return FrameOutput(frame=truth.frame, slots=tuple(slots),
                       aux_outputs=tuple(aux))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


# -- per-frame state machine -------------------------------------------------------


@dataclass
class StepRecord:
    frame: int
    n_slots: int
    n_boxes: int
    promoted: list[int]
    retired: list[int]
    resurrected: list[int]


class Tracker:
    """Frame-serial tracking over one sequence.

    Holds live track states, allocates internal identities, and owns the
    trajectory store (output identity -> scored boxes per frame). With
    `config.reassociate` a prompt book must be supplied; its descriptions
    form the gallery used to hand a retired output identity back to a
    matching newborn.
    """

    def __init__(self, config: RunConfig, dem: DemParams,
                 enc: StubEncoders | None = None,
                 noise: NoiseModel | None = None, seed: int | None = None,
                 capacity: int | None = None, book: TrackBook | None = None):
        config.validate()
        self.config = config
        self.dem = dem
        self.enc = enc if enc is not None else StubEncoders.create(config)
        self.noise = noise if noise is not None else NoiseModel.zero()
        self.seed = config.seed if seed is None else seed
        self.capacity = capacity
        self.tracks: list[TrackState] = []
        self.trajectories: dict[int, list[tuple[int, BBox, float]]] = {}
        self.records: list[StepRecord] = []
        self.retired_pool: list[tuple[int, int, int]] = []  # (frame, out, book)
        self._next_ident = 1
        self.book = book
        self._bank_ids: list[int] = []
        self._bank = np.zeros((0, config.proj_dim))
        if config.reassociate:
            if book is None or not book.identities():
                raise ValueError(
                    "reassociation needs a prompt book with descriptions")
            desc = descriptions(book)
            self._bank_ids = sorted(desc)
            self._bank = np.stack([desc[i] for i in self._bank_ids])

    def _book_label(self, embed: np.ndarray) -> int | None:
        if not self._bank_ids:
            return None
        p = embed @ self.book.heads.w_v
        p = p / max(np.linalg.norm(p), 1e-12)
        sims = self._bank @ p
        best = int(np.argmax(sims))
        if sims[best] >= self.config.reassoc_threshold:
            return self._bank_ids[best]
        return None

    def _emit(self, out_id: int, frame: int, box: BBox, score: float) -> None:
        points = self.trajectories.setdefault(out_id, [])
        if points and points[-1][0] >= frame:
            raise RuntimeError(
                f"trajectory {out_id} would go backwards at frame {frame}")
        points.append((frame, box, score))

    def step(self, truth: FrameTruth) -> tuple[FrameOutput, StepRecord]:
        cfg = self.config
        frame_out = decoder_stub(truth, self.tracks, self.noise, self.enc,
                                 self.seed, capacity=self.capacity,
                                 aux_layers=cfg.pseudo_layers)
        if cfg.dem_enabled:
            dedup = dem_forward(self.dem, frame_out.slots)
        else:
            dedup = np.full(len(frame_out.slots), np.inf)
        frame_out = frame_out.with_dedup(dedup)
        scores = tracking_score(frame_out.class_logits, dedup)
        qim = qim_update(frame_out.slots, scores, cfg.score_threshold,
                         cfg.patience, {t.ident: t.miss for t in self.tracks})

        n_boxes = 0
        by_ident = {t.ident: t for t in self.tracks}
        for k, slot in enumerate(frame_out.slots):
            if slot.kind != "track":
                continue
            state = by_ident[slot.identity]
            state.age += 1
            if slot.identity in qim.retired:
                state.active = False
                self.retired_pool.append(
                    (truth.frame, state.out_id,
                     state.book_id if state.book_id is not None else -1))
                continue
            state.miss = qim.miss_counts[slot.identity]
            if scores[k] > cfg.score_threshold:
                state.box = slot.box
                state.output = slot.output
                mixed = (cfg.ema_factor * state.embed
                         + (1.0 - cfg.ema_factor) * slot.embed)
                state.embed = _unit(mixed)
                self._emit(state.out_id, truth.frame, slot.box,
                           float(scores[k]))
                n_boxes += 1
        self.tracks = [t for t in self.tracks if t.active]

        promoted_out: list[int] = []
        resurrected: list[int] = []
        horizon = truth.frame - cfg.reassoc_window
        for k in qim.promoted_slots:
            slot = frame_out.slots[k]
            ident = self._next_ident
            self._next_ident += 1
            out_id = ident
            book_id = self._book_label(slot.embed) if cfg.reassociate else None
            if book_id is not None:
                live_labels = {t.book_id for t in self.tracks}
                if book_id not in live_labels:
                    # Adopt the in-window retiree with the longest emitted
                    # trajectory; spurious duplicates retire with few points.
                    best: tuple | None = None
                    for j, (r_frame, r_out, r_book) in enumerate(
                            self.retired_pool):
                        if r_frame < horizon or r_book != book_id:
                            continue
                        key = (-len(self.trajectories[r_out]), r_frame, r_out)
                        if best is None or key < best[0]:
                            best = (key, j)
                    if best is not None:
                        j = best[1]
                        out_id = self.retired_pool[j][1]
                        resurrected.append(out_id)
                        del self.retired_pool[j]
            self.tracks.append(TrackState(
                ident=ident, out_id=out_id, box=slot.box,
                output=slot.output.copy(), embed=slot.embed.copy(),
                book_id=book_id))
            self._emit(out_id, truth.frame, slot.box, float(scores[k]))
            promoted_out.append(out_id)
            n_boxes += 1

        retired_out = [o for f, o, _ in self.retired_pool if f == truth.frame]
        record = StepRecord(frame=truth.frame, n_slots=len(frame_out.slots),
                            n_boxes=n_boxes, promoted=promoted_out,
                            retired=retired_out, resurrected=resurrected)
        self.records.append(record)
        return frame_out, record


def trajectories_to_mot(trajs: dict[int, list[tuple[int, BBox, float]]],
                        width: float, height: float) -> MotFile:
    """Pixel-space result file, rows ordered by (frame, identity)."""
    rows = []
    for out_id, points in trajs.items():
        for frame, box, score in points:
            l, t, w, h = box.to_ltwh()
            rows.append(MotLine(frame=frame, track_id=out_id,
                                left=l * width, top=t * height,
                                width=w * width, height=h * height,
                                conf=score, cls=1, visibility=1.0))
    rows.sort(key=lambda m: (m.frame, m.track_id))
    return MotFile(lines=rows)


# -- dedup pretraining -------------------------------------------------------------


# Desired clearance around the promotion boundary. With a saturated class
# logit the score gate passes iff the dedup logit exceeds -ln(3) ~ -1.10,
# so suppression needs clearly lower logits and keeps clearly higher ones.
_DUP_CEILING = -2.0
_KEEP_FLOOR = -0.3


def _oracle_batch(frames: list[FrameTruth], enc: StubEncoders, cap: int,
                  weights: LossWeights, rng: np.random.Generator, seed: int,
                  assign_fn=qbs_assign) -> tuple[FrameOutput, LabelAssignment]:
    """One clean training frame with a random already-tracked subset."""
    truth = frames[int(rng.integers(len(frames)))]
    tracks = []
    for o in truth.objects:
        if rng.uniform() < 0.5:
            tracks.append(TrackState(
                ident=o.identity, out_id=o.identity, box=o.box,
                output=enc.w_app.T @ o.latent + enc.b_tck,
                embed=enc.embed(o.latent)))
    frame_out = decoder_stub(truth, tracks, NoiseModel.zero(), enc,
                             seed=seed, capacity=cap)
    labels = assign_fn(frame_out, truth, {t.ident for t in tracks}, weights)
    return frame_out, labels


def dedup_margins(params: DemParams, frames: list[FrameTruth],
                  enc: StubEncoders, cap: int, weights: LossWeights,
                  seed: int, probes: int = 60) -> tuple[float, float, float]:
    """Worst-case dedup logits per supervision class over probe frames:
    (highest duplicate, lowest newborn, lowest visible-track)."""
    rng = rng_for(seed, "dem-probe")
    dup_max, new_min, vis_min = -np.inf, np.inf, np.inf
    for p in range(probes):
        frame_out, labels = _oracle_batch(frames, enc, cap, weights, rng,
                                          seed=1_000_000 + p)
        logits = dem_forward(params, frame_out.slots)
        for k, lbl in enumerate(labels.labels):
            if lbl == "duplicate":
                dup_max = max(dup_max, logits[k])
            elif lbl == "newborn":
                new_min = min(new_min, logits[k])
            elif lbl == "tracked" and labels.box_mask[k]:
                vis_min = min(vis_min, logits[k])
    return float(dup_max), float(new_min), float(vis_min)


def pretrain_dem(config: RunConfig, scripts: list[SceneScript],
                 seed: int | None = None, steps: int | None = None,
                 lr: float | None = None, alpha: float = 0.5) -> DemParams:
    """Train the dedup head on clean frames drawn from the given scenes.

    Each step samples a frame and a random already-tracked subset of its
    identities, rebuilds the slot layout the tracker will see at zero
    noise, and takes one focal step on the balanced labels (alpha 0.5:
    keep and suppress are symmetric classes for a two-way decision head).
    Training stops early once held-out probe frames show every duplicate
    logit under the suppression ceiling and every keep logit above the
    floor; `steps` caps the budget. Labels follow `config.assign`; the
    newborn-only scheme never supervises duplicates, so its early stop
    waives the ceiling condition.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    steps = config.dem_train_steps if steps is None else steps
    lr = config.dem_lr if lr is None else lr
    assign_fn = assignment_fn(config.assign)
    enc = StubEncoders.create(config)
    weights = LossWeights.from_config(config)

    frames: list[FrameTruth] = []
    for script in scripts:
        truths = generate_scene(script, seed, latent_dim=config.latent_dim)
        truths = normalize_truths(truths, script.width, script.height)
        frames.extend(ft for ft in truths if ft.objects)
    if not frames:
        raise ValueError("no populated frames to pretrain on")
    max_targets = max(len(ft.visible()) for ft in frames)
    cap = detect_capacity(config, max_targets)

    rng = rng_for(seed, "dem-pretrain")
    params = DemParams.create(config.model_dim, config.heads,
                              config.mlp_hidden,
                              rng_for(seed, "dem-init"))
    for step in range(steps):
        frame_out, labels = _oracle_batch(frames, enc, cap, weights, rng,
                                          seed=seed + 7919 * step,
                                          assign_fn=assign_fn)
        rate = max(lr * 0.97 ** (step // 200), 0.05 * lr)
        params, _ = dem_train_step(params, frame_out.slots, labels, rate,
                                   gamma=config.focal_gamma, alpha=alpha)
        if (step + 1) % 500 == 0:
            dup_max, new_min, vis_min = dedup_margins(
                params, frames, enc, cap, weights, seed)
            dup_ok = dup_max < _DUP_CEILING or config.assign == "motr"
            if (dup_ok and new_min > _KEEP_FLOOR
                    and vis_min > _KEEP_FLOOR):
                break
    return params


# -- sequence driver ---------------------------------------------------------------


@dataclass
class RunResult:
    trajectories: dict[int, list[tuple[int, BBox, float]]]
    results: MotFile
    gt: MotFile
    records: list[StepRecord]
    manifest: dict


def resolve_script(source: SceneScript | str | Path) -> tuple[SceneScript, str]:
    """Accept a parsed script, raw script text, or a path to one."""
    if isinstance(source, SceneScript):
        source.validate()
        return source, scene_text(source)
    if isinstance(source, Path) or (isinstance(source, str)
                                    and "\n" not in source):
        text = Path(source).read_text()
        return parse_scene(text), text
    return parse_scene(source), str(source)


def scene_text(script: SceneScript) -> str:
    """Canonical text form of a script (inverse of the parser)."""
    rows = [f"scene {script.width:g} {script.height:g} {script.frames}",
            f"appearance-seed {script.appearance_seed}"]
    for oid in sorted(script.objects):
        spec = script.objects[oid]
        rows.append(f"object {oid} {spec.enter} {spec.exit} "
                    f"{spec.w:g} {spec.h:g}")
        for f, cx, cy in sorted(spec.waypoints):
            rows.append(f"waypoint {oid} {f} {cx:g} {cy:g}")
        for lo, hi, vis in spec.occlusions:
            rows.append(f"occlude {oid} {lo} {hi} {vis:g}")
    return "\n".join(rows) + "\n"


def run_sequence(source: SceneScript | str | Path, config: RunConfig,
                 dem: DemParams | None = None,
                 noise: NoiseModel | None = None, seed: int | None = None,
                 scene_seed: int | None = None,
                 enc: StubEncoders | None = None,
                 book: TrackBook | None = None) -> RunResult:
    """Track one scripted scene end to end.

    Without an explicit dedup head, one is pretrained on this scene's own
    clean frames, which is the oracle configuration. `scene_seed` pins the
    scene's appearance latents independently of the decoder noise seed, so
    benchmark repeats can vary the noise while tracking the same targets.
    The manifest records the resolved config, seeds, scene hash, noise
    parameters, and output counts; equal manifests imply byte-identical
    results.
    """
    script, text = resolve_script(source)
    config.validate()
    seed = config.seed if seed is None else seed
    scene_seed = seed if scene_seed is None else scene_seed
    noise = noise if noise is not None else NoiseModel.zero()
    if dem is None:
        dem = pretrain_dem(config, [script], seed=scene_seed)
    truths = generate_scene(script, scene_seed, latent_dim=config.latent_dim)
    gt = truths_to_gt(truths)
    norm = normalize_truths(truths, script.width, script.height)
    max_targets = max((len(ft.visible()) for ft in norm), default=0)
    tracker = Tracker(config, dem, enc=enc, noise=noise, seed=seed,
                      capacity=detect_capacity(config, max_targets),
                      book=book)
    for ft in norm:
        tracker.step(ft)
    results = trajectories_to_mot(tracker.trajectories,
                                  script.width, script.height)
    manifest = make_manifest(
        config, "track", inputs={"scene": text},
        extras={"seed": seed, "scene_seed": scene_seed,
                "noise": noise.as_dict(), "frames": script.frames,
                "tracks_created": tracker._next_ident - 1,
                "boxes": len(results.lines)})
    return RunResult(trajectories=tracker.trajectories, results=results,
                     gt=gt, records=tracker.records, manifest=manifest)


# -- clip-level training loop ------------------------------------------------------


@dataclass
class TrainResult:
    book: TrackBook
    dem: DemParams
    pool: "EmbeddingPool"
    clip_trace: list[float]
    tune_trace: list[float]
    positives: int
    iterations: int


def _clip_frames(truths: list[FrameTruth], config: RunConfig,
                 enc: StubEncoders, cap: int, noise: NoiseModel,
                 rng: np.random.Generator, seed: int
                 ) -> tuple[list[FrameOutput], list[FrameTruth]]:
    """Sample a training clip: random start, random inter-frame gaps.

    Track slots are simulated the way clip training sees them: an identity
    visible in an earlier clip frame is live afterwards, with clean
    propagated state.
    """
    n = len(truths)
    gaps = [int(rng.integers(config.interval_min, config.interval_max + 1))
            for _ in range(config.clip_len - 1)]
    span = sum(gaps)
    start = int(rng.integers(0, max(1, n - span)))
    picks = [start]
    for g in gaps:
        picks.append(min(picks[-1] + g, n - 1))
    clip_truths = [truths[p] for p in picks]

    outputs = []
    seen: set[int] = set()
    for k, truth in enumerate(clip_truths):
        tracks = [TrackState(
            ident=o.identity, out_id=o.identity, box=o.box,
            output=enc.w_app.T @ o.latent + enc.b_tck,
            embed=enc.embed(o.latent))
            for o in truth.objects if o.identity in seen]
        outputs.append(decoder_stub(truth, tracks, noise, enc,
                                    seed=seed + 104729 * k, capacity=cap,
                                    aux_layers=config.pseudo_layers))
        seen.update(o.identity for o in truth.visible())
    return outputs, clip_truths


def clip_train_loop(sources, config: RunConfig, dem: DemParams | None = None,
                    book: TrackBook | None = None,
                    noise: NoiseModel | None = None, seed: int | None = None,
                    train_dem: bool = True) -> TrainResult:
    """Alternating prompt tuning and clip-level loss descent.

    Per iteration: tune the prompt tokens on the current pool, freeze the
    resulting descriptions, run the extended clip loss over a sampled
    clip with the configured label assignment, step the image projection
    by its gradient, take per-frame focal steps on the dedup head, and
    push the clip's labeled embeddings into the pool. With alignment
    disabled only the dedup steps and bookkeeping remain.
    """
    from .losses import (ProjectionHeads, collective_loss_extended,
                         harvest_pool)
    from .trackbook import EmbeddingPool, register_identity, tune_prompts

    config.validate()
    if not sources:
        raise ValueError("need at least one training scene")
    scripts = [resolve_script(s)[0] for s in sources]
    seed = config.seed if seed is None else seed
    noise = noise if noise is not None else NoiseModel.zero()
    enc = StubEncoders.create(config)
    weights = LossWeights.from_config(config)
    assign_fn = assignment_fn(config.assign)

    per_scene = []
    all_ids: set[int] = set()
    max_targets = 1
    for script in scripts:
        truths = normalize_truths(
            generate_scene(script, seed, latent_dim=config.latent_dim),
            script.width, script.height)
        per_scene.append((script, truths))
        all_ids.update(script.objects)
        max_targets = max(max_targets,
                          max(len(ft.visible()) for ft in truths))
    cap = detect_capacity(config, max_targets)

    if book is None:
        book = TrackBook.create(sorted(all_ids), config)
    else:
        for identity in sorted(all_ids):
            register_identity(book, identity)
    if dem is None:
        dem = pretrain_dem(config, scripts, seed=seed)
    dem = dem.clone()
    pool = EmbeddingPool(capacity=config.pool_capacity)
    proj_v = book.heads.w_v.copy()

    clip_trace: list[float] = []
    tune_trace: list[float] = []
    positives = 0
    iteration = 0
    clips_per_scene = [max(2, script.frames // (config.clip_len * 2))
                       for script, _ in per_scene]
    for epoch in range(config.epochs):
        for s_idx, (script, truths) in enumerate(per_scene):
            for rep in range(clips_per_scene[s_idx]):
                rng = rng_for(seed, "clip", epoch, s_idx, rep)
                if config.align:
                    tuned = tune_prompts(book, pool,
                                         steps=config.tune_steps_loop,
                                         lr=config.prompt_lr,
                                         batch=config.tune_batch,
                                         seed=seed + iteration)
                    if not tuned.vacuous:
                        book = tuned.book
                        tune_trace.extend(tuned.trace)
                desc = descriptions(book)
                frames, clip_truths = _clip_frames(
                    truths, config, enc, cap, noise, rng,
                    seed=seed + 15485863 * iteration)
                labels = [assign_fn(f, t,
                                    {s.identity for s in f.slots
                                     if s.kind == "track"}, weights)
                          for f, t in zip(frames, clip_truths)]
                positives += sum(lb.positive_detect_count() for lb in labels)
                if config.align:
                    breakdown, grads = collective_loss_extended(
                        frames, clip_truths, desc, weights, assign_fn,
                        proj_v)
                    if not np.isfinite(breakdown.total):
                        raise RuntimeError(
                            f"non-finite clip loss at epoch {epoch}, "
                            f"iteration {iteration}")
                    clip_trace.append(breakdown.total)
                    proj_v = proj_v - config.align_lr * grads.get("proj_v")
                    book.heads = ProjectionHeads(w_v=proj_v,
                                                 w_t=book.heads.w_t)
                if train_dem:
                    for f, lb in zip(frames, labels):
                        dem, _ = dem_train_step(dem, f.slots, lb,
                                                config.dem_lr,
                                                gamma=config.focal_gamma,
                                                alpha=0.5)
                ids, embeds = harvest_pool(frames, clip_truths, weights,
                                           assign_fn)
                for identity, embed in zip(ids, embeds):
                    pool.push(identity, embed, frame=iteration)
                iteration += 1
    return TrainResult(book=book, dem=dem, pool=pool, clip_trace=clip_trace,
                       tune_trace=tune_trace, positives=positives,
                       iterations=iteration)
