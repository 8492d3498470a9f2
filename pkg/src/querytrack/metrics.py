"""Tracking evaluation: CLEAR-MOT (MOTA, FP, FN, IDS), identity-F1 over a
global trajectory matching, and HOTA with its DetA/AssA decomposition.

All three evaluators consume MOTChallenge-style line lists (pixel ltwh
boxes) and share one frame-aligned view of the data. CLEAR matching walks
frames in order, keeps the previous frame's pairs while they still overlap,
and completes the rest with a minimum-cost assignment. IDF1 matches whole
trajectories by total overlap count. HOTA follows the two-pass convention
of the standard evaluation tool: a global alignment score is accumulated
first and then guides per-frame matching, scored across nineteen IoU
thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .assignment import FORBIDDEN, hungarian
from .motio import MotFile, MotLine

ALPHAS = tuple(round(0.05 * k, 2) for k in range(1, 20))
_EPS = float(np.finfo(np.float64).eps)


def iou_ltwh(a, b) -> float:
    """IoU of two (left, top, width, height) boxes; degenerate boxes get 0."""
    al, at, aw, ah = a
    bl, bt, bw, bh = b
    if aw <= 0.0 or ah <= 0.0 or bw <= 0.0 or bh <= 0.0:
        return 0.0
    iw = min(al + aw, bl + bw) - max(al, bl)
    ih = min(at + ah, bt + bh) - max(at, bt)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


@dataclass(frozen=True)
class FrameView:
    frame: int
    gt_ids: list[int]
    pred_ids: list[int]
    iou: np.ndarray  # (len(gt_ids), len(pred_ids))


def _lines(source) -> list[MotLine]:
    return list(source.lines) if isinstance(source, MotFile) else list(source)


def _check_unique(lines: Iterable[MotLine], side: str) -> None:
    seen: set[tuple[int, int]] = set()
    for line in lines:
        key = (line.frame, line.track_id)
        if key in seen:
            raise ValueError(
                f"{side} has duplicate identity {line.track_id} "
                f"in frame {line.frame}")
        seen.add(key)


def _grouped(lines: list[MotLine]) -> dict[int, list[MotLine]]:
    out: dict[int, list[MotLine]] = {}
    for line in lines:
        out.setdefault(line.frame, []).append(line)
    return out


def frame_views(gt: list[MotLine], pred: list[MotLine]) -> list[FrameView]:
    """One aligned view per frame present on either side, frame-ordered."""
    gt = _lines(gt)
    pred = _lines(pred)
    _check_unique(gt, "gt")
    _check_unique(pred, "pred")
    gt_frames = _grouped(gt)
    pred_frames = _grouped(pred)
    views = []
    for frame in sorted(set(gt_frames) | set(pred_frames)):
        gt_lines = sorted(gt_frames.get(frame, []),
                          key=lambda m: m.track_id)
        pred_lines = sorted(pred_frames.get(frame, []),
                            key=lambda m: m.track_id)
        mat = np.zeros((len(gt_lines), len(pred_lines)))
        for i, g in enumerate(gt_lines):
            for j, p in enumerate(pred_lines):
                mat[i, j] = iou_ltwh((g.left, g.top, g.width, g.height),
                                     (p.left, p.top, p.width, p.height))
        views.append(FrameView(
            frame=frame,
            gt_ids=[g.track_id for g in gt_lines],
            pred_ids=[p.track_id for p in pred_lines],
            iou=mat))
    return views


# -- CLEAR-MOT --------------------------------------------------------------------


@dataclass(frozen=True)
class ClearResult:
    mota: float | None
    fp: int
    fn: int
    ids: int
    gt_count: int
    pred_count: int
    matches: dict[int, list[tuple[int, int]]]  # frame -> (gt id, pred id)


def clear_mot(gt: list[MotLine], pred: list[MotLine],
              iou_threshold: float = 0.5) -> ClearResult:
    """Frame-sequential matching with previous-match carryover.

    A pair from the previous correspondence persists while both ids are
    present and still overlap at the threshold; everything else is matched
    by minimum total (1 - IoU). A switch is counted when a ground-truth id
    is matched to a different prediction than its last known partner,
    however long ago that partner was seen.
    """
    gt = _lines(gt)
    pred = _lines(pred)
    views = frame_views(gt, pred)
    last_match: dict[int, int] = {}
    fp = fn = switches = 0
    gt_count = len(gt)
    match_log: dict[int, list[tuple[int, int]]] = {}
    for view in views:
        matched: dict[int, int] = {}
        used: set[int] = set()
        pred_index = {p: j for j, p in enumerate(view.pred_ids)}
        for i, g in enumerate(view.gt_ids):
            partner = last_match.get(g)
            if partner is None or partner not in pred_index:
                continue
            if view.iou[i, pred_index[partner]] >= iou_threshold:
                matched[g] = partner
                used.add(partner)
        rest_rows = [i for i, g in enumerate(view.gt_ids) if g not in matched]
        rest_cols = [j for j, p in enumerate(view.pred_ids) if p not in used]
        if rest_rows and rest_cols:
            cost = np.full((len(rest_rows), len(rest_cols)), FORBIDDEN)
            for a, i in enumerate(rest_rows):
                for b, j in enumerate(rest_cols):
                    if view.iou[i, j] >= iou_threshold:
                        cost[a, b] = 1.0 - view.iou[i, j]
            for a, b in hungarian(cost).pairs:
                g = view.gt_ids[rest_rows[a]]
                p = view.pred_ids[rest_cols[b]]
                matched[g] = p
                used.add(p)
        for g in view.gt_ids:
            if g in matched:
                partner = matched[g]
                previous = last_match.get(g)
                if previous is not None and previous != partner:
                    switches += 1
                last_match[g] = partner
            else:
                fn += 1
        fp += len(view.pred_ids) - len(matched)
        match_log[view.frame] = sorted(matched.items())
    mota = None if gt_count == 0 else 1.0 - (fn + fp + switches) / gt_count
    return ClearResult(mota=mota, fp=fp, fn=fn, ids=switches,
                       gt_count=gt_count, pred_count=len(pred),
                       matches=match_log)


# -- IDF1 -------------------------------------------------------------------------


@dataclass(frozen=True)
class IdfResult:
    idf1: float | None
    idtp: int
    idfp: int
    idfn: int
    pairing: list[tuple[int, int]]  # (gt id, pred id) trajectory pairs


def idf1(gt: list[MotLine], pred: list[MotLine],
         iou_threshold: float = 0.5) -> IdfResult:
    """Identity-F1 from the best global trajectory pairing.

    overlap(g, p) counts frames where the pair overlaps at the threshold;
    an injective pairing maximizing total overlap defines IDTP.
    """
    gt = _lines(gt)
    pred = _lines(pred)
    views = frame_views(gt, pred)
    gt_ids = sorted({line.track_id for line in gt})
    pred_ids = sorted({line.track_id for line in pred})
    gt_index = {g: k for k, g in enumerate(gt_ids)}
    pred_index = {p: k for k, p in enumerate(pred_ids)}
    overlap = np.zeros((len(gt_ids), len(pred_ids)))
    for view in views:
        for i, g in enumerate(view.gt_ids):
            for j, p in enumerate(view.pred_ids):
                if view.iou[i, j] >= iou_threshold:
                    overlap[gt_index[g], pred_index[p]] += 1
    pairing: list[tuple[int, int]] = []
    idtp = 0
    if gt_ids and pred_ids:
        top = float(overlap.max())
        result = hungarian(top - overlap)
        for i, j in result.pairs:
            count = int(overlap[i, j])
            if count > 0:
                pairing.append((gt_ids[i], pred_ids[j]))
                idtp += count
    idfn = len(gt) - idtp
    idfp = len(pred) - idtp
    value = None
    if gt:
        value = 2.0 * idtp / (2.0 * idtp + idfp + idfn)
    return IdfResult(idf1=value, idtp=idtp, idfp=idfp, idfn=idfn,
                     pairing=pairing)


# -- HOTA -------------------------------------------------------------------------


@dataclass(frozen=True)
class HotaResult:
    hota: float | None
    deta: float | None
    assa: float | None
    alphas: tuple[float, ...]
    hota_alpha: np.ndarray
    deta_alpha: np.ndarray
    assa_alpha: np.ndarray
    tp_alpha: np.ndarray
    fn_alpha: np.ndarray
    fp_alpha: np.ndarray


def hota(gt: list[MotLine], pred: list[MotLine]) -> HotaResult:
    """Two-pass HOTA: global alignment first, guided matching per frame.

    Pass one accumulates a per-(gt id, pred id) Jaccard alignment over the
    whole sequence. Pass two matches each frame to maximize alignment times
    IoU, then thresholds the matched IoUs at every alpha to accumulate
    TP/FN/FP and per-pair match counts; AssA averages the pair Jaccard over
    true positives.
    """
    gt = _lines(gt)
    pred = _lines(pred)
    views = frame_views(gt, pred)
    gt_ids = sorted({line.track_id for line in gt})
    pred_ids = sorted({line.track_id for line in pred})
    gt_index = {g: k for k, g in enumerate(gt_ids)}
    pred_index = {p: k for k, p in enumerate(pred_ids)}
    n_alpha = len(ALPHAS)

    potential = np.zeros((len(gt_ids), len(pred_ids)))
    gt_count = np.zeros(len(gt_ids))
    pred_count = np.zeros(len(pred_ids))
    for view in views:
        sim = view.iou
        gidx = [gt_index[g] for g in view.gt_ids]
        pidx = [pred_index[p] for p in view.pred_ids]
        if gidx and pidx:
            denom = sim.sum(axis=0)[None, :] + sim.sum(axis=1)[:, None] - sim
            ratio = np.zeros_like(sim)
            mask = denom > _EPS
            ratio[mask] = sim[mask] / denom[mask]
            potential[np.ix_(gidx, pidx)] += ratio
        gt_count[gidx] += 1
        pred_count[pidx] += 1
    alignment = np.zeros_like(potential)
    if potential.size:
        alignment = potential / (gt_count[:, None] + pred_count[None, :]
                                 - potential)

    tp = np.zeros(n_alpha)
    fn = np.zeros(n_alpha)
    fp = np.zeros(n_alpha)
    match_counts = np.zeros((n_alpha, len(gt_ids), len(pred_ids)))
    for view in views:
        gidx = [gt_index[g] for g in view.gt_ids]
        pidx = [pred_index[p] for p in view.pred_ids]
        if not gidx:
            fp += len(pidx)
            continue
        if not pidx:
            fn += len(gidx)
            continue
        sim = view.iou
        score = alignment[np.ix_(gidx, pidx)] * sim
        pairs = hungarian(float(score.max()) - score).pairs
        for a, alpha in enumerate(ALPHAS):
            kept = [(i, j) for i, j in pairs if sim[i, j] >= alpha - _EPS]
            tp[a] += len(kept)
            fn[a] += len(gidx) - len(kept)
            fp[a] += len(pidx) - len(kept)
            for i, j in kept:
                match_counts[a, gidx[i], pidx[j]] += 1

    deta = tp / np.maximum(1.0, tp + fn + fp)
    assa = np.zeros(n_alpha)
    for a in range(n_alpha):
        counts = match_counts[a]
        if counts.size:
            pair_jaccard = counts / np.maximum(
                1.0, gt_count[:, None] + pred_count[None, :] - counts)
            assa[a] = float((counts * pair_jaccard).sum()) / max(1.0, tp[a])
    hota_alpha = np.sqrt(deta * assa)
    empty_gt = len(gt) == 0
    return HotaResult(
        hota=None if empty_gt else float(hota_alpha.mean()),
        deta=None if empty_gt else float(deta.mean()),
        assa=None if empty_gt else float(assa.mean()),
        alphas=ALPHAS, hota_alpha=hota_alpha, deta_alpha=deta,
        assa_alpha=assa, tp_alpha=tp, fn_alpha=fn, fp_alpha=fp)


# -- combined report ----------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    clear: ClearResult
    idf: IdfResult
    hota: HotaResult

    @property
    def mota(self) -> float | None:
        return self.clear.mota

    @property
    def idf1(self) -> float | None:
        return self.idf.idf1


def evaluate(gt: list[MotLine], pred: list[MotLine],
             iou_threshold: float = 0.5) -> MetricsReport:
    return MetricsReport(clear=clear_mot(gt, pred, iou_threshold),
                         idf=idf1(gt, pred, iou_threshold),
                         hota=hota(gt, pred))


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.6f}"


def report_text(report: MetricsReport) -> str:
    clear = report.clear
    idf = report.idf
    h = report.hota
    lines = [
        "tracking metrics",
        f"gt-detections {clear.gt_count}",
        f"pred-detections {clear.pred_count}",
        f"MOTA {_fmt(clear.mota)} FP {clear.fp} FN {clear.fn} "
        f"IDS {clear.ids}",
        f"IDF1 {_fmt(idf.idf1)} IDTP {idf.idtp} IDFP {idf.idfp} "
        f"IDFN {idf.idfn}",
        f"HOTA {_fmt(h.hota)} DetA {_fmt(h.deta)} AssA {_fmt(h.assa)}",
        "alpha DetA AssA HOTA",
    ]
    for k, alpha in enumerate(h.alphas):
        lines.append(f"{alpha:.2f} {h.deta_alpha[k]:.6f} "
                     f"{h.assa_alpha[k]:.6f} {h.hota_alpha[k]:.6f}")
    return "\n".join(lines) + "\n"
