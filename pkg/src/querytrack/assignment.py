"""Bipartite matching and label assignment for detect/track queries.

The solver is a potentials-based Hungarian implementation (square padding,
shortest augmenting paths) chosen over library routines because the
contract here differs in two ways: an all-forbidden matrix yields an empty
matching rather than an infeasibility error, and tie-breaking is pinned to
index order so runs reproduce bit-for-bit.

Two assignment schemes share the same machinery:

  - `qbs_assign` matches detect queries to every visible target; matches
    whose identity is already owned by a track query are labeled duplicates
    (suppression targets), the rest newborns.
  - `motr_assign` matches detect queries only to targets without a live
    track, the conventional newborn-only baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .geometry import BBox, giou, l1_box
from .losses import LossWeights

if TYPE_CHECKING:  # pragma: no cover
    from .dem import FrameOutput, QuerySlot
    from .scene import FrameTruth

FORBIDDEN = np.inf

TRACKED = "tracked"
NEWBORN = "newborn"
DUPLICATE = "duplicate"
BACKGROUND = "background"


class CapacityError(ValueError):
    """Fewer detect queries than visible targets: a configuration bug."""


@dataclass
class CostMatrix:
    """Rows are predictions, columns are targets. Entries are nonnegative
    finite costs; FORBIDDEN (inf) marks a disallowed pair."""

    values: np.ndarray

    def validate(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {v.shape}")
        if np.isnan(v).any():
            raise ValueError("cost matrix contains NaN")
        finite = v[np.isfinite(v)]
        if finite.size and finite.min() < 0:
            raise ValueError("cost matrix entries must be >= 0")


@dataclass
class AssignmentResult:
    pairs: list[tuple[int, int]]
    total_cost: float
    unmatched_rows: list[int]
    unmatched_cols: list[int]


def _solve_square(a: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching on a finite square matrix.

    Returns col -> row (0-based). Augmenting rows are processed in index
    order and column ties resolve to the lowest index, so the result is
    deterministic.
    """
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # 1-based row matched to column j; 0 = free
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_to_row = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        col_to_row[j - 1] = p[j] - 1
    return col_to_row


def _exchange_pass(values: np.ndarray, finite: np.ndarray,
                   pairs: list[tuple[int, int]],
                   free_rows: set, free_cols: set) -> bool:
    """One pass of cost-preserving exchanges toward index-order ties.

    Swaps that keep total cost and cardinality intact but hand lower rows
    to lower columns (or replace a matched row/column by a free lower one)
    are applied in place. Returns True when something moved.
    """
    changed = False
    for a in range(len(pairs)):
        r1, c1 = pairs[a]
        for b in range(len(pairs)):
            r2, c2 = pairs[b]
            if (r1 < r2 and c2 < c1 and finite[r1, c2] and finite[r2, c1]
                    and values[r1, c2] + values[r2, c1]
                    == values[r1, c1] + values[r2, c2]):
                pairs[a] = (r1, c2)
                pairs[b] = (r2, c1)
                r1, c1 = pairs[a]
                changed = True
        for r in sorted(free_rows):
            if r < r1 and finite[r, c1] and values[r, c1] == values[r1, c1]:
                free_rows.remove(r)
                free_rows.add(r1)
                pairs[a] = (r, c1)
                r1, c1 = pairs[a]
                changed = True
                break
        for c in sorted(free_cols):
            if c < c1 and finite[r1, c] and values[r1, c] == values[r1, c1]:
                free_cols.remove(c)
                free_cols.add(c1)
                pairs[a] = (r1, c)
                r1, c1 = pairs[a]
                changed = True
                break
    return changed


def hungarian(cost: CostMatrix | np.ndarray) -> AssignmentResult:
    """Minimum-total-cost maximal matching of a rectangular cost matrix.

    Forbidden pairs are never matched; if everything is forbidden the
    matching is empty. Among matchings of maximal cardinality the total
    cost is minimal; exact cost ties prefer low rows holding low columns.
    """
    matrix = cost if isinstance(cost, CostMatrix) else CostMatrix(np.asarray(cost))
    matrix.validate()
    values = np.asarray(matrix.values, dtype=np.float64)
    n_rows, n_cols = values.shape
    finite = np.isfinite(values)
    if n_rows == 0 or n_cols == 0 or not finite.any():
        return AssignmentResult(pairs=[], total_cost=0.0,
                                unmatched_rows=list(range(n_rows)),
                                unmatched_cols=list(range(n_cols)))
    # Padding/forbidden entries share one large value: any matching that
    # uses fewer of them beats any that uses more, so real-pair cardinality
    # is maximized first and real cost minimized second.
    big = float(values[finite].sum()) + 1.0
    n = max(n_rows, n_cols)
    square = np.full((n, n), big)
    square[:n_rows, :n_cols] = np.where(finite, values, big)
    col_to_row = _solve_square(square)
    pairs = []
    for c in range(n_cols):
        r = int(col_to_row[c])
        if r < n_rows and finite[r, c]:
            pairs.append((r, c))
    free_rows = set(range(n_rows)) - {r for r, _ in pairs}
    free_cols = set(range(n_cols)) - {c for _, c in pairs}
    while _exchange_pass(values, finite, pairs, free_rows, free_cols):
        pass
    pairs.sort()
    total = float(sum(values[r, c] for r, c in pairs))
    return AssignmentResult(
        pairs=pairs,
        total_cost=total,
        unmatched_rows=sorted(free_rows),
        unmatched_cols=sorted(free_cols))


def _log_sigmoid(x: float) -> float:
    return -float(np.logaddexp(0.0, -x))


def match_cost(pred: "QuerySlot", gt: tuple[int, BBox],
               weights: LossWeights) -> float:
    """Matching cost of one prediction against one target.

    Classification term is the focal-style cost (positive-confidence
    reward minus negative-confidence reward), so assignment ranks
    candidates the same way the classification loss does. The value can
    be negative; `qbs_assign` shifts the full matrix before solving.
    """
    _, gt_box = gt
    x = float(pred.class_logit)
    log_p = _log_sigmoid(x)
    log_np = _log_sigmoid(-x)
    p = np.exp(log_p)
    gamma, alpha = weights.focal_gamma, weights.focal_alpha
    pos_cost = alpha * (1.0 - p) ** gamma * -log_p
    neg_cost = (1.0 - alpha) * p ** gamma * -log_np
    cls_cost = pos_cost - neg_cost
    return (weights.lam_cls * cls_cost
            + weights.lam_l1 * l1_box(pred.box, gt_box)
            + weights.lam_giou * (1.0 - giou(pred.box, gt_box)))


@dataclass
class LabelAssignment:
    """Per-slot supervision targets, index-aligned with the frame's slots."""

    labels: list[str]
    identities: list[int | None]
    cls_targets: np.ndarray   # (S,) 0/1 foreground targets
    dedup_targets: np.ndarray  # (S,) 0/1 keep targets
    dedup_mask: np.ndarray     # (S,) bool, True where the keep target applies
    box_mask: np.ndarray       # (S,) bool, True where box regression applies
    box_targets: np.ndarray    # (S, 4) center-format targets
    detect_matches: list[tuple[int, int]] = field(default_factory=list)

    def positive_detect_count(self) -> int:
        return sum(1 for lbl in self.labels if lbl in (NEWBORN, DUPLICATE))


def _assign(frame: "FrameOutput", truth: "FrameTruth", live_tracks: set,
            weights: LossWeights, balanced: bool) -> LabelAssignment:
    slots = frame.slots
    n = len(slots)
    labels = [BACKGROUND] * n
    identities: list[int | None] = [None] * n
    cls_targets = np.zeros(n)
    dedup_targets = np.zeros(n)
    dedup_mask = np.zeros(n, dtype=bool)
    box_mask = np.zeros(n, dtype=bool)
    box_targets = np.zeros((n, 4))

    visible = truth.visible()
    visible_by_id = {o.identity: o for o in visible}
    detect_idx = [k for k, s in enumerate(slots) if s.kind == "detect"]
    track_idx = [k for k, s in enumerate(slots) if s.kind == "track"]

    for k in track_idx:
        identity = slots[k].identity
        labels[k] = TRACKED
        identities[k] = identity
        dedup_mask[k] = True
        if identity in visible_by_id:
            obj = visible_by_id[identity]
            cls_targets[k] = 1.0
            dedup_targets[k] = 1.0
            box_mask[k] = True
            box_targets[k] = obj.box.as_tuple()
        # invisible this frame: class/box positives are withheld, only the
        # suppress target (0) applies

    if balanced:
        targets = list(visible)
    else:
        targets = [o for o in visible if o.identity not in live_tracks]

    if len(detect_idx) < len(visible):
        raise CapacityError(
            f"{len(detect_idx)} detect queries cannot cover "
            f"{len(visible)} visible targets")

    matches: list[tuple[int, int]] = []
    if targets and detect_idx:
        raw = np.array([[match_cost(slots[k], (o.identity, o.box), weights)
                         for o in targets] for k in detect_idx])
        # A constant shift keeps entries nonnegative without changing the
        # argmin: every maximal matching here has the same cardinality.
        low = raw.min()
        if low < 0:
            raw = raw - low
        result = hungarian(CostMatrix(raw))
        for r, c in result.pairs:
            k = detect_idx[r]
            obj = targets[c]
            duplicate = obj.identity in live_tracks
            labels[k] = DUPLICATE if duplicate else NEWBORN
            identities[k] = obj.identity
            cls_targets[k] = 1.0
            dedup_targets[k] = 0.0 if duplicate else 1.0
            dedup_mask[k] = True
            box_mask[k] = True
            box_targets[k] = obj.box.as_tuple()
            matches.append((k, obj.identity))

    return LabelAssignment(labels=labels, identities=identities,
                           cls_targets=cls_targets, dedup_targets=dedup_targets,
                           dedup_mask=dedup_mask, box_mask=box_mask,
                           box_targets=box_targets, detect_matches=matches)


def qbs_assign(frame: "FrameOutput", truth: "FrameTruth", live_tracks: set,
               weights: LossWeights) -> LabelAssignment:
    """Balanced assignment: detect queries cover all visible targets."""
    return _assign(frame, truth, live_tracks, weights, balanced=True)


def motr_assign(frame: "FrameOutput", truth: "FrameTruth", live_tracks: set,
                weights: LossWeights) -> LabelAssignment:
    """Newborn-only baseline: detect queries match unowned targets only."""
    return _assign(frame, truth, live_tracks, weights, balanced=False)


def assignment_fn(name: str):
    """Resolve an assignment scheme by its config name."""
    if name == "qbs":
        return qbs_assign
    if name == "motr":
        return motr_assign
    raise ValueError(f"assign must be 'qbs' or 'motr', got {name!r}")
