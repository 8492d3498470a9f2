"""Independent reference implementations used to check the package.

Everything here is deliberately written the slow, obvious way (exhaustive
enumeration, scalar arithmetic) so it can serve as an oracle for the fast
implementations under test. Nothing imports from the package except plain
data containers.
"""

import itertools
import math
from itertools import permutations

import numpy as np


def brute_force_matching(values: np.ndarray) -> tuple[int, float]:
    """Exhaustive maximal-cardinality minimum-cost matching.

    Returns (cardinality, total_cost). Non-finite entries are unmatchable.
    Only sensible up to about 7x7.
    """
    values = np.asarray(values, dtype=float)
    n_rows, n_cols = values.shape
    n = max(n_rows, n_cols)
    best_card, best_cost = 0, 0.0
    first = True
    for perm in permutations(range(n)):
        card, cost = 0, 0.0
        for r in range(n_rows):
            c = perm[r]
            if c < n_cols and np.isfinite(values[r, c]):
                card += 1
                cost += values[r, c]
        if first or card > best_card or (card == best_card and cost < best_cost):
            best_card, best_cost = card, cost
            first = False
    return best_card, best_cost


def scalar_focal(x: float, y: float, gamma: float, alpha: float) -> float:
    """One binary focal-loss term, plain math."""
    p = 1.0 / (1.0 + math.exp(-x))
    pos = alpha * (1.0 - p) ** gamma * -math.log(p)
    neg = (1.0 - alpha) * p ** gamma * -math.log(1.0 - p)
    return y * pos + (1.0 - y) * neg


def scalar_giou(a, b) -> float:
    """Generalized IoU of two center-format boxes, plain scalar arithmetic."""
    acx, acy, aw, ah = (float(x) for x in a)
    bcx, bcy, bw, bh = (float(x) for x in b)
    al, ar = acx - aw / 2, acx + aw / 2
    at, ab_ = acy - ah / 2, acy + ah / 2
    bl, br = bcx - bw / 2, bcx + bw / 2
    bt, bb = bcy - bh / 2, bcy + bh / 2
    iw = max(0.0, min(ar, br) - max(al, bl))
    ih = max(0.0, min(ab_, bb) - max(at, bt))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    cw = max(ar, br) - min(al, bl)
    ch = max(ab_, bb) - min(at, bt)
    carea = cw * ch
    return inter / union - (carea - union) / carea


def reference_detection_terms(class_logits, boxes, labels, gamma, alpha
                              ) -> tuple[float, float, float]:
    """Unweighted (classification, L1, 1-GIoU) sums for one frame."""
    cls = 0.0
    for k in range(len(class_logits)):
        cls += scalar_focal(float(class_logits[k]),
                            float(labels.cls_targets[k]), gamma, alpha)
    l1 = 0.0
    gi = 0.0
    for k in range(len(class_logits)):
        if not labels.box_mask[k]:
            continue
        for d in range(4):
            l1 += abs(float(boxes[k][d]) - float(labels.box_targets[k][d]))
        gi += 1.0 - scalar_giou(boxes[k], labels.box_targets[k])
    return cls, l1, gi


# -- tracking metric references ---------------------------------------------------
#
# Independent recomputations of the three evaluators with exhaustive
# matching enumeration in place of the incremental assignment solver.
# Sized for small fixtures (<= ~5 identities per side).


def _iou_ltwh_ref(a, b):
    al, at, aw, ah = a
    bl, bt, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    iw = min(al + aw, bl + bw) - max(al, bl)
    ih = min(at + ah, bt + bh) - max(at, bt)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _frames_ref(gt, pred):
    """frame -> (gt lines sorted by id, pred lines sorted by id)."""
    frames = {}
    for line in gt:
        frames.setdefault(line.frame, ([], []))[0].append(line)
    for line in pred:
        frames.setdefault(line.frame, ([], []))[1].append(line)
    out = {}
    for frame in sorted(frames):
        gs, ps = frames[frame]
        out[frame] = (sorted(gs, key=lambda m: m.track_id),
                      sorted(ps, key=lambda m: m.track_id))
    return out


def _box(line):
    return (line.left, line.top, line.width, line.height)


def _all_partial_matchings(allowed, n_rows, n_cols):
    """Yield every injective pair set drawn from `allowed` (row, col) pairs."""
    by_row = {}
    for r, c in allowed:
        by_row.setdefault(r, []).append(c)
    rows = sorted(by_row)

    def recurse(k, used, chosen):
        if k == len(rows):
            yield list(chosen)
            return
        row = rows[k]
        yield from recurse(k + 1, used, chosen)
        for col in by_row[row]:
            if col not in used:
                chosen.append((row, col))
                used.add(col)
                yield from recurse(k + 1, used, chosen)
                used.discard(col)
                chosen.pop()

    yield from recurse(0, set(), [])


def _full_matchings(n_rows, n_cols):
    """Yield every maximum-cardinality matching as a list of (row, col)."""
    if n_rows <= n_cols:
        for cols in itertools.permutations(range(n_cols), n_rows):
            yield list(enumerate(cols))
    else:
        for rows in itertools.permutations(range(n_rows), n_cols):
            yield [(r, c) for c, r in enumerate(rows)]


def brute_clear_mot(gt, pred, iou_threshold=0.5):
    """CLEAR protocol with exhaustive optimal matching per frame.

    Returns (mota, fp, fn, ids); mota is None for empty gt.
    """
    frames = _frames_ref(gt, pred)
    last = {}
    fp = fn = switches = 0
    for frame, (gs, ps) in frames.items():
        iou = [[_iou_ltwh_ref(_box(g), _box(p)) for p in ps] for g in gs]
        matched = {}
        used = set()
        for i, g in enumerate(gs):
            partner = last.get(g.track_id)
            for j, p in enumerate(ps):
                if (p.track_id == partner and p.track_id not in used
                        and iou[i][j] >= iou_threshold):
                    matched[g.track_id] = p.track_id
                    used.add(p.track_id)
        rows = [i for i, g in enumerate(gs) if g.track_id not in matched]
        cols = [j for j, p in enumerate(ps) if p.track_id not in used]
        allowed = [(i, j) for i in rows for j in cols
                   if iou[i][j] >= iou_threshold]
        best = None
        best_key = None
        for pairs in _all_partial_matchings(allowed, len(gs), len(ps)):
            cost = sum(1.0 - iou[i][j] for i, j in pairs)
            key = (-len(pairs), cost, sorted(pairs))
            if best_key is None or key < best_key:
                best_key = key
                best = pairs
        for i, j in best or []:
            matched[gs[i].track_id] = ps[j].track_id
            used.add(ps[j].track_id)
        for g in gs:
            if g.track_id in matched:
                partner = matched[g.track_id]
                previous = last.get(g.track_id)
                if previous is not None and previous != partner:
                    switches += 1
                last[g.track_id] = partner
            else:
                fn += 1
        fp += len(ps) - len(matched)
    total = len(gt)
    mota = None if total == 0 else 1.0 - (fn + fp + switches) / total
    return mota, fp, fn, switches


def brute_idf1(gt, pred, iou_threshold=0.5):
    """Exhaustive best trajectory pairing; returns (idf1, idtp)."""
    gt_ids = sorted({line.track_id for line in gt})
    pred_ids = sorted({line.track_id for line in pred})
    overlap = {}
    for frame, (gs, ps) in _frames_ref(gt, pred).items():
        for g in gs:
            for p in ps:
                if _iou_ltwh_ref(_box(g), _box(p)) >= iou_threshold:
                    key = (g.track_id, p.track_id)
                    overlap[key] = overlap.get(key, 0) + 1
    best = 0
    if gt_ids and pred_ids:
        allowed = [(i, j) for i in range(len(gt_ids))
                   for j in range(len(pred_ids))]
        for pairs in _full_matchings(len(gt_ids), len(pred_ids)):
            total = sum(overlap.get((gt_ids[i], pred_ids[j]), 0)
                        for i, j in pairs)
            best = max(best, total)
    idtp = best
    if not gt:
        return None, idtp
    return 2.0 * idtp / (2.0 * idtp + (len(pred) - idtp)
                         + (len(gt) - idtp)), idtp


def brute_hota(gt, pred):
    """Two-pass association-guided evaluation with exhaustive matching.

    Returns (hota, deta, assa, per-alpha hota list) with None headline
    values for empty gt.
    """
    alphas = [round(0.05 * k, 2) for k in range(1, 20)]
    eps = float(np.finfo(np.float64).eps)
    frames = _frames_ref(gt, pred)
    gt_count = {}
    pred_count = {}
    potential = {}
    for frame, (gs, ps) in frames.items():
        sims = {}
        row_sum = {}
        col_sum = {}
        for g in gs:
            for p in ps:
                s = _iou_ltwh_ref(_box(g), _box(p))
                sims[(g.track_id, p.track_id)] = s
                row_sum[g.track_id] = row_sum.get(g.track_id, 0.0) + s
                col_sum[p.track_id] = col_sum.get(p.track_id, 0.0) + s
        for (gid, pid), s in sims.items():
            denom = row_sum[gid] + col_sum[pid] - s
            if denom > eps:
                potential[(gid, pid)] = potential.get((gid, pid), 0.0) \
                    + s / denom
        for g in gs:
            gt_count[g.track_id] = gt_count.get(g.track_id, 0) + 1
        for p in ps:
            pred_count[p.track_id] = pred_count.get(p.track_id, 0) + 1

    def alignment(gid, pid):
        pot = potential.get((gid, pid), 0.0)
        return pot / (gt_count[gid] + pred_count[pid] - pot)

    tp = [0] * len(alphas)
    fn = [0] * len(alphas)
    fp = [0] * len(alphas)
    matches = [dict() for _ in alphas]
    for frame, (gs, ps) in frames.items():
        if not gs:
            for a in range(len(alphas)):
                fp[a] += len(ps)
            continue
        if not ps:
            for a in range(len(alphas)):
                fn[a] += len(gs)
            continue
        sim = [[_iou_ltwh_ref(_box(g), _box(p)) for p in ps] for g in gs]
        best = None
        best_total = None
        for pairs in _full_matchings(len(gs), len(ps)):
            total = sum(alignment(gs[i].track_id, ps[j].track_id) * sim[i][j]
                        for i, j in pairs)
            if best_total is None or total > best_total + 1e-15:
                best_total = total
                best = pairs
        for a, alpha in enumerate(alphas):
            kept = [(i, j) for i, j in best if sim[i][j] >= alpha - eps]
            tp[a] += len(kept)
            fn[a] += len(gs) - len(kept)
            fp[a] += len(ps) - len(kept)
            for i, j in kept:
                key = (gs[i].track_id, ps[j].track_id)
                matches[a][key] = matches[a].get(key, 0) + 1

    deta = [tp[a] / max(1, tp[a] + fn[a] + fp[a]) for a in range(len(alphas))]
    assa = []
    for a in range(len(alphas)):
        acc = 0.0
        for (gid, pid), count in matches[a].items():
            jac = count / max(1, gt_count[gid] + pred_count[pid] - count)
            acc += count * jac
        assa.append(acc / max(1, tp[a]))
    hota_alpha = [math.sqrt(deta[a] * assa[a]) for a in range(len(alphas))]
    if not gt:
        return None, None, None, hota_alpha
    n = len(alphas)
    return (sum(hota_alpha) / n, sum(deta) / n, sum(assa) / n, hota_alpha)
