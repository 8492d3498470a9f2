"""Training losses with analytic gradients.

Every op returns its scalar value together with a GradientVector over a
named parameter registry, computed by the reverse-mode engine in
`autodiff` and verifiable against central finite differences via
`gradcheck`. Contrastive losses operate on projected, L2-normalized
embeddings (a `raw_dot` switch disables the normalization); the triplet
loss operates on raw embeddings with euclidean distances.

Conventions:
  - `loss_i2t`: image anchors, softmax over the batch's texts.
  - `loss_t2i`: text anchors, softmax over the batch's images.
  - `loss_t2i_multipos`: text anchors where every same-identity image in
    the batch counts as a positive.
  - `loss_i2tce`: label-smoothed cross-entropy of one image against the
    full identity-description bank.
  - Detection terms follow the DETR family: focal classification over all
    query slots, L1 + generalized-IoU regression over matched slots only.
  - Clip-level losses divide detection terms by the clip's total visible
    target count; alignment extension terms average over the pooled
    embedding batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradientVector, Tensor, gather_gradient, parameter
from .config import RunConfig

if TYPE_CHECKING:  # pragma: no cover
    from .assignment import LabelAssignment
    from .dem import FrameOutput
    from .scene import FrameTruth


@dataclass(frozen=True)
class LossWeights:
    lam_cls: float = 2.0
    lam_l1: float = 5.0
    lam_giou: float = 2.0
    lam_tri: float = 2.0
    lam_i2tce: float = 4.0
    margin: float = 0.3
    smoothing: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    temperature: float = 1.0
    raw_dot: bool = False
    aux_weights: tuple = ()

    def validate(self) -> None:
        for name in ("lam_cls", "lam_l1", "lam_giou", "lam_tri", "lam_i2tce"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must be in [0,1)")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @staticmethod
    def from_config(cfg: RunConfig) -> "LossWeights":
        return LossWeights(
            lam_cls=cfg.lam_cls, lam_l1=cfg.lam_l1, lam_giou=cfg.lam_giou,
            lam_tri=cfg.lam_tri, lam_i2tce=cfg.lam_i2tce, margin=cfg.margin,
            smoothing=cfg.smoothing, focal_gamma=cfg.focal_gamma,
            focal_alpha=cfg.focal_alpha, temperature=cfg.temperature,
            raw_dot=cfg.raw_dot)


@dataclass
class LossBreakdown:
    """Per-term values plus the weighted recombination.

    `clip` is the weighted detection/track recombination; `clip_star`
    adds the alignment extension; `total` always equals `clip_star`.
    """

    cls: float = 0.0
    l1: float = 0.0
    giou: float = 0.0
    i2t: float = 0.0
    t2i: float = 0.0
    tri: float = 0.0
    i2tce: float = 0.0
    clip: float = 0.0
    clip_star: float = 0.0
    total: float = 0.0
    vacuous: bool = False


@dataclass
class ProjectionHeads:
    """Bias-free linear maps into the shared embedding space."""

    w_v: np.ndarray  # (dim_image, proj_dim)
    w_t: np.ndarray  # (dim_text, proj_dim)

    @staticmethod
    def create(dim_v: int, dim_t: int, proj_dim: int,
               rng: np.random.Generator) -> "ProjectionHeads":
        return ProjectionHeads(
            w_v=rng.normal(size=(dim_v, proj_dim)) / np.sqrt(dim_v),
            w_t=rng.normal(size=(dim_t, proj_dim)) / np.sqrt(dim_t))


def _proj(x: Tensor, w: Tensor, raw_dot: bool) -> Tensor:
    p = x @ w
    return p if raw_dot else ad.l2_normalize(p, axis=-1)


def similarity(v: np.ndarray, t: np.ndarray, heads: ProjectionHeads,
               raw_dot: bool = False) -> float:
    """Dot product of the projected (and normalized) embedding pair."""
    pv = np.asarray(v, dtype=np.float64) @ heads.w_v
    pt = np.asarray(t, dtype=np.float64) @ heads.w_t
    if not raw_dot:
        nv, nt = np.linalg.norm(pv), np.linalg.norm(pt)
        if nv < 1e-12 or nt < 1e-12:
            raise ValueError("cannot normalize zero-norm projected embedding")
        pv, pt = pv / nv, pt / nt
    return float(pv @ pt)


# -- contrastive losses -----------------------------------------------------------


def _contrastive_graph(vs: np.ndarray, ts: np.ndarray, heads: ProjectionHeads,
                       temperature: float, raw_dot: bool):
    params = {
        "v": parameter(vs), "t": parameter(ts),
        "proj_v": parameter(heads.w_v), "proj_t": parameter(heads.w_t),
    }
    pv = _proj(params["v"], params["proj_v"], raw_dot)
    pt = _proj(params["t"], params["proj_t"], raw_dot)
    sims = (pv @ pt.T) / temperature  # sims[i, a] = s(V_i, T_a)
    return params, sims


def loss_i2t(vs: np.ndarray, ts: np.ndarray, heads: ProjectionHeads,
             temperature: float = 1.0, raw_dot: bool = False
             ) -> tuple[float, GradientVector]:
    """Image-anchored contrastive loss: softmax over the batch's texts."""
    b = len(vs)
    params, sims = _contrastive_graph(vs, ts, heads, temperature, raw_dot)
    diag = sims[np.arange(b), np.arange(b)]
    loss = (ad.logsumexp(sims, axis=1) - diag).mean()
    loss.backward()
    return loss.item(), gather_gradient(params)


def loss_t2i(vs: np.ndarray, ts: np.ndarray, heads: ProjectionHeads,
             temperature: float = 1.0, raw_dot: bool = False
             ) -> tuple[float, GradientVector]:
    """Text-anchored contrastive loss: softmax over the batch's images."""
    b = len(vs)
    params, sims = _contrastive_graph(vs, ts, heads, temperature, raw_dot)
    diag = sims[np.arange(b), np.arange(b)]
    loss = (ad.logsumexp(sims, axis=0) - diag).mean()
    loss.backward()
    return loss.item(), gather_gradient(params)


def loss_t2i_multipos(vs: np.ndarray, ts: np.ndarray, identities,
                      heads: ProjectionHeads, temperature: float = 1.0,
                      raw_dot: bool = False) -> tuple[float, GradientVector]:
    """Text-anchored loss where all same-identity images are positives.

    Per anchor i: -(1/|P_i|) * log( sum_{p in P_i} exp s(V_p, T_i)
                                    / sum_a exp s(V_a, T_i) ),
    P_i = indices sharing identity i; averaged over the batch.
    """
    identities = list(identities)
    b = len(vs)
    if len(ts) != b or len(identities) != b:
        raise ValueError("vs, ts, identities must have equal length")
    params, sims = _contrastive_graph(vs, ts, heads, temperature, raw_dot)
    terms = []
    for i in range(b):
        positives = np.array([p for p in range(b) if identities[p] == identities[i]])
        column = sims[:, i]
        pos_lse = ad.logsumexp(column[positives])
        full_lse = ad.logsumexp(column)
        terms.append((full_lse - pos_lse) / float(len(positives)))
    loss = ad.stack(terms).mean()
    loss.backward()
    return loss.item(), gather_gradient(params)


def loss_triplet(embeddings: np.ndarray, identities, margin: float
                 ) -> tuple[float, GradientVector, bool]:
    """Batch-hard triplet loss over raw embeddings.

    Per anchor: hinge(hardest-positive distance - hardest-negative distance
    + margin). Anchors lacking a positive or a negative are skipped; the
    value averages over counted anchors. Returns (value, gradient, vacuous)
    where vacuous marks a batch with no counted anchors.
    """
    identities = list(identities)
    b = len(embeddings)
    params = {"e": parameter(embeddings)}
    d2 = _pairwise_sqdist(params["e"])
    hinges = []
    for i in range(b):
        pos = np.array([j for j in range(b) if j != i and identities[j] == identities[i]])
        neg = np.array([j for j in range(b) if identities[j] != identities[i]])
        if pos.size == 0 or neg.size == 0:
            continue
        # The epsilon keeps sqrt differentiable when two embeddings
        # coincide (distance zero), where the gradient is then exactly 0.
        hardest_pos = (d2[i][pos].amax() + 1e-16).sqrt()
        hardest_neg = (d2[i][neg].amin() + 1e-16).sqrt()
        hinges.append(ad.maximum(hardest_pos - hardest_neg + margin, 0.0))
    if not hinges:
        return 0.0, gather_gradient(params), True
    loss = ad.stack(hinges).mean()
    loss.backward()
    return loss.item(), gather_gradient(params), False


def _pairwise_sqdist(e: Tensor) -> Tensor:
    b = e.shape[0]
    sq = (e * e).sum(axis=1)
    d2 = sq.reshape(b, 1) + sq.reshape(1, b) - (e @ e.T) * 2.0
    return ad.maximum(d2, 0.0)


def loss_i2tce(v: np.ndarray, texts: np.ndarray, true_id: int, eps: float,
               heads: ProjectionHeads, temperature: float = 1.0,
               raw_dot: bool = False) -> tuple[float, GradientVector]:
    """Label-smoothed cross-entropy of one image against all identity texts.

    Target distribution q_k = (1 - eps) * [k == true_id] + eps / T.
    """
    n_ids = len(texts)
    if n_ids < 1:
        raise ValueError("need at least one text embedding")
    if not 0 <= true_id < n_ids:
        raise IndexError(f"true_id {true_id} out of range for {n_ids} texts")
    params = {
        "v": parameter(np.asarray(v, dtype=np.float64).reshape(1, -1)),
        "texts": parameter(texts),
        "proj_v": parameter(heads.w_v), "proj_t": parameter(heads.w_t),
    }
    pv = _proj(params["v"], params["proj_v"], raw_dot)
    pt = _proj(params["texts"], params["proj_t"], raw_dot)
    sims = ((pv @ pt.T) / temperature).reshape(n_ids)
    log_probs = sims - ad.logsumexp(sims)
    q = np.full(n_ids, eps / n_ids)
    q[true_id] += 1.0 - eps
    loss = -(Tensor(q) * log_probs).sum()
    loss.backward()
    return loss.item(), gather_gradient(params)


def smoothing_targets(n_ids: int, true_id: int, eps: float) -> np.ndarray:
    q = np.full(n_ids, eps / n_ids)
    q[true_id] += 1.0 - eps
    return q


# -- detection losses -------------------------------------------------------------


def focal_terms(logits: Tensor, targets: np.ndarray, gamma: float,
                alpha: float) -> Tensor:
    """Per-element binary focal loss terms on a logits Tensor."""
    t = np.asarray(targets, dtype=np.float64)
    p = logits.sigmoid()
    log_p = ad.log_sigmoid(logits)
    log_np = ad.log_sigmoid(-logits)
    if gamma == 0.0:
        pos = -log_p * alpha
        neg = -log_np * (1.0 - alpha)
    else:
        pos = (1.0 - p) ** gamma * -log_p * alpha
        neg = p ** gamma * -log_np * (1.0 - alpha)
    return pos * t + neg * (1.0 - t)


def loss_focal(logits: np.ndarray, targets: np.ndarray, gamma: float = 2.0,
               alpha: float = 0.25, reduction: str = "mean"
               ) -> tuple[float, GradientVector]:
    params = {"logits": parameter(logits)}
    terms = focal_terms(params["logits"], targets, gamma, alpha)
    loss = terms.mean() if reduction == "mean" else terms.sum()
    loss.backward()
    return loss.item(), gather_gradient(params)


_TINY_SIDE = 1e-6


def tensor_giou(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Generalized IoU of predicted center-format boxes against constants.

    Degenerate predicted sizes clamp to a tiny positive value so training
    steps that momentarily drive a width negative stay finite.
    """
    pw = ad.maximum(pred[:, 2], _TINY_SIDE)
    ph = ad.maximum(pred[:, 3], _TINY_SIDE)
    pl = pred[:, 0] - pw * 0.5
    pr = pred[:, 0] + pw * 0.5
    pt = pred[:, 1] - ph * 0.5
    pb = pred[:, 1] + ph * 0.5
    gl = gt[:, 0] - gt[:, 2] * 0.5
    gr = gt[:, 0] + gt[:, 2] * 0.5
    gtop = gt[:, 1] - gt[:, 3] * 0.5
    gbot = gt[:, 1] + gt[:, 3] * 0.5
    iw = ad.maximum(ad.minimum(pr, gr) - ad.maximum(pl, gl), 0.0)
    ih = ad.maximum(ad.minimum(pb, gbot) - ad.maximum(pt, gtop), 0.0)
    inter = iw * ih
    union = pw * ph + Tensor(gt[:, 2] * gt[:, 3]) - inter
    cw = ad.maximum(pr, gr) - ad.minimum(pl, gl)
    ch = ad.maximum(pb, gbot) - ad.minimum(pt, gtop)
    carea = cw * ch
    return inter / union - (carea - union) / carea


def _frame_terms(logits: Tensor, boxes: Tensor, labels: "LabelAssignment",
                 weights: LossWeights) -> tuple[Tensor, Tensor, Tensor]:
    """Unweighted per-frame sums: (focal over all slots, L1, 1-GIoU)."""
    cls_term = focal_terms(logits, labels.cls_targets, weights.focal_gamma,
                           weights.focal_alpha).sum()
    matched = np.flatnonzero(labels.box_mask)
    if matched.size:
        pred_boxes = boxes[matched]
        gt_boxes = labels.box_targets[matched]
        l1_term = (pred_boxes - Tensor(gt_boxes)).abs().sum()
        giou_term = (1.0 - tensor_giou(pred_boxes, gt_boxes)).sum()
    else:
        l1_term = ad.constant(0.0)
        giou_term = ad.constant(0.0)
    return cls_term, l1_term, giou_term


def detection_loss(frame: "FrameOutput", labels: "LabelAssignment",
                   weights: LossWeights) -> tuple[LossBreakdown, GradientVector]:
    """Weighted sum of focal + L1 + GIoU terms for one frame."""
    params = {
        "cls_logits": parameter(frame.class_logits),
        "boxes": parameter(frame.boxes),
    }
    cls_t, l1_t, giou_t = _frame_terms(params["cls_logits"], params["boxes"],
                                       labels, weights)
    total = (cls_t * weights.lam_cls + l1_t * weights.lam_l1
             + giou_t * weights.lam_giou)
    total.backward()
    value = total.item()
    breakdown = LossBreakdown(cls=cls_t.item(), l1=l1_t.item(),
                              giou=giou_t.item(), clip=value, clip_star=value,
                              total=value)
    return breakdown, gather_gradient(params)


# -- clip-level losses ------------------------------------------------------------


AssignFn = Callable[..., "LabelAssignment"]


def _clip_detection_graph(clip_frames, clip_truths, weights, assign_fn):
    """Shared core: per-frame labeled terms and the parameter registry."""
    if len(clip_frames) != len(clip_truths):
        raise ValueError("clip predictions and truths must align")
    params: dict[str, Tensor] = {}
    cls_terms, l1_terms, giou_terms = [], [], []
    n_targets = 0
    all_labels = []
    aux_weights = weights.aux_weights
    for n, (frame, truth) in enumerate(zip(clip_frames, clip_truths)):
        live = {s.identity for s in frame.slots if s.kind == "track"}
        labels = assign_fn(frame, truth, live, weights)
        all_labels.append(labels)
        n_targets += len(truth.visible())
        tag = f"frame{n:02d}"
        params[f"{tag}.cls_logits"] = parameter(frame.class_logits)
        params[f"{tag}.boxes"] = parameter(frame.boxes)
        c, l, g = _frame_terms(params[f"{tag}.cls_logits"],
                               params[f"{tag}.boxes"], labels, weights)
        cls_terms.append(c)
        l1_terms.append(l)
        giou_terms.append(g)
        for layer, (aux_logits, aux_boxes) in enumerate(frame.aux_outputs):
            w_layer = aux_weights[layer] if layer < len(aux_weights) else 1.0
            if w_layer == 0.0:
                continue
            atag = f"{tag}.aux{layer}"
            params[f"{atag}.cls_logits"] = parameter(aux_logits)
            params[f"{atag}.boxes"] = parameter(aux_boxes)
            c, l, g = _frame_terms(params[f"{atag}.cls_logits"],
                                   params[f"{atag}.boxes"], labels, weights)
            cls_terms.append(c * w_layer)
            l1_terms.append(l * w_layer)
            giou_terms.append(g * w_layer)
    return params, cls_terms, l1_terms, giou_terms, n_targets, all_labels


def collective_loss(clip_frames, clip_truths, weights: LossWeights,
                    assign_fn: AssignFn) -> tuple[LossBreakdown, GradientVector]:
    """Clip-average detection/track loss: summed frame terms over the
    total visible-target count."""
    params, cls_terms, l1_terms, giou_terms, n_targets, _ = \
        _clip_detection_graph(clip_frames, clip_truths, weights, assign_fn)
    if n_targets == 0:
        return LossBreakdown(vacuous=True), gather_gradient(params)
    inv = 1.0 / n_targets
    cls_t = ad.stack(cls_terms).sum() * inv
    l1_t = ad.stack(l1_terms).sum() * inv
    giou_t = ad.stack(giou_terms).sum() * inv
    clip = (cls_t * weights.lam_cls + l1_t * weights.lam_l1
            + giou_t * weights.lam_giou)
    clip.backward()
    value = clip.item()
    breakdown = LossBreakdown(cls=cls_t.item(), l1=l1_t.item(),
                              giou=giou_t.item(), clip=value, clip_star=value,
                              total=value)
    return breakdown, gather_gradient(params)


def harvest_pool(clip_frames, clip_truths, weights: LossWeights,
                 assign_fn: AssignFn) -> tuple[list[int], np.ndarray]:
    """Instance embeddings of identity-bearing, non-background slots.

    Track slots count only when their identity is visible in the frame, so
    occluded-frame embeddings never enter the alignment batch.
    """
    ids: list[int] = []
    embeds: list[np.ndarray] = []
    for frame, truth in zip(clip_frames, clip_truths):
        live = {s.identity for s in frame.slots if s.kind == "track"}
        labels = assign_fn(frame, truth, live, weights)
        for k, (slot, label, identity) in enumerate(
                zip(frame.slots, labels.labels, labels.identities)):
            if label == "background" or identity is None:
                continue
            if label == "tracked" and not labels.box_mask[k]:
                continue
            ids.append(identity)
            embeds.append(np.asarray(slot.embed, dtype=np.float64))
    if not embeds:
        return [], np.zeros((0, 1))
    return ids, np.stack(embeds)


def collective_loss_extended(clip_frames, clip_truths,
                             descriptions: dict[int, np.ndarray],
                             weights: LossWeights, assign_fn: AssignFn,
                             proj_v: np.ndarray,
                             pool: tuple[list[int], np.ndarray] | None = None
                             ) -> tuple[LossBreakdown, GradientVector]:
    """Clip loss extended with triplet + description cross-entropy terms.

    The extension averages per-sample losses over the pooled embedding
    batch: triplet hinges on raw embeddings, label-smoothed cross-entropy
    of each projected embedding against the frozen description bank.
    When `pool` is omitted the batch is harvested from the clip itself.
    """
    params, cls_terms, l1_terms, giou_terms, n_targets, _ = \
        _clip_detection_graph(clip_frames, clip_truths, weights, assign_fn)
    if pool is None:
        pool = harvest_pool(clip_frames, clip_truths, weights, assign_fn)
    pool_ids, pool_embeds = pool
    for identity in pool_ids:
        if identity not in descriptions:
            raise ValueError(f"missing text description for identity {identity}")
    params["pool.embeddings"] = parameter(
        pool_embeds if len(pool_ids) else np.zeros((0, 1)))
    params["proj_v"] = parameter(proj_v)

    if n_targets == 0:
        return LossBreakdown(vacuous=True), gather_gradient(params)

    inv = 1.0 / n_targets
    cls_t = ad.stack(cls_terms).sum() * inv
    l1_t = ad.stack(l1_terms).sum() * inv
    giou_t = ad.stack(giou_terms).sum() * inv
    clip = (cls_t * weights.lam_cls + l1_t * weights.lam_l1
            + giou_t * weights.lam_giou)

    tri_value = ad.constant(0.0)
    ce_value = ad.constant(0.0)
    n_pool = len(pool_ids)
    if n_pool:
        e = params["pool.embeddings"]
        # triplet hinges on raw embeddings; uncounted anchors contribute 0
        d2 = _pairwise_sqdist(e)
        hinges = []
        for i in range(n_pool):
            pos = np.array([j for j in range(n_pool)
                            if j != i and pool_ids[j] == pool_ids[i]])
            neg = np.array([j for j in range(n_pool)
                            if pool_ids[j] != pool_ids[i]])
            if pos.size == 0 or neg.size == 0:
                continue
            hp = (d2[i][pos].amax() + 1e-16).sqrt()
            hn = (d2[i][neg].amin() + 1e-16).sqrt()
            hinges.append(ad.maximum(hp - hn + weights.margin, 0.0))
        if hinges:
            tri_value = ad.stack(hinges).sum() / float(n_pool)
        # description cross-entropy against the full frozen bank
        bank_ids = sorted(descriptions)
        bank = np.stack([np.asarray(descriptions[i], dtype=np.float64)
                         for i in bank_ids])
        id_to_col = {identity: k for k, identity in enumerate(bank_ids)}
        pv = _proj(e, params["proj_v"], weights.raw_dot)
        sims = (pv @ Tensor(bank).T) / weights.temperature
        ce_terms = []
        for i in range(n_pool):
            row = sims[i]
            log_probs = row - ad.logsumexp(row)
            q = smoothing_targets(len(bank_ids), id_to_col[pool_ids[i]],
                                  weights.smoothing)
            ce_terms.append(-(Tensor(q) * log_probs).sum())
        ce_value = ad.stack(ce_terms).sum() / float(n_pool)

    clip_star = clip + tri_value * weights.lam_tri + ce_value * weights.lam_i2tce
    clip_star.backward()
    breakdown = LossBreakdown(
        cls=cls_t.item(), l1=l1_t.item(), giou=giou_t.item(),
        tri=tri_value.item(), i2tce=ce_value.item(), clip=clip.item(),
        clip_star=clip_star.item(), total=clip_star.item())
    return breakdown, gather_gradient(params)


# -- finite-difference checking ---------------------------------------------------


@dataclass
class GradcheckEntry:
    name: str
    max_rel_err: float
    passed: bool
    note: str = ""


@dataclass
class GradcheckReport:
    entries: list[GradcheckEntry]
    passed: bool

    def failing(self) -> list[str]:
        return [e.name for e in self.entries if not e.passed]


def gradcheck(fn: Callable[[dict[str, np.ndarray]], tuple[float, GradientVector]],
              params: dict[str, np.ndarray], step: float = 1e-5,
              rtol: float = 1e-4) -> GradcheckReport:
    """Compare fn's analytic gradient against central finite differences.

    fn maps a dict of named arrays to (value, GradientVector); every
    registry entry is perturbed coordinate-wise. Non-finite probe values
    are reported as failures rather than skipped.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, gvec = fn(work)
    entries = []
    for name in work:
        analytic = gvec.get(name)
        arr = work[name]
        flat = arr.ravel()
        numeric = np.zeros_like(flat)
        probe_ok = True
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi, _ = fn(work)
            flat[i] = keep - step
            lo, _ = fn(work)
            flat[i] = keep
            if not (np.isfinite(hi) and np.isfinite(lo)):
                probe_ok = False
                break
            numeric[i] = (hi - lo) / (2.0 * step)
        if not probe_ok:
            entries.append(GradcheckEntry(name=name, max_rel_err=np.inf,
                                          passed=False,
                                          note="non-finite probe value"))
            continue
        numeric = numeric.reshape(arr.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if arr.size else 0.0
        entries.append(GradcheckEntry(name=name, max_rel_err=rel,
                                      passed=rel < rtol))
    return GradcheckReport(entries=entries, passed=all(e.passed for e in entries))
