"""Deduplication module and track keep/drop logic.

A one-layer multi-head self-attention block (with residual) runs over the
concatenated detect+track query outputs; a two-layer MLP maps each attended
state to a scalar dedup logit. A separate two-layer head predicts class
logits from the raw (pre-attention) outputs. The tracking score is the
geometric mean of the sigmoid class and dedup confidences and is the only
quantity gating promotion and retirement.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import GradientVector, Tensor, gather_gradient, parameter
from .autodiff import _sigmoid as _np_sigmoid
from .geometry import BBox
from .losses import focal_terms

if TYPE_CHECKING:  # pragma: no cover
    from .assignment import LabelAssignment


@dataclass(frozen=True)
class QuerySlot:
    """One decoder slot: raw output, box/class predictions, embeddings.

    `dedup_logit` is populated after the dedup pass; slots coming straight
    out of the decoder carry 0 there.
    """

    kind: str  # "detect" or "track"
    box: BBox
    class_logit: float
    embed: np.ndarray    # instance embedding (projection target)
    output: np.ndarray   # decoder output state (dedup module input)
    dedup_logit: float = 0.0
    identity: int | None = None

    def __post_init__(self):
        if self.kind not in ("detect", "track"):
            raise ValueError(f"slot kind must be detect/track, got {self.kind!r}")
        if self.kind == "track" and self.identity is None:
            raise ValueError("track slots must carry an identity")


@dataclass(frozen=True)
class FrameOutput:
    frame: int
    slots: tuple[QuerySlot, ...]
    # earlier pseudo-layer views as (class_logits, boxes) pairs
    aux_outputs: tuple = ()

    @property
    def class_logits(self) -> np.ndarray:
        return np.array([s.class_logit for s in self.slots], dtype=np.float64)

    @property
    def boxes(self) -> np.ndarray:
        if not self.slots:
            return np.zeros((0, 4))
        return np.array([s.box.as_tuple() for s in self.slots], dtype=np.float64)

    def with_dedup(self, logits: np.ndarray) -> "FrameOutput":
        slots = tuple(dataclasses.replace(s, dedup_logit=float(d))
                      for s, d in zip(self.slots, logits))
        return dataclasses.replace(self, slots=slots)


_PARAM_FIELDS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
                 "w1", "b1", "w2", "b2", "c_w1", "c_b1", "c_w2", "c_b2")


@dataclass
class DemParams:
    """Attention projections, dedup MLP, and class-head MLP weights."""

    heads: int
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    c_w1: np.ndarray
    c_b1: np.ndarray
    c_w2: np.ndarray
    c_b2: np.ndarray

    @staticmethod
    def create(model_dim: int, heads: int, hidden: int,
               rng: np.random.Generator) -> "DemParams":
        if model_dim % heads != 0:
            raise ValueError("model_dim must be divisible by heads")
        scale = 1.0 / np.sqrt(model_dim)

        def w(shape):
            return rng.normal(size=shape) * scale

        return DemParams(
            heads=heads,
            w_q=w((model_dim, model_dim)), b_q=np.zeros(model_dim),
            w_k=w((model_dim, model_dim)), b_k=np.zeros(model_dim),
            w_v=w((model_dim, model_dim)), b_v=np.zeros(model_dim),
            w_o=w((model_dim, model_dim)), b_o=np.zeros(model_dim),
            w1=w((model_dim, hidden)), b1=np.zeros(hidden),
            w2=rng.normal(size=(hidden, 1)) / np.sqrt(hidden), b2=np.zeros(1),
            c_w1=w((model_dim, hidden)), c_b1=np.zeros(hidden),
            c_w2=rng.normal(size=(hidden, 1)) / np.sqrt(hidden), c_b2=np.zeros(1))

    def registry(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_FIELDS}

    def clone(self) -> "DemParams":
        return DemParams(heads=self.heads,
                         **{k: v.copy() for k, v in self.registry().items()})

    def to_state(self) -> dict:
        state = {"heads": self.heads}
        for name, arr in self.registry().items():
            state[name] = arr.tolist()
        return state

    @staticmethod
    def from_state(state: dict) -> "DemParams":
        arrays = {name: np.array(state[name], dtype=np.float64)
                  for name in _PARAM_FIELDS}
        return DemParams(heads=int(state["heads"]), **arrays)


def save_dem(params: DemParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params.to_state(), indent=2,
                                     sort_keys=True) + "\n")


def load_dem(path: str | Path) -> DemParams:
    return DemParams.from_state(json.loads(Path(path).read_text()))


def _mha_graph(tp: dict[str, Tensor], x: Tensor, heads: int
               ) -> tuple[Tensor, list[Tensor]]:
    """Residual self-attention over slot states; returns per-head weights."""
    model_dim = x.shape[1]
    dh = model_dim // heads
    q = x @ tp["w_q"] + tp["b_q"]
    k = x @ tp["w_k"] + tp["b_k"]
    v = x @ tp["w_v"] + tp["b_v"]
    head_outs = []
    attns = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        att = ad.softmax((qh @ kh.T) / np.sqrt(dh), axis=1)
        attns.append(att)
        head_outs.append(att @ vh)
    merged = ad.concat(head_outs, axis=1)
    return x + (merged @ tp["w_o"] + tp["b_o"]), attns


def _dedup_graph(tp: dict[str, Tensor], hidden: Tensor) -> Tensor:
    return ((hidden @ tp["w1"] + tp["b1"]).relu() @ tp["w2"] + tp["b2"]).reshape(-1)


def _class_graph(tp: dict[str, Tensor], x: Tensor) -> Tensor:
    return ((x @ tp["c_w1"] + tp["c_b1"]).relu() @ tp["c_w2"] + tp["c_b2"]).reshape(-1)


def _const_params(params: DemParams) -> dict[str, Tensor]:
    return {name: Tensor(arr) for name, arr in params.registry().items()}


def _slot_matrix(slots) -> np.ndarray:
    return np.stack([np.asarray(s.output, dtype=np.float64) for s in slots])


def mha_forward(params: DemParams, slots, return_attention: bool = False):
    """Attended slot states (numpy). Optionally the (H, S, S) weights."""
    if not slots:
        raise ValueError("need at least one slot")
    x = Tensor(_slot_matrix(slots))
    hidden, attns = _mha_graph(_const_params(params), x, params.heads)
    if return_attention:
        return hidden.data, np.stack([a.data for a in attns])
    return hidden.data


def dem_forward(params: DemParams, slots) -> np.ndarray:
    """Per-slot dedup logits."""
    if not slots:
        return np.zeros(0)
    tp = _const_params(params)
    x = Tensor(_slot_matrix(slots))
    hidden, _ = _mha_graph(tp, x, params.heads)
    return _dedup_graph(tp, hidden).data.copy()


def dem_class_logits(params: DemParams, slots) -> np.ndarray:
    """Class logits from raw (pre-attention) slot states."""
    if not slots:
        return np.zeros(0)
    return _class_graph(_const_params(params), Tensor(_slot_matrix(slots))).data.copy()


def tracking_score(class_logit, dedup_logit):
    """Geometric mean of the two sigmoid confidences; in (0,1)."""
    c = _np_sigmoid(np.asarray(class_logit, dtype=np.float64))
    d = _np_sigmoid(np.asarray(dedup_logit, dtype=np.float64))
    out = np.sqrt(c * d)
    return float(out) if out.ndim == 0 else out


@dataclass
class QimResult:
    promoted_slots: list[int]          # detect slot indices passing the gate
    retired: list[int]                 # identities dropped this frame
    survivors: list[int]               # identities still alive
    miss_counts: dict[int, int]        # updated consecutive-miss counters


def qim_update(slots, scores: np.ndarray, tau: float, patience: int,
               live_tracks: dict[int, int]) -> QimResult:
    """Keep/drop update from tracking scores.

    Detect slots scoring above tau are promotion candidates (fresh
    identities are allocated by the caller). Track slots at or below tau
    accumulate consecutive misses and retire once the count reaches
    `patience`; any frame above tau resets the counter.
    """
    promoted = []
    miss_counts = dict(live_tracks)
    retired = []
    for k, slot in enumerate(slots):
        s = float(scores[k])
        if slot.kind == "detect":
            if s > tau:
                promoted.append(k)
            continue
        identity = slot.identity
        if s > tau:
            miss_counts[identity] = 0
        else:
            miss_counts[identity] = miss_counts.get(identity, 0) + 1
            if miss_counts[identity] >= patience:
                retired.append(identity)
                del miss_counts[identity]
    survivors = [s.identity for s in slots
                 if s.kind == "track" and s.identity not in retired]
    return QimResult(promoted_slots=promoted, retired=retired,
                     survivors=survivors, miss_counts=miss_counts)


def dem_train_step(params: DemParams, slots, labels: "LabelAssignment",
                   lr: float, gamma: float = 2.0, alpha: float = 0.25
                   ) -> tuple[DemParams, float]:
    """One gradient-descent step of focal loss on dedup logits.

    Only slots covered by `labels.dedup_mask` are supervised; background
    slots carry no keep/suppress target. A frame with no supervised slot
    returns the parameters unchanged with loss 0.
    """
    mask = np.asarray(labels.dedup_mask, dtype=bool)
    if not mask.any():
        return params, 0.0
    idx = np.flatnonzero(mask)
    tp = {name: parameter(arr) for name, arr in params.registry().items()}
    x = Tensor(_slot_matrix(slots))
    hidden, _ = _mha_graph(tp, x, params.heads)
    logits = _dedup_graph(tp, hidden)[idx]
    loss = focal_terms(logits, labels.dedup_targets[idx], gamma, alpha).mean()
    if not np.isfinite(loss.data):
        raise RuntimeError(f"non-finite dedup loss {loss.data!r}")
    loss.backward()
    updated = {name: t.data - lr * (t.grad if t.grad is not None
                                    else np.zeros_like(t.data))
               for name, t in tp.items()}
    return DemParams(heads=params.heads, **updated), loss.item()


def dem_probe_loss(arrays: dict[str, np.ndarray], heads: int,
                   targets_dedup: np.ndarray, targets_cls: np.ndarray,
                   gamma: float = 2.0, alpha: float = 0.25
                   ) -> tuple[float, GradientVector]:
    """Focal probe over both heads for finite-difference verification.

    `arrays` holds every DemParams field plus an "x" entry with the slot
    states; the returned gradient covers all of them.
    """
    tensors = {name: parameter(arr) for name, arr in arrays.items()}
    x = tensors["x"]
    tp = {name: tensors[name] for name in _PARAM_FIELDS}
    hidden, _ = _mha_graph(tp, x, heads)
    dedup = _dedup_graph(tp, hidden)
    cls = _class_graph(tp, x)
    loss = (focal_terms(dedup, targets_dedup, gamma, alpha).mean()
            + focal_terms(cls, targets_cls, gamma, alpha).mean())
    loss.backward()
    return loss.item(), gather_gradient(tensors)
