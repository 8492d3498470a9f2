"""Per-identity learnable prompt tokens, frozen surrogate text/image
encoders, the clip-level embedding pool, and the prompt tuning loop.

Each identity owns a small matrix of prompt tokens [X]_1..[X]_M that slot
into a fixed template (context words, then the learnable tokens, then a
class word). The text encoder is a frozen seeded random linear map per
token position followed by mean pooling; the image encoder is a frozen
linear map of the scene appearance latent. Both sides meet in a shared
projection space where the contrastive losses operate. Tuning moves only
the [X]_m tokens; everything else is derived from the encoder seed and is
bit-identical before and after.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, rng_for
from .losses import ProjectionHeads, loss_i2t, loss_t2i_multipos

BOOK_VERSION = 1


@dataclass(frozen=True)
class PromptTokens:
    """Learnable token matrix (M, word_dim) for one identity."""

    tokens: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.tokens, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"tokens must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("tokens must be finite")
        object.__setattr__(self, "tokens", arr)


def _init_tokens(encoder_seed: int, identity: int, m: int,
                 word_dim: int) -> PromptTokens:
    rng = rng_for(encoder_seed, "token-init", identity)
    return PromptTokens(tokens=0.02 * rng.normal(size=(m, word_dim)))


def image_encoder_matrix(encoder_seed: int, latent_dim: int,
                         embed_dim: int) -> np.ndarray:
    """Frozen latent-to-embedding map, shared by every consumer of the
    image side (book, decoder stand-in) so their spaces coincide."""
    return rng_for(encoder_seed, "tb-img").normal(
        size=(latent_dim, embed_dim)) / math.sqrt(latent_dim)


@dataclass
class TrackBook:
    """Identity-indexed prompt tokens plus the frozen encoder stack."""

    m: int
    word_dim: int
    embed_dim: int
    proj_dim: int
    latent_dim: int
    context_len: int
    encoder_seed: int
    class_word: str
    prompts: dict[int, PromptTokens]
    context: np.ndarray          # (context_len, word_dim), frozen
    class_vec: np.ndarray        # (word_dim,), frozen
    w_pos: np.ndarray            # (seq_len, word_dim, embed_dim), frozen
    w_img: np.ndarray            # (latent_dim, embed_dim), frozen
    heads: ProjectionHeads       # shared projection space, frozen
    _cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def seq_len(self) -> int:
        return self.context_len + self.m + 1

    @staticmethod
    def create(identities, config: RunConfig,
               class_word: str = "person") -> "TrackBook":
        seed = config.encoder_seed
        m = config.prompt_len
        word_dim = config.word_dim
        embed_dim = config.embed_dim
        seq_len = config.context_len + m + 1
        scale = 1.0 / math.sqrt(word_dim)
        context = scale * rng_for(seed, "tb-context").normal(
            size=(config.context_len, word_dim))
        class_vec = scale * rng_for(seed, "tb-word", class_word).normal(
            size=word_dim)
        w_pos = np.stack([
            scale * rng_for(seed, "tb-pos", p).normal(size=(word_dim,
                                                            embed_dim))
            for p in range(seq_len)])
        w_img = image_encoder_matrix(seed, config.latent_dim, embed_dim)
        heads = ProjectionHeads.create(embed_dim, embed_dim, config.proj_dim,
                                       rng_for(seed, "tb-heads"))
        book = TrackBook(
            m=m, word_dim=word_dim, embed_dim=embed_dim,
            proj_dim=config.proj_dim, latent_dim=config.latent_dim,
            context_len=config.context_len, encoder_seed=seed,
            class_word=class_word, prompts={}, context=context,
            class_vec=class_vec, w_pos=w_pos, w_img=w_img, heads=heads)
        for identity in identities:
            register_identity(book, identity)
        return book

    def identities(self) -> list[int]:
        return sorted(self.prompts)

    def with_prompts(self, prompts: dict[int, PromptTokens]) -> "TrackBook":
        return TrackBook(
            m=self.m, word_dim=self.word_dim, embed_dim=self.embed_dim,
            proj_dim=self.proj_dim, latent_dim=self.latent_dim,
            context_len=self.context_len, encoder_seed=self.encoder_seed,
            class_word=self.class_word, prompts=dict(prompts),
            context=self.context, class_vec=self.class_vec, w_pos=self.w_pos,
            w_img=self.w_img, heads=self.heads)


def register_identity(book: TrackBook, identity: int) -> None:
    """Add a fresh identity with seeded initial tokens; no-op if present."""
    identity = int(identity)
    if identity in book.prompts:
        return
    book.prompts[identity] = _init_tokens(book.encoder_seed, identity,
                                          book.m, book.word_dim)
    book._cache.pop(identity, None)


def assemble_prompt(book: TrackBook, identity: int) -> np.ndarray:
    """Template sequence: context tokens, [X]_1..[X]_M, class word."""
    if identity not in book.prompts:
        raise KeyError(f"unknown identity {identity}")
    return np.concatenate([book.context, book.prompts[identity].tokens,
                           book.class_vec[None, :]])


def _pool_text_feature(book: TrackBook, sequence: np.ndarray) -> np.ndarray:
    """Pre-projection text feature: per-position linear maps, mean-pooled."""
    sequence = np.asarray(sequence, dtype=np.float64)
    if sequence.shape != (book.seq_len, book.word_dim):
        raise ValueError(
            f"expected sequence shape {(book.seq_len, book.word_dim)}, "
            f"got {sequence.shape}")
    return np.einsum("pw,pwe->e", sequence, book.w_pos) / book.seq_len


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise ValueError("cannot normalize zero-norm embedding")
    return v / norm


def encode_text(book: TrackBook, sequence: np.ndarray) -> np.ndarray:
    """Shared-space text embedding: pooled feature through g_T, unit norm."""
    return _unit(_pool_text_feature(book, sequence) @ book.heads.w_t)


def encode_image(book: TrackBook, appearance: np.ndarray,
                 noise_seed: int | None = None,
                 sigma: float = 0.05) -> np.ndarray:
    """Instance embedding of an appearance latent, unit norm.

    Output lives in the pre-projection image space (the space pool samples
    and decoder embeddings occupy); the alignment losses apply g_V on top.
    """
    appearance = np.asarray(appearance, dtype=np.float64)
    feat = appearance @ book.w_img
    if noise_seed is not None and sigma > 0.0:
        feat = feat + sigma * rng_for(noise_seed, "image-noise").normal(
            size=book.embed_dim)
    return _unit(feat)


def get_description(book: TrackBook, identity: int) -> np.ndarray:
    """Cached shared-space embedding of the identity's assembled prompt."""
    identity = int(identity)
    if identity not in book._cache:
        book._cache[identity] = encode_text(book,
                                            assemble_prompt(book, identity))
    return book._cache[identity]


def descriptions(book: TrackBook) -> dict[int, np.ndarray]:
    return {identity: get_description(book, identity)
            for identity in book.identities()}


# -- embedding pool --------------------------------------------------------------


@dataclass(frozen=True)
class PoolEntry:
    identity: int
    embed: np.ndarray
    frame: int


class EmbeddingPool:
    """Bounded FIFO of (identity, embedding, frame) samples."""

    def __init__(self, capacity: int = 512):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[PoolEntry] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, identity: int, embed: np.ndarray, frame: int) -> None:
        embed = np.asarray(embed, dtype=np.float64)
        self._entries.append(PoolEntry(identity=int(identity),
                                       embed=embed.copy(), frame=int(frame)))

    def entries(self) -> tuple[PoolEntry, ...]:
        return tuple(self._entries)

    def identity_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for entry in self._entries:
            counts[entry.identity] = counts.get(entry.identity, 0) + 1
        return counts

    def sample(self, size: int, seed: int) -> tuple[list[PoolEntry], bool]:
        """Uniform draw without replacement; short pools return everything."""
        entries = list(self._entries)
        if size >= len(entries):
            return entries, size > len(entries)
        rng = rng_for(seed, "pool-sample")
        picks = rng.choice(len(entries), size=size, replace=False)
        return [entries[k] for k in picks], False

    def as_arrays(self) -> tuple[list[int], np.ndarray]:
        if not self._entries:
            return [], np.zeros((0, 0))
        ids = [entry.identity for entry in self._entries]
        return ids, np.stack([entry.embed for entry in self._entries])


# -- prompt tuning ---------------------------------------------------------------


@dataclass
class TuneResult:
    book: TrackBook
    trace: list[float]
    vacuous: bool


def cosine_lr(lr0: float, step: int, steps: int) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / max(steps, 1)))


def tune_prompts(book: TrackBook, pool: EmbeddingPool, steps: int,
                 lr: float = 3.5e-4, batch: int = 0, seed: int = 0,
                 train_ids=None) -> TuneResult:
    """Gradient descent on the two contrastive losses, tokens only.

    The learning rate follows cosine decay from `lr`. With batch=0 every
    step uses the whole pool (deterministic descent); otherwise each step
    draws a seeded sample without replacement. `train_ids` restricts which
    identities' tokens move; all pool identities train by default. A pool
    without at least two identities of two samples each is flagged vacuous
    and left untouched.
    """
    counts = pool.identity_counts()
    rich = [identity for identity, n in counts.items() if n >= 2]
    if len(rich) < 2:
        return TuneResult(book=book, trace=[], vacuous=True)
    for identity in counts:
        if identity not in book.prompts:
            raise KeyError(f"unknown identity {identity}")
    trainable = set(counts) if train_ids is None else {int(i)
                                                       for i in train_ids}

    prompts = {identity: PromptTokens(tokens=pt.tokens.copy())
               for identity, pt in book.prompts.items()}
    current = book.with_prompts(prompts)
    ctx = book.context_len
    trace: list[float] = []
    for step in range(steps):
        if batch > 0:
            entries, _ = pool.sample(batch, rng_for(seed, "tune-batch",
                                                    step).integers(2 ** 31))
        else:
            entries = list(pool.entries())
        ids = [entry.identity for entry in entries]
        vs = np.stack([entry.embed for entry in entries])
        features = {identity: _pool_text_feature(
            current, assemble_prompt(current, identity))
            for identity in sorted(set(ids))}
        ts = np.stack([features[identity] for identity in ids])
        value_a, grad_a = loss_i2t(vs, ts, current.heads)
        value_b, grad_b = loss_t2i_multipos(vs, ts, ids, current.heads)
        total = value_a + value_b
        if not np.isfinite(total):
            raise RuntimeError(f"non-finite tuning loss at step {step}")
        trace.append(total)
        t_grad = grad_a.get("t") + grad_b.get("t")
        token_grads: dict[int, np.ndarray] = {}
        for row, identity in enumerate(ids):
            if identity not in trainable:
                continue
            acc = token_grads.setdefault(
                identity, np.zeros((current.m, current.word_dim)))
            for j in range(current.m):
                acc[j] += (current.w_pos[ctx + j] @ t_grad[row]
                           ) / current.seq_len
        rate = cosine_lr(lr, step, steps)
        for identity, grad in token_grads.items():
            updated = current.prompts[identity].tokens - rate * grad
            current.prompts[identity] = PromptTokens(tokens=updated)
        current._cache.clear()
    return TuneResult(book=current, trace=trace, vacuous=False)


# -- retrieval diagnostics --------------------------------------------------------


def _shared_space(book: TrackBook, pool: EmbeddingPool):
    ids, embeds = pool.as_arrays()
    if not ids:
        raise ValueError("pool is empty")
    projected = embeds @ book.heads.w_v
    norms = np.linalg.norm(projected, axis=1, keepdims=True)
    projected = projected / np.maximum(norms, 1e-12)
    known = book.identities()
    bank = np.stack([get_description(book, identity) for identity in known])
    return ids, projected, known, bank


def retrieval_accuracy(book: TrackBook, pool: EmbeddingPool,
                       direction: str = "t2i") -> float:
    """Nearest-neighbor retrieval accuracy in the shared space.

    "t2i": each identity's description must rank one of its own pool
    samples first. "i2t": each pool sample must rank its own identity's
    description first.
    """
    ids, projected, known, bank = _shared_space(book, pool)
    sims = projected @ bank.T  # (samples, identities)
    if direction == "t2i":
        hits = 0
        judged = 0
        for col, identity in enumerate(known):
            if identity not in ids:
                continue
            judged += 1
            best = int(np.argmax(sims[:, col]))
            hits += int(ids[best] == identity)
        if judged == 0:
            raise ValueError("no pool identity is registered in the book")
        return hits / judged
    if direction == "i2t":
        index = {identity: k for k, identity in enumerate(known)}
        hits = sum(1 for row, identity in enumerate(ids)
                   if known[int(np.argmax(sims[row]))] == identity
                   and identity in index)
        return hits / len(ids)
    raise ValueError(f"direction must be 't2i' or 'i2t', got {direction!r}")


def margin_satisfaction(book: TrackBook, pool: EmbeddingPool,
                        margin: float = 0.3) -> float:
    """Fraction of pool samples whose own description beats every other
    description by at least `margin` in cosine similarity."""
    ids, projected, known, bank = _shared_space(book, pool)
    index = {identity: k for k, identity in enumerate(known)}
    sims = projected @ bank.T
    satisfied = 0
    for row, identity in enumerate(ids):
        own = sims[row, index[identity]]
        others = np.delete(sims[row], index[identity])
        if others.size == 0 or own - others.max() >= margin:
            satisfied += 1
    return satisfied / len(ids)


# -- checkpoints -----------------------------------------------------------------


def book_state(book: TrackBook) -> dict:
    return {
        "version": BOOK_VERSION,
        "m": book.m,
        "word_dim": book.word_dim,
        "embed_dim": book.embed_dim,
        "proj_dim": book.proj_dim,
        "latent_dim": book.latent_dim,
        "context_len": book.context_len,
        "encoder_seed": book.encoder_seed,
        "class_word": book.class_word,
        "identities": book.identities(),
        "tokens": {str(identity): book.prompts[identity].tokens.tolist()
                   for identity in book.identities()},
    }


def book_from_state(state: dict) -> TrackBook:
    version = state.get("version")
    if version != BOOK_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    config = RunConfig(
        prompt_len=int(state["m"]), word_dim=int(state["word_dim"]),
        embed_dim=int(state["embed_dim"]), proj_dim=int(state["proj_dim"]),
        latent_dim=int(state["latent_dim"]),
        context_len=int(state["context_len"]),
        encoder_seed=int(state["encoder_seed"]))
    book = TrackBook.create([], config, class_word=state["class_word"])
    for identity in state["identities"]:
        tokens = np.array(state["tokens"][str(identity)], dtype=np.float64)
        book.prompts[int(identity)] = PromptTokens(tokens=tokens)
    return book


def save_book(book: TrackBook, path: str | Path) -> None:
    Path(path).write_text(json.dumps(book_state(book), indent=2,
                                     sort_keys=True) + "\n")


def load_book(path: str | Path) -> TrackBook:
    return book_from_state(json.loads(Path(path).read_text()))


def frozen_bytes(book: TrackBook) -> bytes:
    """Serialized frozen parameters, for before/after tuning comparisons."""
    parts = [np.array([book.m, book.word_dim, book.embed_dim, book.proj_dim,
                       book.latent_dim, book.context_len,
                       book.encoder_seed]).tobytes(),
             book.class_word.encode("utf-8"), book.context.tobytes(),
             book.class_vec.tobytes(), book.w_pos.tobytes(),
             book.w_img.tobytes(), book.heads.w_v.tobytes(),
             book.heads.w_t.tobytes()]
    return b"|".join(parts)
