"""Tests for prompt assembly, the surrogate encoders, the embedding pool,
prompt tuning, and checkpointing."""

import json

import numpy as np
import pytest

from fixtures import separable_book_and_pool
from querytrack.config import RunConfig, rng_for
from querytrack.trackbook import (
    EmbeddingPool,
    PromptTokens,
    TrackBook,
    assemble_prompt,
    book_from_state,
    book_state,
    cosine_lr,
    descriptions,
    encode_image,
    encode_text,
    frozen_bytes,
    get_description,
    load_book,
    margin_satisfaction,
    register_identity,
    retrieval_accuracy,
    save_book,
    tune_prompts,
)


@pytest.fixture(scope="module")
def tuned():
    book, pool = separable_book_and_pool()
    result = tune_prompts(book, pool, steps=300, lr=1.0, seed=0)
    return book, pool, result


def small_book(ids=(1, 2), **overrides):
    config = RunConfig(**overrides) if overrides else RunConfig()
    return TrackBook.create(ids, config)


# -- prompt assembly -------------------------------------------------------------


def test_prompt_length():
    book = small_book()
    seq = assemble_prompt(book, 1)
    assert seq.shape == (4 + 4 + 1, book.word_dim)
    assert book.seq_len == 9


def test_identities_share_context_differ_in_tokens():
    book = small_book()
    a = assemble_prompt(book, 1)
    b = assemble_prompt(book, 2)
    assert np.array_equal(a[:4], b[:4])
    assert np.array_equal(a[-1], b[-1])
    assert not np.array_equal(a[4:8], b[4:8])


def test_class_word_changes_only_final_token():
    config = RunConfig()
    person = TrackBook.create([1], config, class_word="person")
    dog = TrackBook.create([1], config, class_word="dog")
    a = assemble_prompt(person, 1)
    b = assemble_prompt(dog, 1)
    assert np.array_equal(a[:-1], b[:-1])
    assert not np.array_equal(a[-1], b[-1])


def test_unknown_identity_raises():
    book = small_book()
    with pytest.raises(KeyError, match="unknown identity 9"):
        assemble_prompt(book, 9)
    with pytest.raises(KeyError):
        get_description(book, 9)


def test_register_is_idempotent_and_order_independent():
    config = RunConfig()
    forward = TrackBook.create([1, 2, 3], config)
    backward = TrackBook.create([3, 2, 1], config)
    for identity in (1, 2, 3):
        assert np.array_equal(forward.prompts[identity].tokens,
                              backward.prompts[identity].tokens)
    before = forward.prompts[2].tokens.copy()
    register_identity(forward, 2)
    assert np.array_equal(forward.prompts[2].tokens, before)


def test_prompt_tokens_validation():
    with pytest.raises(ValueError):
        PromptTokens(tokens=np.zeros(4))
    with pytest.raises(ValueError):
        PromptTokens(tokens=np.array([[np.inf, 0.0]]))


# -- encoders --------------------------------------------------------------------


def test_encode_text_deterministic_and_unit_norm():
    book = small_book()
    seq = assemble_prompt(book, 1)
    a = encode_text(book, seq)
    b = encode_text(book, seq)
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9
    assert a.shape == (book.proj_dim,)


def test_encode_text_sensitive_to_single_token():
    book = small_book()
    seq = assemble_prompt(book, 1)
    bumped = seq.copy()
    bumped[5] = bumped[5] + 0.1
    assert not np.allclose(encode_text(book, seq), encode_text(book, bumped))


def test_encode_text_rejects_wrong_shape():
    book = small_book()
    with pytest.raises(ValueError):
        encode_text(book, np.zeros((3, book.word_dim)))


def test_encode_image_zero_noise_is_pure_function():
    book = small_book()
    appearance = rng_for(0, "app").normal(size=book.latent_dim)
    a = encode_image(book, appearance)
    b = encode_image(book, appearance)
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9


def test_encode_image_seeded_noise_deterministic():
    book = small_book()
    appearance = rng_for(1, "app").normal(size=book.latent_dim)
    a = encode_image(book, appearance, noise_seed=5, sigma=0.05)
    b = encode_image(book, appearance, noise_seed=5, sigma=0.05)
    c = encode_image(book, appearance, noise_seed=6, sigma=0.05)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_encode_image_same_identity_closer_than_cross():
    book = small_book()
    app_a = rng_for(2, "app", "a").normal(size=book.latent_dim)
    app_b = rng_for(2, "app", "b").normal(size=book.latent_dim)
    a1 = encode_image(book, app_a, noise_seed=1, sigma=0.05)
    a2 = encode_image(book, app_a, noise_seed=2, sigma=0.05)
    b1 = encode_image(book, app_b, noise_seed=3, sigma=0.05)
    assert float(a1 @ a2) > float(a1 @ b1)
    assert float(a1 @ a2) > float(a2 @ b1)


# -- embedding pool --------------------------------------------------------------


def test_pool_evicts_oldest_first():
    pool = EmbeddingPool(capacity=4)
    for k in range(5):
        pool.push(k, np.array([float(k)]), frame=k)
    assert len(pool) == 4
    frames = [entry.frame for entry in pool.entries()]
    assert frames == [1, 2, 3, 4]
    identities = [entry.identity for entry in pool.entries()]
    assert identities == [1, 2, 3, 4]


def test_pool_sample_is_seeded():
    pool = EmbeddingPool(capacity=16)
    for k in range(10):
        pool.push(k, np.array([float(k)]), frame=k)
    a, short_a = pool.sample(4, seed=3)
    b, short_b = pool.sample(4, seed=3)
    c, _ = pool.sample(4, seed=4)
    assert [e.identity for e in a] == [e.identity for e in b]
    assert not short_a and not short_b
    assert len({e.identity for e in a}) == 4  # without replacement
    assert [e.identity for e in a] != [e.identity for e in c]


def test_pool_sample_full_and_short():
    pool = EmbeddingPool(capacity=8)
    for k in range(3):
        pool.push(k, np.array([float(k)]), frame=k)
    exact, short = pool.sample(3, seed=0)
    assert not short
    assert {e.identity for e in exact} == {0, 1, 2}
    over, short = pool.sample(5, seed=0)
    assert short
    assert len(over) == 3


def test_pool_push_copies_the_embedding():
    pool = EmbeddingPool(capacity=4)
    vec = np.array([1.0, 2.0])
    pool.push(1, vec, frame=0)
    vec[0] = 99.0
    assert pool.entries()[0].embed[0] == 1.0


def test_pool_counts_and_arrays():
    pool = EmbeddingPool(capacity=8)
    for k in range(5):
        pool.push(k % 2, np.array([float(k), 0.0]), frame=k)
    assert pool.identity_counts() == {0: 3, 1: 2}
    ids, arr = pool.as_arrays()
    assert ids == [0, 1, 0, 1, 0]
    assert arr.shape == (5, 2)
    empty_ids, empty_arr = EmbeddingPool().as_arrays()
    assert empty_ids == [] and empty_arr.shape == (0, 0)


def test_pool_capacity_validation():
    with pytest.raises(ValueError):
        EmbeddingPool(capacity=0)


# -- tuning ----------------------------------------------------------------------


def test_tune_zero_steps_leaves_tokens_bit_identical():
    book, pool = separable_book_and_pool(identities=3, samples=3)
    result = tune_prompts(book, pool, steps=0, lr=1.0)
    assert not result.vacuous
    assert result.trace == []
    for identity in book.identities():
        assert np.array_equal(result.book.prompts[identity].tokens,
                              book.prompts[identity].tokens)


def test_tune_vacuous_pools_are_flagged():
    book, _ = separable_book_and_pool(identities=3, samples=3)
    single_id = EmbeddingPool()
    appearance = rng_for(0, "v").normal(size=book.latent_dim)
    for k in range(4):
        single_id.push(1, encode_image(book, appearance, noise_seed=k), k)
    result = tune_prompts(book, single_id, steps=10, lr=1.0)
    assert result.vacuous
    assert result.trace == []
    assert result.book is book

    thin = EmbeddingPool()
    thin.push(1, encode_image(book, appearance, noise_seed=0), 0)
    thin.push(2, encode_image(book, appearance, noise_seed=1), 0)
    assert tune_prompts(book, thin, steps=10, lr=1.0).vacuous


def test_tune_unknown_pool_identity_raises():
    book, pool = separable_book_and_pool(identities=3, samples=3)
    pool.push(77, np.ones(book.embed_dim), frame=0)
    with pytest.raises(KeyError, match="unknown identity 77"):
        tune_prompts(book, pool, steps=5, lr=1.0)


def test_tune_aborts_on_nonfinite_loss_with_step_index():
    book, pool = separable_book_and_pool(identities=3, samples=3)
    pool.push(1, np.full(book.embed_dim, np.inf), frame=9)
    with np.errstate(invalid="ignore"):
        with pytest.raises(RuntimeError, match="step 0"):
            tune_prompts(book, pool, steps=5, lr=1.0)


def test_tune_freezes_everything_but_tokens(tuned):
    book, pool, result = tuned
    assert frozen_bytes(result.book) == frozen_bytes(book)
    moved = sum(
        0 if np.array_equal(result.book.prompts[i].tokens,
                            book.prompts[i].tokens) else 1
        for i in book.identities())
    assert moved == len(book.identities())


def test_tune_is_deterministic():
    book, pool = separable_book_and_pool(identities=4, samples=3)
    a = tune_prompts(book, pool, steps=20, lr=1.0, seed=5)
    b = tune_prompts(book, pool, steps=20, lr=1.0, seed=5)
    assert a.trace == b.trace
    for identity in book.identities():
        assert np.array_equal(a.book.prompts[identity].tokens,
                              b.book.prompts[identity].tokens)


def test_tune_trace_mostly_nonincreasing(tuned):
    _, _, result = tuned
    trace = result.trace
    assert len(trace) == 300
    drops = sum(1 for a, b in zip(trace, trace[1:]) if b <= a)
    assert drops >= 0.9 * (len(trace) - 1)
    assert trace[-1] < trace[0]


def test_tune_reaches_retrieval_and_margin_targets(tuned):
    _, pool, result = tuned
    assert retrieval_accuracy(result.book, pool, "t2i") >= 0.95
    assert retrieval_accuracy(result.book, pool, "i2t") >= 0.95
    assert margin_satisfaction(result.book, pool, margin=0.3) >= 0.9


def test_tuned_descriptions_are_distinct(tuned):
    _, _, result = tuned
    bank = descriptions(result.book)
    ids = sorted(bank)
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            assert float(bank[ids[i]] @ bank[ids[j]]) < 0.99


def test_tune_train_ids_restriction():
    book, pool = separable_book_and_pool(identities=4, samples=3)
    result = tune_prompts(book, pool, steps=10, lr=1.0, train_ids={1})
    assert not np.array_equal(result.book.prompts[1].tokens,
                              book.prompts[1].tokens)
    for identity in (2, 3, 4):
        assert np.array_equal(result.book.prompts[identity].tokens,
                              book.prompts[identity].tokens)


def test_tune_minibatch_mode_runs_and_differs():
    book, pool = separable_book_and_pool(identities=4, samples=4)
    full = tune_prompts(book, pool, steps=10, lr=1.0)
    mini = tune_prompts(book, pool, steps=10, lr=1.0, batch=6, seed=1)
    assert len(mini.trace) == 10
    assert mini.trace != full.trace


def test_cosine_schedule_endpoints():
    assert cosine_lr(2.0, 0, 100) == 2.0
    assert cosine_lr(2.0, 50, 100) == pytest.approx(1.0)
    assert cosine_lr(2.0, 100, 100) == pytest.approx(0.0, abs=1e-15)


# -- descriptions ----------------------------------------------------------------


def test_description_idempotent_and_unit_norm():
    book = small_book()
    a = get_description(book, 1)
    b = get_description(book, 1)
    assert a is b or np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9


def test_descriptions_cover_all_identities():
    book = small_book(ids=(3, 1, 2))
    bank = descriptions(book)
    assert sorted(bank) == [1, 2, 3]


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip_exact(tmp_path, tuned):
    _, _, result = tuned
    path = tmp_path / "book.json"
    save_book(result.book, path)
    loaded = load_book(path)
    assert frozen_bytes(loaded) == frozen_bytes(result.book)
    assert loaded.identities() == result.book.identities()
    for identity in loaded.identities():
        assert np.array_equal(loaded.prompts[identity].tokens,
                              result.book.prompts[identity].tokens)
        assert np.array_equal(get_description(loaded, identity),
                              get_description(result.book, identity))
    again = tmp_path / "book2.json"
    save_book(loaded, again)
    assert path.read_bytes() == again.read_bytes()


def test_checkpoint_version_guard(tmp_path):
    book = small_book()
    state = book_state(book)
    state["version"] = 99
    with pytest.raises(ValueError, match="version"):
        book_from_state(state)


def test_checkpoint_is_valid_json(tmp_path):
    book = small_book()
    path = tmp_path / "book.json"
    save_book(book, path)
    state = json.loads(path.read_text())
    assert state["m"] == 4
    assert state["identities"] == [1, 2]
