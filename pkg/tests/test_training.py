import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from hybridhead.config import preset
from hybridhead.model import build
from hybridhead.numerics import ContractError, RngStream
from hybridhead.training import (
    BOS,
    DIGITS,
    EOS,
    AdamW,
    BatchSampler,
    EpisodeBatch,
    NeedleTask,
    TrainingDivergedError,
    WsdSchedule,
    decode,
    encode,
    episode_hits,
    eval_kv_recall,
    eval_needle,
    kv_recall_episode,
    lr_at,
    needle_episode,
    needle_grid,
    synthetic_corpus,
    train,
)

SMALL = preset("toy").replace(name="small", blocks=2, hidden=16, attn_heads=2, query_groups=1, ssm_state=4,
                              mlp_hidden=24, window=8, meta_tokens=2, num_full_attn=1)


class TestSchedule:
    def test_boundaries(self):
        s = WsdSchedule(1000, lr_peak=3e-4)
        assert lr_at(s, 0) == 0.0
        assert lr_at(s, math.ceil(0.01 * 1000)) == 3e-4
        assert lr_at(s, 1000) == 1e-5
        mid = lr_at(s, 900)
        assert 1e-5 < mid < 3e-4

    def test_out_of_range(self):
        s = WsdSchedule(10)
        for step in (-1, 11):
            with pytest.raises(ContractError):
                lr_at(s, step)

    @given(st.integers(1, 3000), st.floats(0, 0.3), st.floats(0, 0.5), st.floats(1e-4, 1e-2))
    def test_shape(self, T, wf, df, peak):
        assume(math.ceil(wf * T) + math.ceil(df * T) <= T)
        s = WsdSchedule(T, wf, df, peak, 1e-5)
        lrs = [lr_at(s, t) for t in range(T + 1)]
        w, start = s.warmup_steps, s.decay_start
        assert all(a <= b for a, b in zip(lrs[: w + 1], lrs[1: w + 1]))
        assert all(v == peak for v in lrs[w: start + 1])
        assert all(a >= b for a, b in zip(lrs[start:], lrs[start + 1:]))
        assert lrs[-1] == (1e-5 if s.decay_steps else peak)

    @given(st.integers(10, 5000), st.floats(0.001, 0.2), st.floats(0.01, 0.5))
    def test_integral_closed_form(self, T, wf, df):
        assume(math.ceil(wf * T) + math.ceil(df * T) <= T)
        s = WsdSchedule(T, wf, df, 3e-4, 1e-5)
        W, D, P, m = s.warmup_steps, s.decay_steps, s.lr_peak, s.lr_min
        closed = P * (W - 1) / 2 + P * (T - D - W + 1) + D * P + (m - P) * (D + 1) / 2
        assert abs(math.fsum(lr_at(s, t) for t in range(T + 1)) - closed) <= 1e-9

    def test_overlapping_phases_rejected(self):
        with pytest.raises(ValueError):
            WsdSchedule(10, 0.6, 0.6)


def test_tokenizer_round_trip():
    ids = encode("héllo")
    assert ids[0] == BOS and decode(ids) == "héllo"


def test_corpus_deterministic_and_sized():
    a = synthetic_corpus(5000, 1)
    assert a == synthetic_corpus(5000, 1) and len(a) == 5000 and a != synthetic_corpus(5000, 2)
    assert not any(chr(c).isdigit() for c in a)


class TestKvRecall:
    @given(st.integers(1, 10), st.integers(0, 2**31))
    def test_query_is_presented(self, n, seed):
        ep = kv_recall_episode(RngStream(seed), n)
        toks = ep.tokens
        pairs = {int(toks[1 + 4 * i]): int(toks[3 + 4 * i]) for i in range(n)}
        query = int(toks[ep.answer_start - 2])
        assert query in pairs and pairs[query] == int(ep.answer[0])
        assert toks[-1] == EOS and ep.answer[0] in DIGITS

    def test_pure_function_of_seed(self):
        a = [kv_recall_episode(RngStream(3).child("x"), 4).tokens for _ in range(2)]
        assert np.array_equal(a[0], a[1])


class TestNeedle:
    @given(st.sampled_from([64, 96, 200]), st.sampled_from([0.0, 0.25, 0.5, 1.0]), st.integers(0, 2**31))
    def test_needle_once_and_recoverable(self, length, depth, seed):
        ep = needle_episode(RngStream(seed), NeedleTask(length, depth))
        text = decode(ep.tokens[: ep.answer_start])
        answer = decode(ep.answer)
        assert ep.tokens.size == length
        assert text.count("secret number is") == 1
        needle_at = text.index("secret number is")
        assert text[needle_at + len("secret number is "):].startswith(answer + ".")

    def test_grid(self):
        grid = needle_grid(256)
        assert [(t.length, t.depth) for t in grid] == [(n, d) for n in (256, 512, 1024) for d in (0.0, 0.5, 1.0)]
        a = needle_episode(RngStream(1), grid[4]).tokens
        b = needle_episode(RngStream(1), grid[4]).tokens
        assert np.array_equal(a, b)

    def test_depth_validated(self):
        with pytest.raises(ValueError):
            NeedleTask(100, 1.5)


def test_untrained_kv_recall_at_chance():
    model = build(SMALL, seed=0)
    acc = eval_kv_recall(model, 1, seed=0, n_episodes=400)
    # predictions restricted to 10 digits; binomial(400, 0.1) four-sigma band
    assert abs(acc - 0.1) <= 4 * math.sqrt(0.1 * 0.9 / 400)


def test_untrained_needle_at_chance():
    model = build(SMALL, seed=0)
    cells = eval_needle(model, [NeedleTask(64, 0.5)], seed=0, n_episodes=200)
    # two-digit answers: chance 1/100
    assert cells[0]["accuracy"] <= 0.01 + 4 * math.sqrt(0.01 * 0.99 / 200)


def test_cached_equals_uncached():
    model = build(SMALL, seed=1)
    grid = [NeedleTask(64, 0.0), NeedleTask(96, 1.0)]
    for task in grid:
        eps = [needle_episode(RngStream(i), task) for i in range(6)]
        assert np.array_equal(episode_hits(model, eps, False), episode_hits(model, eps, True))
    assert eval_needle(model, grid, n_episodes=6) == eval_needle(model, grid, n_episodes=6, use_cache=True)


def test_sampler_masks_padding():
    s = BatchSampler(synthetic_corpus(2000), seq_len=40, batch_size=6, task="kv_recall", max_pairs=2)
    toks, w = s.sample(RngStream(0))
    for row, wr in zip(toks, w):
        n = int(np.argmax(row == EOS)) + 1
        assert wr[: n - 1].all() and not wr[n - 1:].any()
    np.testing.assert_allclose(w.sum(axis=1), 40.0)


def _short_run(seed, dtype=np.float64, steps=4):
    model = build(SMALL, seed=seed, dtype=dtype)
    s = BatchSampler(synthetic_corpus(4000), seq_len=24, batch_size=3, task="mix", max_pairs=2)
    norms = []
    opt = AdamW(model.parameters())

    def cb(step, lr, loss):
        norms.append(float(np.linalg.norm(model.meta.R.grad)))

    return train(model, s, WsdSchedule(steps, lr_peak=1e-3), seed=seed, optimizer=opt, callback=cb), norms


def test_training_deterministic():
    a, norms = _short_run(0)
    b, _ = _short_run(0)
    assert a.trace == b.trace and a.trace_csv() == b.trace_csv()
    assert a.model.fingerprint() == b.model.fingerprint()
    assert all(n > 0 for n in norms)


def test_nan_aborts_with_step_and_lr():
    model = build(SMALL, seed=0)
    s = BatchSampler(synthetic_corpus(4000), seq_len=16, batch_size=2, task="text")
    model.embed.data[:] = np.nan
    with pytest.raises(TrainingDivergedError) as err:
        train(model, s, WsdSchedule(3), seed=0)
    assert err.value.step == 1 and err.value.lr == lr_at(WsdSchedule(3), 1)


def test_episode_batch_requires_equal_shapes():
    eps = [kv_recall_episode(RngStream(0), 1), kv_recall_episode(RngStream(0), 2)]
    with pytest.raises(ValueError):
        EpisodeBatch(eps).accuracy(build(SMALL))


def test_adamw_clips():
    model = build(SMALL)
    for p in model.parameters():
        p.grad = np.full_like(p.data, 10.0)
    opt = AdamW(model.parameters(), clip=1.0)
    before = model.embed.data.copy()
    norm = opt.step(1e-3)
    assert norm > 1.0
    step = np.abs(model.embed.data - before)
    assert np.all(step < 1.1e-3)
