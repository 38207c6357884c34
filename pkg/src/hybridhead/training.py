"""Toy-scale training and evaluation.

Byte-level tokens (256 byte values plus BOS/EOS), a warmup-stable-decay
learning-rate schedule, decoupled-weight-decay Adam, and synthetic tasks:
filler text, key-value recall and needle retrieval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .cache import CacheState
from .model import Model, forward
from .numerics import ContractError, RngStream, backward, cross_entropy, no_grad

__all__ = [
    "BOS",
    "EOS",
    "VOCAB",
    "encode",
    "decode",
    "WsdSchedule",
    "lr_at",
    "AdamW",
    "filler_text",
    "synthetic_corpus",
    "Episode",
    "kv_recall_episode",
    "NeedleTask",
    "needle_episode",
    "EpisodeBatch",
    "BatchSampler",
    "TrainingDivergedError",
    "TrainResult",
    "train",
    "eval_loss",
    "eval_kv_recall",
    "eval_needle",
    "needle_grid",
]

BOS = 256
EOS = 257
VOCAB = 258
DIGITS = [ord(c) for c in "0123456789"]
KEYS = [ord(c) for c in "abcdefghijklmnopqrstuvwxyz"]


def encode(text: str, bos: bool = True) -> np.ndarray:
    body = list(text.encode("utf-8"))
    return np.array(([BOS] if bos else []) + body, dtype=np.int64)


def decode(ids: Iterable[int]) -> str:
    return bytes(int(i) for i in ids if i < 256).decode("utf-8", errors="replace")


# -- schedule -------------------------------------------------------------------------


@dataclass(frozen=True)
class WsdSchedule:
    """Linear warmup from 0, flat peak, linear decay to ``lr_min`` at ``total_steps``."""

    total_steps: int
    warmup_frac: float = 0.01
    decay_frac: float = 0.20
    lr_peak: float = 3e-4
    lr_min: float = 1e-5

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_frac * self.total_steps)

    @property
    def decay_steps(self) -> int:
        return math.ceil(self.decay_frac * self.total_steps)

    @property
    def decay_start(self) -> int:
        return self.total_steps - self.decay_steps

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not (0 <= self.warmup_frac <= 1 and 0 <= self.decay_frac <= 1):
            raise ValueError("phase fractions must lie in [0, 1]")
        if self.warmup_steps + self.decay_steps > self.total_steps:
            raise ValueError("warmup and decay phases overlap")


def lr_at(schedule: WsdSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    w, start = schedule.warmup_steps, schedule.decay_start
    if step < w:
        return schedule.lr_peak * step / w
    if step <= start:
        return schedule.lr_peak
    left = (schedule.total_steps - step) / schedule.decay_steps
    return schedule.lr_min + (schedule.lr_peak - schedule.lr_min) * left


# -- optimiser ------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay on matrices and global-norm clipping."""

    def __init__(self, params, betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.1, clip: float = 1.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params if p.grad is not None))

    def step(self, lr: float) -> float:
        norm = self.grad_norm()
        scale = min(1.0, self.clip / (norm + 1e-6)) if self.clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.wd
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# -- synthetic data -------------------------------------------------------------------

_WORDS = (
    "the of and to in is was that for it as with his he on be at by had are but from or have an they "
    "which one you were her all she there would their we him been has when who will more no if out so "
    "said what up its about into than them can only other new some could time these two may then do "
    "first any my now such like our over man me even most made after also did many before must through "
    "back years where much your way well down should because each just those people how too little state "
    "good very make world still own see men work long get here between both life being under never day "
    "same another know while last might us great old year off come since against go came right used take "
    "three house river stone garden window morning letter road small light water green quiet early"
).split()


def filler_text(rng: RngStream, n_chars: int) -> str:
    """Seeded English-like word salad with sentence punctuation, exactly ``n_chars`` long."""
    out: list[str] = []
    size = 0
    cap = True
    while size < n_chars + 1:
        w = _WORDS[int(rng.integers(0, len(_WORDS)))]
        if cap:
            w = w.capitalize()
            cap = False
        if rng.random() < 0.08:
            w += "."
            cap = True
        elif rng.random() < 0.05:
            w += ","
        out.append(w)
        size += len(w) + 1
    return " ".join(out)[:n_chars]


def synthetic_corpus(n_bytes: int = 100_000, seed: int = 0) -> bytes:
    return filler_text(RngStream(seed).child("corpus"), n_bytes).encode("ascii")


@dataclass
class Episode:
    """Token sequence (starting with BOS) with answer span ``[answer_start, answer_end)``."""

    tokens: np.ndarray
    answer_start: int
    answer_end: int
    alphabet: tuple[int, ...] = tuple(DIGITS)

    @property
    def prompt(self) -> np.ndarray:
        return self.tokens[: self.answer_start]

    @property
    def answer(self) -> np.ndarray:
        return self.tokens[self.answer_start: self.answer_end]


def kv_recall_episode(rng: RngStream, n_pairs: int) -> Episode:
    """``a=3;k=7;...?k:7`` then EOS. The queried key is always one of the presented ones."""
    keys = rng.choice(KEYS, size=n_pairs, replace=False)
    vals = rng.choice(DIGITS, size=n_pairs)
    q = int(rng.integers(0, n_pairs))
    toks = [BOS]
    for k, v in zip(keys, vals):
        toks += [int(k), ord("="), int(v), ord(";")]
    toks += [ord("?"), int(keys[q]), ord(":")]
    start = len(toks)
    toks += [int(vals[q]), EOS]
    return Episode(np.array(toks, dtype=np.int64), start, start + 1)


@dataclass(frozen=True)
class NeedleTask:
    """A haystack of filler text with one ``secret number`` sentence at ``depth``."""

    length: int
    depth: float
    digits: int = 2
    needle: str = " The secret number is {}. "
    question: str = " What is the secret number? "

    def __post_init__(self):
        if not 0.0 <= self.depth <= 1.0:
            raise ValueError("depth must lie in [0, 1]")


def needle_episode(rng: RngStream, task: NeedleTask) -> Episode:
    answer = "".join(chr(int(d)) for d in rng.choice(DIGITS, size=task.digits))
    needle = task.needle.format(answer)
    fixed = 1 + len(needle) + len(task.question) + task.digits
    hay_len = task.length - fixed
    if hay_len < 0:
        raise ValueError(f"length {task.length} too short for the needle template")
    hay = filler_text(rng.child("hay"), hay_len)
    # Filler never contains digits, so the needle is the only place the answer appears.
    cut = int(round(task.depth * hay_len))
    text = hay[:cut] + needle + hay[cut:] + task.question
    toks = encode(text)
    start = len(toks)
    toks = np.concatenate([toks, encode(answer, bos=False)])
    return Episode(toks, start, start + task.digits)


@dataclass
class EpisodeBatch:
    """Equal-length episodes evaluated together by exact match on the answer span."""

    episodes: list[Episode]

    def accuracy(self, model: Model, use_cache: bool = False) -> float:
        return float(np.mean(episode_hits(model, self.episodes, use_cache)))

    __call__ = accuracy


def _answer_logits_uncached(model: Model, eps: list[Episode]) -> np.ndarray:
    toks = np.stack([e.tokens[: e.answer_end - 1] for e in eps])
    with no_grad():
        logits = forward(model, toks).data
    s, t = eps[0].answer_start, eps[0].answer_end
    return logits[:, s - 1: t - 1]


def _answer_logits_cached(model: Model, eps: list[Episode], chunk: int = 64) -> np.ndarray:
    toks = np.stack([e.tokens for e in eps])
    s, t = eps[0].answer_start, eps[0].answer_end
    cache = CacheState.new(model.config, batch=len(eps), dtype=model.dtype)
    out = []
    with no_grad():
        last = None
        for lo in range(0, s, chunk):
            last = forward(model, toks[:, lo: min(lo + chunk, s)], cache).data
        out.append(last[:, -1])
        for pos in range(s, t - 1):
            out.append(forward(model, toks[:, pos: pos + 1], cache).data[:, -1])
    return np.stack(out, axis=1)


def episode_hits(model: Model, eps: list[Episode], use_cache: bool = False) -> np.ndarray:
    """Teacher-forced exact match; predictions are restricted to the answer alphabet."""
    if len({(e.tokens.size, e.answer_start, e.answer_end) for e in eps}) != 1:
        raise ValueError("episodes in a batch must share length and answer span")
    logits = _answer_logits_cached(model, eps) if use_cache else _answer_logits_uncached(model, eps)
    alphabet = np.array(eps[0].alphabet)
    pred = alphabet[np.argmax(logits[..., alphabet], axis=-1)]
    truth = np.stack([e.answer for e in eps])
    return np.all(pred == truth, axis=1)


# -- batches for training -------------------------------------------------------------


@dataclass
class BatchSampler:
    """Mixture of text windows and task episodes, padded to ``seq_len + 1``.

    ``task`` is one of ``text``, ``kv_recall``, ``needle`` or ``mix``
    (text and kv-recall in equal parts).
    """

    corpus: bytes
    seq_len: int = 64
    batch_size: int = 16
    task: str = "mix"
    max_pairs: int = 4
    needle_len: int = 256

    def __post_init__(self):
        if self.task not in ("text", "kv_recall", "needle", "mix"):
            raise ValueError(f"unknown task {self.task!r}")

    def _row(self, rng: RngStream, kind: str) -> tuple[np.ndarray, np.ndarray]:
        T = self.seq_len + 1
        if kind == "text":
            lo = int(rng.integers(0, len(self.corpus) - T))
            toks = np.concatenate([[BOS], np.frombuffer(self.corpus[lo: lo + T - 1], dtype=np.uint8)]).astype(np.int64)
            return toks, np.ones(T - 1)
        if kind == "kv_recall":
            ep = kv_recall_episode(rng, int(rng.integers(1, self.max_pairs + 1)))
        else:
            ep = needle_episode(rng, NeedleTask(min(self.needle_len, T), float(rng.random())))
        n = ep.tokens.size
        if n > T:
            raise ValueError(f"episode of {n} tokens does not fit seq_len {self.seq_len}")
        toks = np.full(T, EOS, dtype=np.int64)
        toks[:n] = ep.tokens
        # Rows weigh equally in the batch loss regardless of episode length.
        weight = np.zeros(T - 1)
        weight[: n - 1] = (T - 1) / (n - 1)
        return toks, weight

    def sample(self, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
        rows, weights = [], []
        for _ in range(self.batch_size):
            kind = self.task
            if kind == "mix":
                kind = "text" if rng.random() < 0.5 else "kv_recall"
            t, w = self._row(rng, kind)
            rows.append(t)
            weights.append(w)
        return np.stack(rows), np.stack(weights)


# -- training loop --------------------------------------------------------------------


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, lr: float):
        self.step = step
        self.lr = lr
        super().__init__(f"non-finite loss at step {step} (lr={lr:g})")


@dataclass
class TrainResult:
    model: Model
    trace: list[tuple[int, float, float]] = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["step,lr,loss"]
        lines += [f"{s},{lr!r},{loss!r}" for s, lr, loss in self.trace]
        return "\n".join(lines) + "\n"


def train(model: Model, sampler: BatchSampler, schedule: WsdSchedule, seed: int = 0,
          optimizer: AdamW | None = None, callback: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Run ``schedule.total_steps`` updates in place; deterministic given ``seed``."""
    rng = RngStream(seed).child("batches")
    opt = optimizer or AdamW(model.parameters())
    result = TrainResult(model)
    for step in range(1, schedule.total_steps + 1):
        lr = lr_at(schedule, step)
        toks, weight = sampler.sample(rng)
        model.zero_grad()
        logits = forward(model, toks[:, :-1])
        loss = cross_entropy(logits, toks[:, 1:], weight)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(step, lr)
        backward(loss)
        opt.step(lr)
        result.trace.append((step, lr, value))
        if callback is not None:
            callback(step, lr, value)
    return result


def eval_loss(model: Model, sampler: BatchSampler, seed: int = 1234, batches: int = 4) -> float:
    rng = RngStream(seed).child("eval")
    total = 0.0
    with no_grad():
        for _ in range(batches):
            toks, weight = sampler.sample(rng)
            total += float(cross_entropy(forward(model, toks[:, :-1]), toks[:, 1:], weight).data)
    return total / batches


# -- evaluation -----------------------------------------------------------------------


def eval_kv_recall(model: Model, n_pairs: int, seed: int = 0, n_episodes: int = 200,
                   use_cache: bool = False) -> float:
    rng = RngStream(seed).child(f"kv{n_pairs}")
    eps = [kv_recall_episode(rng, n_pairs) for _ in range(n_episodes)]
    return EpisodeBatch(eps).accuracy(model, use_cache)


def needle_grid(train_len: int, depths=(0.0, 0.5, 1.0), factors=(1, 2, 4)) -> list[NeedleTask]:
    return [NeedleTask(train_len * f, d) for f in factors for d in depths]


def eval_needle(model: Model, grid: list[NeedleTask], seed: int = 0, n_episodes: int = 20,
                use_cache: bool = False) -> list[dict]:
    """Exact-match accuracy per (length, depth) cell."""
    out = []
    for task in grid:
        rng = RngStream(seed).child(f"needle-{task.length}-{task.depth!r}")
        eps = [needle_episode(rng, task) for _ in range(n_episodes)]
        out.append({"length": task.length, "depth": task.depth,
                    "accuracy": EpisodeBatch(eps).accuracy(model, use_cache)})
    return out
