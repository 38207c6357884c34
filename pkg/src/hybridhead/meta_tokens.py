"""Learnable meta tokens: prepended at training time, a precomputed cache at inference."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cache import CacheError, CacheState, SSMState
from .numerics import Tensor, broadcast_to, concat, no_grad, take_rows

__all__ = [
    "MetaTokens",
    "AugmentedSequence",
    "prepend",
    "PrecomputedInit",
    "StaleInitError",
    "precompute_init",
    "seed_cache",
]


class StaleInitError(CacheError):
    """A precomputed initialisation no longer matches the model parameters."""


@dataclass
class MetaTokens:
    R: Tensor

    @property
    def count(self) -> int:
        return self.R.shape[0]


@dataclass
class AugmentedSequence:
    """Token ids with ``meta_count`` meta slots in front.

    ``loss_mask`` is zero on meta slots; ``is_meta`` marks them.
    """

    tokens: np.ndarray
    meta: MetaTokens

    @property
    def meta_count(self) -> int:
        return self.meta.count

    @property
    def length(self) -> int:
        return self.meta_count + self.tokens.shape[-1]

    @property
    def is_meta(self) -> np.ndarray:
        return np.arange(self.length) < self.meta_count

    @property
    def loss_mask(self) -> np.ndarray:
        return (~self.is_meta).astype(np.float64)

    @property
    def slots(self) -> np.ndarray:
        return np.arange(self.length)

    def embed(self, table: Tensor) -> Tensor:
        ids = np.atleast_2d(self.tokens)
        x = take_rows(table, ids)
        if not self.meta_count:
            return x
        r = broadcast_to(self.meta.R.reshape(1, *self.meta.R.shape), (ids.shape[0], *self.meta.R.shape))
        return concat([r, x], axis=1)


def prepend(x, r: MetaTokens) -> AugmentedSequence:
    return AugmentedSequence(np.asarray(x, dtype=np.int64), r)


@dataclass
class PrecomputedInit:
    """Cache contents after the model has consumed the meta tokens alone."""

    meta_count: int
    kv: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    ssm: list[SSMState | None] = field(default_factory=list)
    fingerprint: str = ""


def precompute_init(model, r: MetaTokens | None = None) -> PrecomputedInit:
    from .model import run_blocks

    r = model.meta if r is None else r
    cfg = model.config
    cache = CacheState.new(cfg, batch=1, dtype=model.dtype)
    if r.count:
        with no_grad():
            run_blocks(model, r.R.reshape(1, *r.R.shape), 0, cache)
    kv = {g: (buf.k_meta[0].copy(), buf.v_meta[0].copy()) for g, buf in cache.groups.items()}
    ssm = [None if s is None else SSMState(s.h[0].copy(), None if s.conv_tail is None else s.conv_tail[0].copy())
           for s in cache.ssm]
    return PrecomputedInit(r.count, kv, ssm, model.fingerprint())


def seed_cache(model, init: PrecomputedInit, batch: int = 1) -> CacheState:
    """Fresh cache whose meta slots are filled from ``init``."""
    if init.fingerprint != model.fingerprint():
        raise StaleInitError("precomputed initialisation was built from different parameters")
    cfg = model.config
    cache = CacheState.new(cfg, batch=batch, dtype=model.dtype)
    if init.meta_count == 0:
        return cache
    for g, buf in cache.groups.items():
        k, v = init.kv[g]
        buf.k_meta = np.repeat(k[None], batch, axis=0)
        buf.v_meta = np.repeat(v[None], batch, axis=0)
        buf.count = init.meta_count
    cache.ssm = [None if s is None else SSMState(np.repeat(s.h[None], batch, 0),
                                                 None if s.conv_tail is None else np.repeat(s.conv_tail[None], batch, 0))
                 for s in init.ssm]
    cache.count = init.meta_count
    cache.fingerprint = init.fingerprint
    return cache
