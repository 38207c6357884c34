"""Runtime KV/SSM caches and the analytic cache-size / compute cost model."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .numerics import ContractError

__all__ = [
    "CacheError",
    "KVBuffer",
    "SSMState",
    "CacheState",
    "CostModel",
    "cache_bytes",
    "cache_report",
    "reconciliation_table",
    "flops_estimate",
]


class CacheError(ContractError):
    """Cache contents are inconsistent with the requested operation."""


@dataclass
class SSMState:
    """Recurrent state of one layer's SSM branch.

    ``h`` is ``[batch, d_inner, d_state]``; ``conv_tail`` holds the last
    ``conv_width - 1`` pre-convolution inputs, ``[batch, conv_width - 1, d_inner]``.
    """

    h: np.ndarray
    conv_tail: np.ndarray | None = None

    def copy(self) -> "SSMState":
        tail = None if self.conv_tail is None else self.conv_tail.copy()
        return SSMState(self.h.copy(), tail)


class KVBuffer:
    """Key/value store for one KV group.

    Entries are indexed by slot (position in the meta-augmented sequence).
    Slots below ``meta`` are pinned; for sliding-window groups only the last
    ``window`` real entries are retained.
    """

    def __init__(self, kind: str, window: int, meta: int, batch: int, groups: int, head_dim: int, dtype=np.float64):
        if kind not in ("global", "sliding_window"):
            raise ValueError(f"unknown attention kind {kind!r}")
        self.kind = kind
        self.window = window
        self.meta = meta
        empty = np.zeros((batch, groups, 0, head_dim), dtype=dtype)
        self.k_meta = empty
        self.v_meta = empty
        self.k_real = empty
        self.v_real = empty
        self.count = 0

    @property
    def real_slots(self) -> np.ndarray:
        n = self.k_real.shape[2]
        return np.arange(self.count - n, self.count)

    @property
    def slots(self) -> np.ndarray:
        return np.concatenate([np.arange(self.k_meta.shape[2]), self.real_slots])

    def keys_values(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = np.concatenate([self.k_meta, self.k_real], axis=2)
        v = np.concatenate([self.v_meta, self.v_real], axis=2)
        return k, v, self.slots

    def __len__(self) -> int:
        return self.k_meta.shape[2] + self.k_real.shape[2]

    def append(self, k: np.ndarray, v: np.ndarray, slots: np.ndarray) -> None:
        slots = np.asarray(slots)
        n = k.shape[2]
        if len(slots) != n or v.shape != k.shape:
            raise CacheError(f"append: {n} keys, {v.shape[2]} values, {len(slots)} slots")
        expected = np.arange(self.count, self.count + n)
        if not np.array_equal(slots, expected):
            raise CacheError(f"out-of-order append: expected slots from {self.count}, got from {slots[0] if n else '-'}")
        n_meta = int(np.clip(self.meta - self.count, 0, n))
        if n_meta:
            self.k_meta = np.concatenate([self.k_meta, k[:, :, :n_meta]], axis=2)
            self.v_meta = np.concatenate([self.v_meta, v[:, :, :n_meta]], axis=2)
        self.k_real = np.concatenate([self.k_real, k[:, :, n_meta:]], axis=2)
        self.v_real = np.concatenate([self.v_real, v[:, :, n_meta:]], axis=2)
        if self.kind == "sliding_window" and self.k_real.shape[2] > self.window:
            self.k_real = self.k_real[:, :, -self.window:].copy()
            self.v_real = self.v_real[:, :, -self.window:].copy()
        self.count += n

    def arrays(self) -> list[np.ndarray]:
        return [self.k_meta, self.k_real, self.v_meta, self.v_real]

    def copy(self) -> "KVBuffer":
        out = KVBuffer.__new__(KVBuffer)
        out.__dict__.update(self.__dict__)
        for name in ("k_meta", "v_meta", "k_real", "v_real"):
            setattr(out, name, getattr(self, name).copy())
        return out


@dataclass
class CacheState:
    """Per-group KV buffers plus per-layer SSM state for one decode session."""

    config: ModelConfig
    batch: int
    groups: dict[int, KVBuffer]
    ssm: list[SSMState | None]
    count: int = 0
    fingerprint: str | None = None

    @classmethod
    def new(cls, config: ModelConfig, batch: int = 1, dtype=np.float64) -> "CacheState":
        groups: dict[int, KVBuffer] = {}
        for i, g in enumerate(config.kv_groups):
            if g not in groups:
                groups[g] = KVBuffer(config.layer_kind(i), config.window, config.meta_tokens,
                                     batch, config.query_groups, config.head_dim, dtype)
        return cls(config, batch, groups, [None] * config.blocks)

    def buffer_for_layer(self, layer: int) -> KVBuffer:
        return self.groups[self.config.kv_groups[layer]]

    @property
    def real_count(self) -> int:
        return max(0, self.count - self.config.meta_tokens)

    def nbytes(self, bytes_per_element: int = 2, include_ssm_state: bool = True, include_conv_state: bool = True) -> int:
        return len(self.serialize(np.dtype(f"<f{bytes_per_element}"), include_ssm_state, include_conv_state))

    def serialize(self, dtype=np.dtype("<f2"), include_ssm_state: bool = True, include_conv_state: bool = True) -> bytes:
        """Raw buffer contents in a fixed order: groups by id, then layers."""
        chunks = []
        for g in sorted(self.groups):
            chunks.extend(a.astype(dtype).tobytes() for a in self.groups[g].arrays())
        for st in self.ssm:
            if st is None:
                continue
            if include_ssm_state:
                chunks.append(st.h.astype(dtype).tobytes())
            if include_conv_state and st.conv_tail is not None:
                chunks.append(st.conv_tail.astype(dtype).tobytes())
        return b"".join(chunks)

    def copy(self) -> "CacheState":
        return dataclasses.replace(
            self,
            groups={g: b.copy() for g, b in self.groups.items()},
            ssm=[None if s is None else s.copy() for s in self.ssm],
        )


# -- analytic cost model -------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Conventions for cache accounting.

    Defaults reproduce an FP16 cache measured in decimal megabytes.
    """

    seq_len: int = 8000
    bytes_per_element: int = 2
    megabyte: int = 10**6
    include_ssm_state: bool = True
    include_conv_state: bool = True

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _effective_len(config: ModelConfig, kind: str, L: int) -> int:
    m = config.meta_tokens
    if kind == "sliding_window":
        return min(L, config.window) + m
    return L + m


def _group_layout(config: ModelConfig) -> list[tuple[int, list[int], str]]:
    out: dict[int, list[int]] = {}
    for i, g in enumerate(config.kv_groups):
        out.setdefault(g, []).append(i)
    return [(g, layers, config.layer_kind(layers[0])) for g, layers in sorted(out.items())]


def cache_report(config: ModelConfig, L: int, model: CostModel | None = None) -> dict:
    model = model or CostModel(seq_len=L)
    if L < 1:
        raise ValueError("sequence length must be >= 1")
    bpe = model.bytes_per_element
    per_kv_entry = 2 * config.query_groups * config.head_dim * bpe
    per_group = []
    kv_total = 0
    for g, layers, kind in _group_layout(config):
        eff = _effective_len(config, kind, L)
        nbytes = eff * per_kv_entry
        kv_total += nbytes
        per_group.append({"group": g, "layers": layers, "kind": kind, "effective_len": eff, "bytes": nbytes})
    ssm_bytes = 0
    conv_bytes = 0
    if config.use_ssm:
        if model.include_ssm_state:
            ssm_bytes = config.blocks * config.inner * config.ssm_state * bpe
        if model.include_conv_state and config.conv_width > 1:
            conv_bytes = config.blocks * (config.conv_width - 1) * config.inner * bpe
    total = kv_total + ssm_bytes + conv_bytes
    return {
        "config_name": config.name,
        "L": L,
        "per_group": per_group,
        "kv_bytes": kv_total,
        "ssm_bytes": ssm_bytes,
        "conv_bytes": conv_bytes,
        "total_bytes": total,
        "total_MB": total / model.megabyte,
        "conventions": {
            "bytes_per_element": bpe,
            "megabyte": model.megabyte,
            "include_ssm_state": model.include_ssm_state,
            "include_conv_state": model.include_conv_state,
            "global_effective_len": "L + meta_tokens",
            "swa_effective_len": "min(L, window) + meta_tokens",
        },
    }


def cache_bytes(config: ModelConfig, L: int, model: CostModel | None = None) -> int:
    """Total cache bytes after ``L`` real tokens."""
    return cache_report(config, L, model)["total_bytes"]


def reconciliation_table(config: ModelConfig, L: int, target_mb: float) -> list[dict]:
    """Cache totals under alternative sharing layouts and state conventions."""
    layouts = {
        "pairs_swa_only": config.replace(kv_share="pairs", share_global=False, kv_share_map=None),
        "pairs_including_global": config.replace(kv_share="pairs", share_global=True, kv_share_map=None),
        "no_sharing": config.replace(kv_share="none", kv_share_map=None),
    }
    conventions = {
        "kv_only": CostModel(seq_len=L, include_ssm_state=False, include_conv_state=False),
        "kv+ssm": CostModel(seq_len=L, include_ssm_state=True, include_conv_state=False),
        "kv+ssm+conv": CostModel(seq_len=L),
    }
    rows = []
    for lname, cfg in layouts.items():
        for cname, cm in conventions.items():
            rep = cache_report(cfg, L, cm)
            rows.append({
                "layout": lname,
                "state": cname,
                "kv_groups": cfg.num_kv_groups,
                "total_MB": rep["total_MB"],
                "rel_diff": rep["total_MB"] / target_mb - 1.0,
            })
    return rows


def flops_estimate(config: ModelConfig, L: int) -> dict:
    """Multiply-accumulate counts for processing ``L`` real tokens.

    Meta tokens are treated as precomputed (they contribute keys, not queries).
    """
    d, hd, H, G = config.hidden, config.head_dim, config.attn_heads, config.query_groups
    m = config.meta_tokens
    owners = {g: layers[0] for g, layers, _ in _group_layout(config)}
    proj = attn = scan = 0
    per_layer_attn = []
    for i in range(config.blocks):
        p = d * H * hd + d * d  # query and output projections
        if owners[config.kv_groups[i]] == i:
            p += 2 * d * G * hd
        if config.use_ssm:
            di, n, r = config.inner, config.ssm_state, config.rank_dt
            p += 2 * d * di + 2 * di * r + 2 * di * n + di * d + config.conv_width * di
            scan += L * 3 * di * n
        p += 3 * d * config.mlp_hidden
        proj += L * p
        if config.layer_kind(i) == "global":
            keys = L * (L + 1) // 2 + L * m
        else:
            w = config.window
            full = min(L, w)
            keys = full * (full + 1) // 2 + max(0, L - w) * w + L * m
        a = 2 * H * hd * keys
        per_layer_attn.append(a)
        attn += a
    head = L * d * config.vocab
    return {
        "L": L,
        "projection_macs": proj,
        "attention_macs": attn,
        "attention_macs_per_layer": per_layer_attn,
        "ssm_scan_macs": scan,
        "lm_head_macs": head,
        "total_macs": proj + attn + scan + head,
    }
