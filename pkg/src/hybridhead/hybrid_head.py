"""One layer of parallel attention + SSM heads with normalised mean fusion.

Shapes use ``B`` batch, ``L`` sequence, ``d`` hidden width, ``G`` KV groups,
``D`` SSM inner width and ``N`` SSM state size. Functions accept ``[L, d]`` or
``[B, L, d]`` inputs.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .cache import CacheError, KVBuffer, SSMState
from .config import ModelConfig
from .numerics import (
    RngStream,
    ShapeError,
    Tensor,
    concat,
    exp,
    matmul,
    rms_norm,
    silu,
    softmax_rows,
    softplus,
)

__all__ = [
    "AttnSpec",
    "HybridHeadParams",
    "init_hybrid_head",
    "rope_tables",
    "rope_positions",
    "visibility_mask",
    "attn_forward",
    "attention",
    "ssm_inputs",
    "selective_scan",
    "ssm_scan",
    "ssm_forward",
    "fuse",
    "hybrid_forward",
    "zero_branch",
]


@dataclass(frozen=True)
class AttnSpec:
    kind: str = "global"
    window: int = 1024
    rope: bool = True
    rope_base: float = 10000.0
    meta: int = 0
    rope_offset_meta: bool = True

    def __post_init__(self):
        if self.kind not in ("global", "sliding_window"):
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    @classmethod
    def for_layer(cls, config: ModelConfig, layer: int) -> "AttnSpec":
        return cls(config.layer_kind(layer), config.window, True, config.rope_base,
                   config.meta_tokens, config.rope_offset_meta)


@dataclass
class HybridHeadParams:
    """Learnable tensors of one hybrid-head layer.

    Weights are stored input-major (``x @ W``). ``w_k``/``w_v`` are ``None`` in
    layers that read a KV group produced by an earlier layer. SSM fields are
    ``None`` when the layer has no SSM branch.
    """

    w_q: Tensor
    w_k: Tensor | None
    w_v: Tensor | None
    beta1: Tensor
    norm_attn: Tensor
    w_out: Tensor
    w_ssm: Tensor | None = None
    w_g: Tensor | None = None
    conv_w: Tensor | None = None
    conv_b: Tensor | None = None
    a_log: Tensor | None = None
    w_b: Tensor | None = None
    w_c: Tensor | None = None
    w_dt_in: Tensor | None = None
    w_dt: Tensor | None = None
    dt_bias: Tensor | None = None
    w_ssm_out: Tensor | None = None
    beta2: Tensor | None = None
    norm_ssm: Tensor | None = None
    heads: int = 1
    groups: int = 1
    eps: float = 1e-6

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.heads

    @property
    def has_ssm(self) -> bool:
        return self.w_ssm is not None

    @property
    def owns_kv(self) -> bool:
        return self.w_k is not None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)
                if isinstance(getattr(self, f.name), Tensor)]


def init_hybrid_head(config: ModelConfig, rng: RngStream, owns_kv: bool = True, dtype=np.float64) -> HybridHeadParams:
    d, hd = config.hidden, config.head_dim
    std = 0.02
    out_std = std / np.sqrt(2 * config.blocks)

    def w(name, shape, s=std):
        return Tensor(rng.child(name).normal(shape, s, dtype), requires_grad=True)

    def const(shape, value):
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)

    p = HybridHeadParams(
        w_q=w("w_q", (d, config.attn_heads * hd)),
        w_k=w("w_k", (d, config.query_groups * hd)) if owns_kv else None,
        w_v=w("w_v", (d, config.query_groups * hd)) if owns_kv else None,
        beta1=const((d,), 1.0),
        norm_attn=const((d,), 1.0),
        w_out=w("w_out", (d, d), out_std),
        heads=config.attn_heads,
        groups=config.query_groups,
        eps=config.norm_eps,
    )
    if config.use_ssm:
        D, N, R = config.inner, config.ssm_state, config.rank_dt
        k = config.conv_width
        # Step sizes start log-uniform in [1e-3, 1e-1]; the bias is their inverse softplus.
        dt0 = np.exp(rng.child("dt").uniform(D, np.log(1e-3), np.log(1e-1)))
        p.w_ssm = w("w_ssm", (d, D))
        p.w_g = w("w_g", (d, D))
        if k > 0:
            bound = 1.0 / np.sqrt(k)
            p.conv_w = Tensor(rng.child("conv_w").uniform((D, k), -bound, bound, dtype), requires_grad=True)
            p.conv_b = Tensor(rng.child("conv_b").uniform(D, -bound, bound, dtype), requires_grad=True)
        p.a_log = Tensor(np.log(np.tile(np.arange(1, N + 1, dtype=dtype), (D, 1))), requires_grad=True)
        p.w_b = w("w_b", (D, N), D ** -0.5)
        p.w_c = w("w_c", (D, N), D ** -0.5)
        p.w_dt_in = w("w_dt_in", (D, R), D ** -0.5)
        p.w_dt = w("w_dt", (R, D), R ** -0.5)
        p.dt_bias = Tensor((dt0 + np.log(-np.expm1(-dt0))).astype(dtype), requires_grad=True)
        p.w_ssm_out = w("w_ssm_out", (D, d), D ** -0.5)
        p.beta2 = const((d,), 1.0)
        p.norm_ssm = const((d,), 1.0)
    return p


# -- rotary encoding ------------------------------------------------------------


def rope_positions(slots: np.ndarray, spec: AttnSpec) -> np.ndarray:
    slots = np.asarray(slots)
    if spec.rope_offset_meta:
        return slots
    return np.where(slots < spec.meta, 0, slots - spec.meta)


def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype=np.float64):
    half = head_dim // 2
    inv = 1.0 / (base ** (np.arange(half, dtype=np.float64) * 2.0 / head_dim))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = Tensor(cos), Tensor(sin)
    return concat([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


def visibility_mask(q_slots: np.ndarray, k_slots: np.ndarray, spec: AttnSpec) -> np.ndarray:
    """Boolean ``[Lq, Lk]``: causal, meta always visible, reals within the window."""
    q = np.asarray(q_slots)[:, None]
    k = np.asarray(k_slots)[None, :]
    vis = k <= q
    if spec.kind == "sliding_window":
        vis &= (k < spec.meta) | (k > q - spec.window)
    return vis


# -- attention branch -------------------------------------------------------------


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected [L, d] or [B, L, d], got {x.shape}")
    return x, False


def attention(x: Tensor, params: HybridHeadParams, spec: AttnSpec, slots: np.ndarray,
              buffer: KVBuffer | None = None, shared=None, probe: dict | None = None):
    """Attention branch on batched input ``[B, L, d]``.

    Returns ``(y, kv)`` where ``kv = (k, v, key_slots)`` can be handed to a
    layer sharing this KV group. Layers without their own K/V projection must
    receive ``shared``.
    """
    B, L, _ = x.shape
    H, G, hd = params.heads, params.groups, params.head_dim
    r = H // G
    slots = np.asarray(slots)
    cos, sin = rope_tables(rope_positions(slots, spec), hd, spec.rope_base, x.dtype)

    q = matmul(x, params.w_q).reshape(B, L, G, r, hd).transpose(0, 2, 3, 1, 4)
    if spec.rope:
        q = _apply_rope(q, cos, sin)

    if shared is None:
        if not params.owns_kv:
            raise CacheError("layer has no K/V projection and no shared KV was supplied")
        k_new = matmul(x, params.w_k).reshape(B, L, G, hd).transpose(0, 2, 1, 3)
        v_new = matmul(x, params.w_v).reshape(B, L, G, hd).transpose(0, 2, 1, 3)
        if spec.rope:
            k_new = _apply_rope(k_new, cos, sin)
        if buffer is not None:
            if buffer.count != slots[0]:
                raise CacheError(f"cache holds {buffer.count} slots but input starts at slot {slots[0]}")
            k_old, v_old, old_slots = buffer.keys_values()
            k_all = concat([Tensor(k_old), k_new], axis=2)
            v_all = concat([Tensor(v_old), v_new], axis=2)
            key_slots = np.concatenate([old_slots, slots])
            buffer.append(k_new.data, v_new.data, slots)
        else:
            k_all, v_all, key_slots = k_new, v_new, slots
        shared = (k_all, v_all, key_slots)
    k_all, v_all, key_slots = shared

    mask = visibility_mask(slots, key_slots, spec)
    scores = matmul(q, k_all.reshape(B, G, 1, *k_all.shape[2:]).swap_last()) * (1.0 / np.sqrt(hd))
    p = softmax_rows(scores, mask)
    out = matmul(p, v_all.reshape(B, G, 1, *v_all.shape[2:]))
    y = out.transpose(0, 3, 1, 2, 4).reshape(B, L, H * hd)
    if probe is not None:
        probe["attn_probs"] = p.data.reshape(B, H, L, -1)
        probe["key_slots"] = key_slots
        probe["attn_out"] = y.data
        probe["attn_rms"] = float(np.sqrt(np.mean(y.data ** 2)))
    return y, shared


def attn_forward(x_tilde: Tensor, params: HybridHeadParams, spec: AttnSpec,
                 cache: KVBuffer | None = None, start: int | None = None) -> Tensor:
    """Attention-head output for ``x_tilde``.

    With ``cache``, ``x_tilde`` is the suffix continuing at ``cache.count``.
    """
    x, squeeze = _batched(x_tilde)
    if start is None:
        start = cache.count if cache is not None else 0
    elif cache is not None and start != cache.count:
        raise CacheError(f"cache holds {cache.count} slots but input starts at slot {start}")
    slots = np.arange(start, start + x.shape[1])
    y, _ = attention(x, params, spec, slots, buffer=cache)
    return y.reshape(y.shape[1:]) if squeeze else y


# -- SSM branch -------------------------------------------------------------------


class _Scan:
    """Selective scan with a hand-written reverse pass.

    h_t = exp(A * dt_t) * h_{t-1} + dt_t * B_t * u_t ,   y_t = sum_n C_t[n] h_t[:, n]
    """

    @staticmethod
    def apply(u: Tensor, dt: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, h0: np.ndarray | None):
        ud, dd, Ad, Bd, Cd = u.data, dt.data, A.data, Bm.data, Cm.data
        Bsz, L, D = ud.shape
        N = Ad.shape[1]
        dA = np.exp(dd[..., None] * Ad)                          # [B, L, D, N]
        dBu = (dd * ud)[..., None] * Bd[:, :, None, :]           # [B, L, D, N]
        hs = np.empty((Bsz, L, D, N), dtype=ud.dtype)
        h = np.zeros((Bsz, D, N), dtype=ud.dtype) if h0 is None else h0.astype(ud.dtype)
        start = h
        for t in range(L):
            h = dA[:, t] * h + dBu[:, t]
            hs[:, t] = h
        y = np.einsum("bldn,bln->bld", hs, Cd)

        def grad_fn(gy):
            gC = np.einsum("bldn,bld->bln", hs, gy)
            gh_direct = gy[..., None] * Cd[:, :, None, :]
            g_dBu = np.empty_like(hs)
            g_dA = np.empty_like(hs)
            gh = np.zeros((Bsz, D, N), dtype=ud.dtype)
            for t in range(L - 1, -1, -1):
                gh = gh + gh_direct[:, t]
                g_dBu[:, t] = gh
                prev = hs[:, t - 1] if t > 0 else start
                g_dA[:, t] = gh * prev
                gh = gh * dA[:, t]
            gz = g_dA * dA                                       # d/d(dt*A)
            if dt.requires_grad:
                g_dt = np.einsum("bldn,dn->bld", gz, Ad) + np.einsum("bldn,bln->bld", g_dBu, Bd) * ud
                dt._accumulate(g_dt)
            if A.requires_grad:
                A._accumulate(np.einsum("bldn,bld->dn", gz, dd))
            if Bm.requires_grad:
                Bm._accumulate(np.einsum("bldn,bld->bln", g_dBu, dd * ud))
            if u.requires_grad:
                u._accumulate(np.einsum("bldn,bln->bld", g_dBu, Bd) * dd)
            if Cm.requires_grad:
                Cm._accumulate(gC)

        return Tensor._make(y, (u, dt, A, Bm, Cm), grad_fn), hs[:, -1].copy() if L else start.copy()


def selective_scan(u: Tensor, dt: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, h0: np.ndarray | None = None):
    """Run the recurrence; returns ``(y [B, L, D], final state [B, D, N])``."""
    return _Scan.apply(u, dt, A, Bm, Cm, h0)


def ssm_inputs(x: Tensor, params: HybridHeadParams, state: SSMState | None = None):
    """Project input to the scan operands ``(u, dt, A, B, C, new_conv_tail)``."""
    B, L, _ = x.shape
    x_ssm = matmul(x, params.w_ssm)
    tail = None
    if params.conv_w is not None:
        k = params.conv_w.shape[1]
        D = x_ssm.shape[-1]
        if state is not None and state.conv_tail is not None:
            prev = state.conv_tail.astype(x.dtype)
        else:
            prev = np.zeros((B, k - 1, D), dtype=x.dtype)
        xp = concat([Tensor(prev), x_ssm], axis=1) if k > 1 else x_ssm
        acc = params.conv_b
        for j in range(k):
            acc = acc + xp[:, j:j + L, :] * params.conv_w[:, j]
        u = silu(acc)
        tail = xp.data[:, xp.shape[1] - (k - 1):, :].copy() if k > 1 else None
    else:
        u = x_ssm
    dt = softplus(matmul(matmul(u, params.w_dt_in), params.w_dt) + params.dt_bias)
    A = -exp(params.a_log)
    return u, dt, A, matmul(u, params.w_b), matmul(u, params.w_c), tail


def _check_state(state: SSMState | None, params: HybridHeadParams, batch: int) -> None:
    if state is None:
        return
    want = (batch, *params.a_log.shape)
    if state.h.shape != want:
        raise ShapeError(f"SSM state shape {state.h.shape} does not match {want}")


def ssm_scan(x_tilde: Tensor, params: HybridHeadParams, state: SSMState | None = None):
    """Scan output ``[.., L, d_inner]`` (before gating) and the carried state."""
    x, squeeze = _batched(x_tilde)
    _check_state(state, params, x.shape[0])
    u, dt, A, Bm, Cm, tail = ssm_inputs(x, params, state)
    y, h = selective_scan(u, dt, A, Bm, Cm, None if state is None else state.h)
    new = SSMState(h, tail)
    return (y.reshape(y.shape[1:]) if squeeze else y), new


def ssm_forward(x: Tensor, params: HybridHeadParams, state: SSMState | None = None, probe: dict | None = None):
    """Gated SSM branch projected to the fused width, plus the new state."""
    _check_state(state, params, x.shape[0])
    u, dt, A, Bm, Cm, tail = ssm_inputs(x, params, state)
    y, h = selective_scan(u, dt, A, Bm, Cm, None if state is None else state.h)
    gate = silu(matmul(x, params.w_g))
    out = matmul(y * gate, params.w_ssm_out)
    if probe is not None:
        probe["scan_out"] = y.data
        probe["ssm_rms"] = float(np.sqrt(np.mean(out.data ** 2)))
    return out, SSMState(h, tail)


# -- fusion -----------------------------------------------------------------------


def fuse(y_attn: Tensor, y_ssm: Tensor | None, params: HybridHeadParams) -> Tensor:
    """W_out(mean(beta1 * norm(y_attn), beta2 * norm(y_ssm)))."""
    width = params.beta1.shape[0]
    if y_attn.shape[-1] != width:
        raise ShapeError(f"attention branch width {y_attn.shape[-1]} != fused width {width}")
    mixed = rms_norm(y_attn, params.norm_attn, params.eps) * params.beta1
    if y_ssm is not None:
        if y_ssm.shape[-1] != width:
            raise ShapeError(f"SSM branch width {y_ssm.shape[-1]} != fused width {width}")
        mixed = (mixed + rms_norm(y_ssm, params.norm_ssm, params.eps) * params.beta2) * 0.5
    return matmul(mixed, params.w_out)


def hybrid_forward(x_tilde: Tensor, params: HybridHeadParams, spec: AttnSpec,
                   kv_cache: KVBuffer | None = None, state: SSMState | None = None,
                   start: int | None = None, probe: dict | None = None):
    """Full layer: both branches on the same input, then fusion.

    Returns ``(y, new_ssm_state)``.
    """
    x, squeeze = _batched(x_tilde)
    if start is None:
        start = kv_cache.count if kv_cache is not None else 0
    slots = np.arange(start, start + x.shape[1])
    y_attn, _ = attention(x, params, spec, slots, buffer=kv_cache, probe=probe)
    y_ssm, new_state = (ssm_forward(x, params, state, probe) if params.has_ssm else (None, None))
    y = fuse(y_attn, y_ssm, params)
    return (y.reshape(y.shape[1:]) if squeeze else y), new_state


def zero_branch(params: HybridHeadParams, branch: str) -> HybridHeadParams:
    """Copy of ``params`` with the selected branch's rescale vector set to zero."""
    if branch == "attn":
        return dataclasses.replace(params, beta1=Tensor(np.zeros_like(params.beta1.data)))
    if branch == "ssm":
        if params.beta2 is None:
            raise ValueError("layer has no SSM branch")
        return dataclasses.replace(params, beta2=Tensor(np.zeros_like(params.beta2.data)))
    raise ValueError(f"branch must be 'attn' or 'ssm', got {branch!r}")
