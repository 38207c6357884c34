"""Attention-map materialisation and the metrics computed from it.

Maps are rebuilt in plain float64 numpy from each layer's recorded input and
its parameters, independently of the autodiff forward path, so they double
as oracles for it.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .model import Model, forward
from .numerics import no_grad

__all__ = [
    "AnalysisLimitError",
    "MapEntry",
    "AttentionMapReport",
    "layer_inputs",
    "attention_operands",
    "qkv_operands",
    "score_map",
    "materialize_attn",
    "ssm_operands",
    "ssm_operands_for",
    "ssm_operator",
    "materialize_ssm",
    "build_report",
    "entropy",
    "entropy_comparison",
    "erf_from_rows",
    "erf_naive",
    "erf",
    "erf_uniform",
    "categorize",
    "head_importance",
    "importance_sweep",
    "branch_magnitudes",
]

DEFAULT_LIMIT = 512


class AnalysisLimitError(ValueError):
    pass


def _f64(model: Model) -> Model:
    return model if model.dtype == np.float64 else model.astype(np.float64)


def layer_inputs(model: Model, tokens, limit: int = DEFAULT_LIMIT) -> tuple[list[np.ndarray], dict]:
    """Normalised block inputs ``[L~, d]`` for every layer over the augmented sequence."""
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    total = ids.size + model.config.meta_tokens
    if total > limit:
        raise AnalysisLimitError(f"sequence of {total} slots exceeds the analysis limit of {limit}")
    probe: dict = {}
    with no_grad():
        forward(_f64(model), ids, probe=probe)
    return [lp["input"][0] for lp in probe["layers"]], probe


# -- attention ------------------------------------------------------------------------


def _rope(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Rotate half-split pairs as complex numbers. ``x`` is ``[..., L, hd]``."""
    half = x.shape[-1] // 2
    freq = base ** (-np.arange(half) * 2.0 / x.shape[-1])
    z = (x[..., :half] + 1j * x[..., half:]) * np.exp(1j * np.outer(positions, freq))
    return np.concatenate([z.real, z.imag], axis=-1)


def _visible(n: int, meta: int, kind: str, window: int) -> np.ndarray:
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    causal = j <= i
    if kind == "global":
        return causal
    return causal & ((j < meta) | (i - j < window))


def qkv_operands(x_q: np.ndarray, x_kv: np.ndarray, q_params, kv_params, spec) -> tuple:
    """Rotated ``q [H, L, hd]`` from ``q_params`` and ``k, v [G, L, hd]`` from ``kv_params``."""
    H, G, hd = q_params.heads, q_params.groups, q_params.head_dim
    n = x_q.shape[0]
    slots = np.arange(n)
    pos = slots if spec.rope_offset_meta else np.where(slots < spec.meta, 0, slots - spec.meta)
    q = (x_q @ q_params.w_q.data).reshape(n, H, hd).transpose(1, 0, 2)
    k = (x_kv @ kv_params.w_k.data).reshape(n, G, hd).transpose(1, 0, 2)
    v = (x_kv @ kv_params.w_v.data).reshape(n, G, hd).transpose(1, 0, 2)
    if spec.rope:
        q = _rope(q, pos, spec.rope_base)
        k = _rope(k, pos, spec.rope_base)
    return q, k, v


def attention_operands(model: Model, inputs: list[np.ndarray], layer: int):
    """Operands of ``layer``; keys and values come from the layer that owns its KV group."""
    blk = model.blocks[layer]
    owner = layer if blk.wiring.shares_kv_with is None else blk.wiring.shares_kv_with
    return qkv_operands(inputs[layer], inputs[owner], blk.mixer, model.blocks[owner].mixer, blk.wiring.attn_spec)


def score_map(q: np.ndarray, k: np.ndarray, spec) -> np.ndarray:
    """Row-stochastic ``softmax(q k^T / sqrt(hd))`` under the layer's visibility rule."""
    s = q @ k.T / math.sqrt(q.shape[-1])
    vis = _visible(s.shape[0], spec.meta, spec.kind, spec.window)
    s = np.where(vis, s, -np.inf)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _attn_map(model: Model, inputs: list[np.ndarray], layer: int, head: int) -> np.ndarray:
    cfg = model.config
    q, k, _ = attention_operands(model, inputs, layer)
    g = head // (cfg.attn_heads // cfg.query_groups)
    return score_map(q[head], k[g], model.blocks[layer].wiring.attn_spec)


def materialize_attn(model: Model, tokens, layer: int, head: int, limit: int = DEFAULT_LIMIT) -> np.ndarray:
    """Row-stochastic score map ``[L~, L~]`` of one attention head."""
    inputs, _ = layer_inputs(model, tokens, limit)
    return _attn_map(_f64(model), inputs, layer, head)


# -- SSM ------------------------------------------------------------------------------


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _silu(x):
    return x / (1.0 + np.exp(-x))


def ssm_operands_for(p, x: np.ndarray):
    """Scan operands of one layer's parameters ``p`` on its input ``x [L, d]``.

    Returns ``(u [L, D], dt [L, D], A [D, N], B [L, N], C [L, N], gate [L, D])``.
    """
    xs = x @ p.w_ssm.data
    if p.conv_w is not None:
        k = p.conv_w.shape[1]
        padded = np.vstack([np.zeros((k - 1, xs.shape[1])), xs])
        conv = p.conv_b.data + sum(padded[j:j + xs.shape[0]] * p.conv_w.data[:, j] for j in range(k))
        u = _silu(conv)
    else:
        u = xs
    dt = _softplus(u @ p.w_dt_in.data @ p.w_dt.data + p.dt_bias.data)
    A = -np.exp(p.a_log.data)
    return u, dt, A, u @ p.w_b.data, u @ p.w_c.data, _silu(x @ p.w_g.data)


def ssm_operands(model: Model, inputs: list[np.ndarray], layer: int):
    return ssm_operands_for(model.blocks[layer].mixer, inputs[layer])


def ssm_operator(dt: np.ndarray, A: np.ndarray, B: np.ndarray, C: np.ndarray,
                 channels: Iterable[int] | None = None) -> np.ndarray:
    """Per-channel data-controlled operator ``alpha [len(channels), L, L]``.

    ``alpha[c, i, j] = sum_n C[i, n] exp(A[c, n] * sum_{k=j+1..i} dt[k, c]) B[j, n] dt[j, c]``
    for ``j <= i``; zero above the diagonal. The scan output of channel ``c``
    is ``alpha[c] @ u[:, c]`` from a zero state.
    """
    L, D = dt.shape
    chans = np.arange(D) if channels is None else np.asarray(list(channels))
    cs = np.cumsum(dt[:, chans], axis=0)                       # [L, c]
    Ac = A[chans]                                              # [c, N]
    out = np.zeros((len(chans), L, L))
    for i in range(L):
        gap = cs[i][None, :] - cs[: i + 1]                     # [j, c]
        decay = np.exp(gap.T[:, :, None] * Ac[:, None, :])     # [c, j, N]
        w = decay * B[None, : i + 1, :] * C[i][None, None, :]  # [c, j, N]
        out[:, i, : i + 1] = w.sum(axis=2) * dt[: i + 1, chans].T
    return out


def _ssm_head_channels(model: Model, head: int) -> np.ndarray:
    cfg = model.config
    per = cfg.inner // cfg.ssm_heads
    return np.arange(head * per, (head + 1) * per)


def _ssm_map(model: Model, inputs: list[np.ndarray], layer: int, head: int) -> np.ndarray:
    _, dt, A, B, C, _ = ssm_operands(model, inputs, layer)
    alpha = ssm_operator(dt, A, B, C, _ssm_head_channels(model, head))
    agg = np.abs(alpha).mean(axis=0)
    return agg / agg.sum(axis=1, keepdims=True)


def materialize_ssm(model: Model, tokens, layer: int, head: int, limit: int = DEFAULT_LIMIT) -> np.ndarray:
    """Row-normalised mean-|alpha| map ``[L~, L~]`` of one SSM head (channel group)."""
    model = _f64(model)
    if not model.config.use_ssm:
        raise ValueError("model has no SSM heads")
    inputs, _ = layer_inputs(model, tokens, limit)
    return _ssm_map(model, inputs, layer, head)


# -- reports --------------------------------------------------------------------------


@dataclass
class MapEntry:
    layer: int
    head: int
    kind: str
    matrix: np.ndarray


@dataclass
class AttentionMapReport:
    meta_count: int
    length: int
    num_layers: int
    maps: list[MapEntry] = field(default_factory=list)
    branch_rms: list[dict] = field(default_factory=list)

    def select(self, kinds: Iterable[str] = ("attn", "ssm")) -> list[MapEntry]:
        kinds = tuple(kinds)
        return [e for e in self.maps if e.kind in kinds]

    def last_rows(self, kinds: Iterable[str] = ("attn", "ssm")) -> np.ndarray:
        """``[layers, heads, S]`` last-token rows for the ERF formula."""
        sel = self.select(kinds)
        by_layer: dict[int, list[np.ndarray]] = {}
        for e in sel:
            by_layer.setdefault(e.layer, []).append(e.matrix[-1])
        return np.array([by_layer[k] for k in sorted(by_layer)])

    def to_json(self) -> dict:
        return {
            "meta_count": self.meta_count,
            "length": self.length,
            "num_layers": self.num_layers,
            "maps": [{"layer": e.layer, "head": e.head, "kind": e.kind, "matrix": e.matrix.tolist()} for e in self.maps],
        }


def build_report(model: Model, tokens, kinds: Iterable[str] = ("attn", "ssm"),
                 layers: Iterable[int] | None = None, limit: int = DEFAULT_LIMIT) -> AttentionMapReport:
    model = _f64(model)
    cfg = model.config
    inputs, probe = layer_inputs(model, tokens, limit)
    kinds = tuple(kinds)
    layers = range(cfg.blocks) if layers is None else layers
    rep = AttentionMapReport(cfg.meta_tokens, inputs[0].shape[0], cfg.blocks)
    for i in layers:
        if "attn" in kinds:
            for h in range(cfg.attn_heads):
                rep.maps.append(MapEntry(i, h, "attn", _attn_map(model, inputs, i, h)))
        if "ssm" in kinds and cfg.use_ssm:
            for h in range(cfg.ssm_heads):
                rep.maps.append(MapEntry(i, h, "ssm", _ssm_map(model, inputs, i, h)))
    rep.branch_rms = [{"layer": i, "attn_rms": lp.get("attn_rms"), "ssm_rms": lp.get("ssm_rms")}
                      for i, lp in enumerate(probe["layers"])]
    return rep


def branch_magnitudes(model: Model, tokens) -> list[dict]:
    """Per-layer RMS of each branch's output before normalisation."""
    probe: dict = {}
    with no_grad():
        forward(model, np.asarray(tokens), probe=probe)
    return [{"layer": i, "attn_rms": lp.get("attn_rms"), "ssm_rms": lp.get("ssm_rms")}
            for i, lp in enumerate(probe["layers"])]


# -- entropy --------------------------------------------------------------------------


def _row_entropy(m: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(m > 0, m * np.log(m), 0.0)
    return -t.sum(axis=1)


def entropy(report: AttentionMapReport, real_rows_only: bool = True) -> dict[str, list[float]]:
    """Mean row entropy (nats) per layer, separately for each head kind."""
    start = report.meta_count if real_rows_only else 0
    acc: dict[str, dict[int, list[float]]] = {}
    for e in report.maps:
        acc.setdefault(e.kind, {}).setdefault(e.layer, []).append(float(_row_entropy(e.matrix[start:]).mean()))
    return {kind: [float(np.mean(v[l])) for l in sorted(v)] for kind, v in acc.items()}


def entropy_comparison(with_meta: AttentionMapReport, without_meta: AttentionMapReport) -> list[dict]:
    """Paired per-layer series for plotting the effect of meta tokens."""
    a, b = entropy(with_meta), entropy(without_meta)
    rows = []
    for kind in sorted(set(a) & set(b)):
        for layer, (x, y) in enumerate(zip(a[kind], b[kind])):
            rows.append({"layer": layer, "kind": kind, "with_meta": x, "without_meta": y})
    return rows


# -- effective receptive field --------------------------------------------------------


def erf_from_rows(rows: np.ndarray) -> float:
    """ERF from last-token rows ``rows[n, h, s]`` (layers, heads, positions).

    Each term is ``2 M (S - s) (N - n + 1) / (H N (N + 1))`` with 1-based
    ``n`` and ``s``; terms are summed exactly (``math.fsum``).
    """
    rows = np.asarray(rows, dtype=np.float64)
    N, H, S = rows.shape
    dist = (S - np.arange(1, S + 1)).astype(np.float64)[None, None, :]
    depth = (N - np.arange(1, N + 1) + 1).astype(np.float64)[:, None, None]
    terms = 2.0 * rows * dist * depth / (H * N * (N + 1))
    return math.fsum(terms.ravel())


def erf_naive(rows) -> float:
    rows = np.asarray(rows, dtype=np.float64)
    N, H, S = rows.shape
    terms = []
    for n in range(1, N + 1):
        for h in range(1, H + 1):
            for s in range(1, S + 1):
                terms.append(2.0 * float(rows[n - 1, h - 1, s - 1]) * float(S - s) * float(N - n + 1) / (H * N * (N + 1)))
    return math.fsum(terms)


def erf(model: Model, tokens, kinds: Iterable[str] = ("attn", "ssm"), limit: int = DEFAULT_LIMIT) -> float:
    report = build_report(model, tokens, kinds, limit=limit)
    return erf_from_rows(report.last_rows(kinds))


def erf_uniform(config, S: int) -> float:
    """ERF of attention heads when every head attends uniformly to what it can see."""
    rows = []
    vis_cache = {}
    for i in range(config.blocks):
        kind = config.layer_kind(i)
        if kind not in vis_cache:
            v = _visible(S, config.meta_tokens, kind, config.window)[-1].astype(np.float64)
            vis_cache[kind] = v / v.sum()
        rows.append([vis_cache[kind]] * config.attn_heads)
    return erf_from_rows(np.array(rows))


# -- score categories -----------------------------------------------------------------


def _categories(m: np.ndarray, meta: int) -> dict[str, float]:
    real = m[meta:]
    n = real.shape[0]
    out = {"Meta": float(real[:, :meta].sum())}
    bos = float(real[:, meta].sum()) if n else 0.0
    diag = sum(float(real[r, meta + r]) for r in range(1, n))  # BOS row's diagonal counts as BOS
    out["BOS"] = bos
    out["Self"] = diag
    out["Cross"] = float(real.sum()) - out["Meta"] - bos - diag
    return {k: v / n for k, v in out.items()} if n else {k: 0.0 for k in out}


def categorize(report: AttentionMapReport, m: int | None = None) -> dict:
    """Meta/BOS/Self/Cross sums over real-token rows, normalised by their count.

    The BOS token sits at slot ``m``; on its own row the diagonal is BOS.
    """
    meta = report.meta_count if m is None else m
    per_map = []
    totals: dict[str, dict[str, list[float]]] = {}
    for e in report.maps:
        c = _categories(e.matrix, meta)
        per_map.append({"layer": e.layer, "head": e.head, "kind": e.kind, **c})
        for k, v in c.items():
            totals.setdefault(e.kind, {}).setdefault(k, []).append(v)
    mean = {kind: {k: float(np.mean(v)) for k, v in cats.items()} for kind, cats in totals.items()}
    return {"per_map": per_map, "mean_by_kind": mean}


# -- head importance ------------------------------------------------------------------


def head_importance(model: Model, evaluate: Callable[[Model], float], layer: int, branch: str,
                    baseline: float | None = None) -> float:
    """Accuracy drop from zeroing one branch's rescale vector in ``layer``."""
    base = evaluate(model) if baseline is None else baseline
    return base - evaluate(model.with_branch_zeroed(layer, branch))


def importance_sweep(model: Model, evaluate: Callable[[Model], float]) -> dict:
    """Per-layer deltas as a ``[layers, 2]`` matrix (columns: attn, ssm)."""
    base = evaluate(model)
    branches = ["attn", "ssm"] if model.config.use_ssm else ["attn"]
    deltas = []
    for layer in range(model.config.blocks):
        row = [head_importance(model, evaluate, layer, b, base) for b in branches]
        if len(row) == 1:
            row.append(float("nan"))
        deltas.append(row)
    deltas = np.array(deltas)
    flags = []
    if model.config.use_ssm:
        flags.append({"layer": 0, "branch": "ssm", "delta": float(deltas[0, 1]), "note": "first-layer SSM branch"})
    return {"baseline": base, "columns": ["attn", "ssm"], "deltas": [[None if math.isnan(v) else v for v in r] for r in deltas.tolist()],
            "flagged": flags}


# -- serialisation --------------------------------------------------------------------


def long_rows(records: Iterable[dict]) -> list[tuple]:
    """Flatten ``{layer, head, kind, metric: value...}`` records to long format."""
    out = []
    for r in records:
        for k, v in r.items():
            if k in ("layer", "head", "kind"):
                continue
            out.append((r.get("layer", ""), r.get("head", ""), r.get("kind", ""), k, v))
    return out


def to_csv(rows: Iterable[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "head", "kind", "metric", "value"])
    for r in rows:
        w.writerow([r[0], r[1], r[2], r[3], repr(r[4]) if isinstance(r[4], float) else r[4]])
    return buf.getvalue()
