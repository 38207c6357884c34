"""Full stack: embedding, meta tokens, hybrid-head blocks with gated MLPs, tied head."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np

from .cache import CacheError, CacheState
from .config import ModelConfig
from .hybrid_head import (
    AttnSpec,
    HybridHeadParams,
    attention,
    fuse,
    init_hybrid_head,
    ssm_forward,
    zero_branch,
)
from .meta_tokens import MetaTokens, prepend
from .numerics import RngStream, Tensor, matmul, rms_norm, silu, take_rows

__all__ = [
    "BlockWiring",
    "Block",
    "Model",
    "build",
    "forward",
    "count_parameters",
    "reference_config",
    "reference_transformer",
    "all_swa_config",
]


@dataclass(frozen=True)
class BlockWiring:
    layer: int
    attn_spec: AttnSpec
    kv_group: int
    shares_kv_with: int | None = None


def wiring_for(config: ModelConfig) -> list[BlockWiring]:
    first: dict[int, int] = {}
    out = []
    for i, g in enumerate(config.kv_groups):
        owner = first.setdefault(g, i)
        out.append(BlockWiring(i, AttnSpec.for_layer(config, i), g, None if owner == i else owner))
    return out


@dataclass
class Block:
    mixer: HybridHeadParams
    norm_in: Tensor
    norm_mlp: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    wiring: BlockWiring

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [(f"mixer.{n}", t) for n, t in self.mixer.named_tensors()]
        out += [(n, getattr(self, n)) for n in ("norm_in", "norm_mlp", "w_gate", "w_up", "w_down")]
        return out


class Model:
    def __init__(self, config: ModelConfig, embed: Tensor, meta: MetaTokens, blocks: list[Block],
                 norm_f: Tensor, head: Tensor | None = None):
        self.config = config
        self.embed = embed
        self.meta = meta
        self.blocks = blocks
        self.norm_f = norm_f
        self.head = head

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embed", self.embed)]
        if self.meta.count:
            out.append(("meta", self.meta.R))
        for i, blk in enumerate(self.blocks):
            out += [(f"blocks.{i}.{n}", t) for n, t in blk.named_tensors()]
        out.append(("norm_f", self.norm_f))
        if self.head is not None:
            out.append(("head", self.head))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    @property
    def dtype(self):
        return self.embed.dtype

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(str(t.data.dtype).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = dict(self.named_parameters())
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for n, t in mine.items():
            if state[n].shape != t.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {t.shape}")
            t.data = np.array(state[n], copy=True)

    def map_tensors(self, fn) -> "Model":
        """New model whose tensors are ``fn(tensor)``; structure is preserved."""
        def blk(b: Block) -> Block:
            mixer = dataclasses.replace(b.mixer, **{n: fn(t) for n, t in b.mixer.named_tensors()})
            rest = {n: fn(getattr(b, n)) for n in ("norm_in", "norm_mlp", "w_gate", "w_up", "w_down")}
            return dataclasses.replace(b, mixer=mixer, **rest)

        return Model(self.config, fn(self.embed), MetaTokens(fn(self.meta.R)), [blk(b) for b in self.blocks],
                     fn(self.norm_f), None if self.head is None else fn(self.head))

    def astype(self, dtype) -> "Model":
        return self.map_tensors(lambda t: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad))

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def with_branch_zeroed(self, layer: int, branch: str) -> "Model":
        blocks = list(self.blocks)
        blocks[layer] = dataclasses.replace(blocks[layer], mixer=zero_branch(blocks[layer].mixer, branch))
        return Model(self.config, self.embed, self.meta, blocks, self.norm_f, self.head)


def count_parameters(config: ModelConfig) -> int:
    """Analytic parameter count (matches :func:`build` without allocating)."""
    d, hd = config.hidden, config.head_dim
    total = config.vocab * d + config.meta_tokens * d + d
    if not config.tie_embedding:
        total += config.vocab * d
    owners = set()
    for i, g in enumerate(config.kv_groups):
        n = d * config.attn_heads * hd + 2 * d + d * d  # q, beta1, norm_attn, out
        if g not in owners:
            owners.add(g)
            n += 2 * d * config.query_groups * hd
        if config.use_ssm:
            D, N, R, k = config.inner, config.ssm_state, config.rank_dt, config.conv_width
            n += 2 * d * D + (k * D + D if k > 0 else 0) + D * N + 2 * D * N + D * R + R * D + D + D * d + 2 * d
        n += 2 * d + 3 * d * config.mlp_hidden
        total += n
    return total


def build(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    config.validate()
    rng = RngStream(seed)
    d = config.hidden

    def w(name, shape, std=0.02):
        return Tensor(rng.child(name).normal(shape, std, dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    blocks = []
    for wire in wiring_for(config):
        r = rng.child(f"block{wire.layer}")
        mixer = init_hybrid_head(config, r.child("mixer"), owns_kv=wire.shares_kv_with is None, dtype=dtype)
        out_std = 0.02 / np.sqrt(2 * config.blocks)
        blocks.append(Block(
            mixer=mixer,
            norm_in=ones((d,)),
            norm_mlp=ones((d,)),
            w_gate=Tensor(r.child("w_gate").normal((d, config.mlp_hidden), 0.02, dtype), requires_grad=True),
            w_up=Tensor(r.child("w_up").normal((d, config.mlp_hidden), 0.02, dtype), requires_grad=True),
            w_down=Tensor(r.child("w_down").normal((config.mlp_hidden, d), out_std, dtype), requires_grad=True),
            wiring=wire,
        ))
    meta = MetaTokens(w("meta", (config.meta_tokens, d)))
    head = None if config.tie_embedding else w("head", (config.vocab, d))
    return Model(config, w("embed", (config.vocab, d)), meta, blocks, ones((d,)), head)


def _mlp(blk: Block, x: Tensor) -> Tensor:
    return matmul(silu(matmul(x, blk.w_gate)) * matmul(x, blk.w_up), blk.w_down)


def run_blocks(model: Model, x: Tensor, start: int, cache: CacheState | None = None,
               probe: dict | None = None) -> Tensor:
    """Residual stream after all blocks for embedded input ``x`` at slots ``start..``."""
    cfg = model.config
    slots = np.arange(start, start + x.shape[1])
    shared: dict[int, tuple] = {}
    if probe is not None:
        probe.setdefault("layers", [])
        probe["slots"] = slots
    for i, blk in enumerate(model.blocks):
        wire = blk.wiring
        h = rms_norm(x, blk.norm_in, cfg.norm_eps)
        lp = {} if probe is not None else None
        owner = wire.shares_kv_with is None
        buf = cache.groups[wire.kv_group] if (cache is not None and owner) else None
        y_attn, kv = attention(h, blk.mixer, wire.attn_spec, slots, buffer=buf,
                               shared=None if owner else shared[wire.kv_group], probe=lp)
        shared[wire.kv_group] = kv
        y_ssm = None
        if blk.mixer.has_ssm:
            state = cache.ssm[i] if cache is not None else None
            y_ssm, new_state = ssm_forward(h, blk.mixer, state, probe=lp)
            if cache is not None:
                cache.ssm[i] = new_state
        x = x + fuse(y_attn, y_ssm, blk.mixer)
        x = x + _mlp(blk, rms_norm(x, blk.norm_mlp, cfg.norm_eps))
        if probe is not None:
            lp["input"] = h.data
            probe["layers"].append(lp)
    if cache is not None:
        cache.count += x.shape[1]
    return x


def forward(model: Model, tokens, cache: CacheState | None = None, probe: dict | None = None) -> Tensor:
    """Logits over real positions, ``[L, vocab]`` or ``[B, L, vocab]``.

    Without ``cache`` the meta tokens are prepended. A cache that has consumed
    nothing yet also gets them prepended; a cache seeded from a precomputed
    initialisation (or carrying earlier tokens) continues from where it is.
    """
    cfg = model.config
    ids = np.asarray(tokens)
    squeeze = ids.ndim == 1
    ids = np.atleast_2d(ids).astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab})")
    B = ids.shape[0]
    if cache is not None:
        if cache.batch != B:
            raise CacheError(f"cache batch {cache.batch} != input batch {B}")
        if cache.config != cfg:
            raise CacheError("cache was built for a different configuration")
    fresh = cache is None or cache.count == 0
    if fresh:
        aug = prepend(ids, model.meta)
        x = aug.embed(model.embed)
        n_meta = aug.meta_count
        start = 0
    else:
        x = take_rows(model.embed, ids)
        n_meta = 0
        start = cache.count
    h = run_blocks(model, x, start, cache, probe)
    if n_meta:
        h = h[:, n_meta:]
    h = rms_norm(h, model.norm_f, cfg.norm_eps)
    head = model.embed if model.head is None else model.head
    logits = matmul(h, head.T)
    return logits.reshape(logits.shape[1:]) if squeeze else logits


def reference_config(config: ModelConfig, match_params: bool = True) -> ModelConfig:
    """Plain transformer: SSM branch removed, every layer global, no KV sharing.

    With ``match_params`` the MLP is widened to recover the removed parameters.
    """
    ref = config.replace(name=f"reference-{config.name}", use_ssm=False, num_full_attn=config.blocks,
                         full_attn_layers=None, kv_share="none", kv_share_map=None)
    if match_params:
        deficit = count_parameters(config) - count_parameters(ref)
        extra = round(deficit / (3 * config.hidden * config.blocks))
        ref = ref.replace(mlp_hidden=max(1, config.mlp_hidden + extra))
    return ref


def reference_transformer(config: ModelConfig, seed: int = 0, dtype=np.float64, match_params: bool = True) -> Model:
    return build(reference_config(config, match_params), seed, dtype)


def all_swa_config(config: ModelConfig) -> ModelConfig:
    return config.replace(name=f"all-swa-{config.name}", num_full_attn=0, full_attn_layers=None)
