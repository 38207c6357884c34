"""Model configuration, presets and the key=value text format.

Text format grammar (one per line)::

    # comment until end of line
    key = value

Blank lines are ignored. Keys are ``[A-Za-z0-9_.-]+``; dotted keys name a
section (``model.blocks``). Values are taken verbatim after stripping; their
type comes from the field they populate: integers, reals, ``true``/``false``,
comma-separated integer lists, ``auto`` for optional fields, or bare strings.
Duplicate keys are an error.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, fields
from typing import Any

__all__ = [
    "ConfigError",
    "ModelConfig",
    "PRESETS",
    "preset",
    "full_attention_layers",
    "pair_kv_groups",
    "parse_text",
    "format_text",
    "config_from_mapping",
]


class ConfigError(ValueError):
    """Invalid configuration. ``problems`` lists every violation found."""

    def __init__(self, problems: list[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


_KEY_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if not _KEY_RE.match(key):
            problems.append(f"line {lineno}: bad key {key!r}")
        elif key in out:
            problems.append(f"line {lineno}: duplicate key {key!r}")
        else:
            out[key] = value
    if problems:
        raise ConfigError(problems)
    return out


def _format_value(v: Any) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(str(int(x)) for x in v)
    return str(v)


def format_text(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in values.items())


def _coerce(kind: str, raw: str, key: str):
    raw = raw.strip()
    if "None" in kind or "Optional" in kind:
        if raw.lower() in ("auto", ""):
            return None
    try:
        if kind.startswith("bool"):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def config_from_mapping(cls, values: dict[str, str], base=None):
    """Build dataclass ``cls`` from raw strings, on top of ``base`` if given."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError([f"unknown key {k!r}" for k in unknown])
    kwargs = {} if base is None else dataclasses.asdict(base)
    problems = []
    for k, raw in values.items():
        try:
            kwargs[k] = _coerce(str(known[k].type), raw, k)
        except ConfigError as exc:
            problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return cls(**kwargs)


def full_attention_layers(blocks: int, count: int) -> tuple[int, ...]:
    """Evenly spread ``count`` global layers; 3 gives {0, blocks//2, blocks-1}."""
    if count <= 0:
        return ()
    if count == 1:
        return (0,)
    picks = {(2 * i * (blocks - 1) + (count - 1)) // (2 * (count - 1)) for i in range(count)}
    return tuple(sorted(picks))


def pair_kv_groups(kinds: list[str], share_global: bool = False) -> tuple[int, ...]:
    """Pair consecutive layers of the same kind into shared KV groups.

    Global layers stay alone unless ``share_global``.
    """
    groups: list[int] = []
    gid = -1
    open_slot = False
    for i, kind in enumerate(kinds):
        shareable = kind != "global" or share_global
        if open_slot and shareable and kinds[i - 1] == kind:
            groups.append(gid)
            open_slot = False
            continue
        gid += 1
        groups.append(gid)
        open_slot = shareable
    return tuple(groups)


@dataclass(frozen=True)
class ModelConfig:
    name: str = "custom"
    blocks: int = 4
    hidden: int = 64
    ssm_state: int = 8
    attn_heads: int = 4
    query_groups: int = 2
    num_full_attn: int = 3
    full_attn_layers: tuple[int, ...] | None = None
    window: int = 16
    mlp_hidden: int = 176
    tie_embedding: bool = True
    meta_tokens: int = 8
    vocab: int = 258
    kv_share: str = "pairs"
    kv_share_map: tuple[int, ...] | None = None
    share_global: bool = False
    rope_base: float = 10000.0
    rope_offset_meta: bool = True
    head_count_ssm: int | None = None
    d_inner: int | None = None
    dt_rank: int | None = None
    conv_width: int = 4
    use_ssm: bool = True
    norm_eps: float = 1e-6

    # -- derived geometry -----------------------------------------------------
    @property
    def head_dim(self) -> int:
        return self.hidden // self.attn_heads

    @property
    def inner(self) -> int:
        return self.d_inner if self.d_inner is not None else 2 * self.hidden

    @property
    def ssm_heads(self) -> int:
        if not self.use_ssm:
            return 0
        if self.head_count_ssm is not None:
            return self.head_count_ssm
        return max(1, self.inner // self.ssm_state)

    @property
    def rank_dt(self) -> int:
        return self.dt_rank if self.dt_rank is not None else max(1, -(-self.hidden // 16))

    @property
    def global_layers(self) -> tuple[int, ...]:
        if self.full_attn_layers is not None:
            return tuple(sorted(set(self.full_attn_layers)))
        return full_attention_layers(self.blocks, self.num_full_attn)

    def layer_kind(self, i: int) -> str:
        return "global" if i in self.global_layers else "sliding_window"

    @property
    def layer_kinds(self) -> list[str]:
        return [self.layer_kind(i) for i in range(self.blocks)]

    @property
    def kv_groups(self) -> tuple[int, ...]:
        if self.kv_share_map is not None:
            return tuple(self.kv_share_map)
        if self.kv_share == "none":
            return tuple(range(self.blocks))
        return pair_kv_groups(self.layer_kinds, self.share_global)

    @property
    def num_kv_groups(self) -> int:
        return len(set(self.kv_groups))

    # -- validation -----------------------------------------------------------
    def problems(self) -> list[str]:
        p = []
        for name in ("blocks", "hidden", "attn_heads", "query_groups", "window", "mlp_hidden", "vocab"):
            if getattr(self, name) < 1:
                p.append(f"{name} must be >= 1")
        if self.meta_tokens < 0:
            p.append("meta_tokens must be >= 0")
        if self.attn_heads >= 1 and self.hidden % self.attn_heads:
            p.append(f"hidden ({self.hidden}) not divisible by attn_heads ({self.attn_heads})")
        elif self.attn_heads >= 1 and self.head_dim % 2:
            p.append(f"head_dim ({self.head_dim}) must be even for rotary encoding")
        if self.query_groups >= 1 and self.attn_heads % self.query_groups:
            p.append(f"attn_heads ({self.attn_heads}) not divisible by query_groups ({self.query_groups})")
        if self.kv_share not in ("pairs", "none"):
            p.append(f"kv_share must be 'pairs' or 'none', got {self.kv_share!r}")
        if self.full_attn_layers is not None:
            bad = [i for i in self.full_attn_layers if not 0 <= i < self.blocks]
            if bad:
                p.append(f"full_attn_layers out of range: {bad}")
        if self.use_ssm:
            if self.ssm_state < 1:
                p.append("ssm_state must be >= 1")
            if self.inner < 1:
                p.append("d_inner must be >= 1")
            elif self.ssm_heads < 1 or self.inner % self.ssm_heads:
                p.append(f"d_inner ({self.inner}) not divisible by head_count_ssm ({self.ssm_heads})")
            if self.conv_width < 0:
                p.append("conv_width must be >= 0")
        if self.kv_share_map is not None and len(self.kv_share_map) != self.blocks:
            p.append(f"kv_share_map has {len(self.kv_share_map)} entries for {self.blocks} blocks")
        elif not p:
            kinds = self.layer_kinds
            seen: dict[int, int] = {}
            for i, g in enumerate(self.kv_groups):
                if g in seen and kinds[seen[g]] != kinds[i]:
                    p.append(f"kv group {g} mixes {kinds[seen[g]]} layer {seen[g]} and {kinds[i]} layer {i}")
                seen.setdefault(g, i)
        return p

    def validate(self) -> "ModelConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return format_text(dataclasses.asdict(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return config_from_mapping(cls, parse_text(text)).validate()


PRESETS: dict[str, ModelConfig] = {
    "toy": ModelConfig(name="toy"),
    # Small enough for element-wise finite differences.
    "tiny": ModelConfig(
        name="tiny", blocks=2, hidden=8, ssm_state=4, attn_heads=2, query_groups=1,
        num_full_attn=1, window=3, mlp_hidden=12, meta_tokens=2, vocab=12, d_inner=8,
        head_count_ssm=2, dt_rank=2,
    ),
    "hybrid-125m": ModelConfig(
        name="hybrid-125m", blocks=24, hidden=512, ssm_state=16, attn_heads=8, query_groups=4,
        num_full_attn=3, window=1024, mlp_hidden=1664, meta_tokens=128, vocab=32001,
    ),
    "hybrid-350m": ModelConfig(
        name="hybrid-350m", blocks=32, hidden=768, ssm_state=16, attn_heads=12, query_groups=4,
        num_full_attn=3, window=1024, mlp_hidden=2432, meta_tokens=128, vocab=32001,
    ),
    "hybrid-1.5b": ModelConfig(
        name="hybrid-1.5b", blocks=32, hidden=1600, ssm_state=16, attn_heads=25, query_groups=5,
        num_full_attn=3, window=1024, mlp_hidden=5504, meta_tokens=128, vocab=32001,
    ),
    "llama3.2-1b": ModelConfig(
        name="llama3.2-1b", blocks=16, hidden=2048, attn_heads=32, query_groups=8,
        num_full_attn=16, window=131072, mlp_hidden=8192, meta_tokens=0, vocab=128256,
        kv_share="none", use_ssm=False, rope_base=500000.0,
    ),
}

_ALIASES = {"125M": "hybrid-125m", "350M": "hybrid-350m", "1.5B": "hybrid-1.5b"}


def preset(name: str) -> ModelConfig:
    key = _ALIASES.get(name, name)
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}")
    return PRESETS[key]
