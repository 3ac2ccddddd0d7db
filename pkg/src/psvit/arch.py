"""Genotypes for the pooled/shared ViT search space and their analytical cost.

A genotype fixes the pooling mode, the patch embedding and, per stage, the
token count, width, head count and an ordered list of cells. Each cell is a
basic transformer layer, a pair of layers where the second reuses the first's
attention maps, or identity.

Cost convention: one FLOP is one multiply-accumulate. Each of the two
attention products (Q·Kᵀ and scores·V) costs ``score_macs * N² * d``. The
default ``score_macs=1`` is the plain MAC count. ``score_macs=2`` doubles it,
which makes the attention/total ratio of a layer exactly (d+N)/(3d+N).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

SCHEMA_VERSION = 1

POOL_KERNEL = 3
POOL_STRIDE = 2
POOL_PADDING = 1
CONV1D_KERNEL = 3

SOFTMAX_MACS_PER_ENTRY = 1
NORM_MACS_PER_ELEMENT = 5


class GenotypeError(ValueError):
    """Raised when an operation needs a valid genotype and gets an invalid one."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(f"{v.code}: {v.message}" for v in self.violations))


class CellChoice(str, enum.Enum):
    BASIC = "B"
    SHARED_PAIR = "S"
    IDENTITY = "I"

    @property
    def layer_flags(self):
        """Share flag of each realised layer (True = reuses previous maps)."""
        return {"B": (False,), "S": (False, True), "I": ()}[self.value]


CHOICES = (CellChoice.BASIC, CellChoice.SHARED_PAIR, CellChoice.IDENTITY)


@dataclass(frozen=True)
class PatchConfig:
    image_size: int
    patch_size: int
    channels: int = 3
    cls_token: bool = True

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid**2

    @property
    def num_tokens(self):
        return self.num_patches + (1 if self.cls_token else 0)


@dataclass(frozen=True)
class StageSpec:
    tokens: int
    dim: int
    heads: int
    cells: tuple = ()
    # explicit per-layer share flags for hand-built stacks (e.g. share-3);
    # mutually exclusive with ``cells``
    share_flags: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(CellChoice(c) for c in self.cells))
        if self.share_flags is not None:
            object.__setattr__(self, "share_flags", tuple(bool(f) for f in self.share_flags))

    def layer_flags(self):
        if self.share_flags is not None:
            return self.share_flags
        return tuple(f for c in self.cells for f in c.layer_flags)

    @property
    def depth(self):
        return len(self.layer_flags())


@dataclass(frozen=True)
class Genotype:
    pooling_mode: str
    patch: PatchConfig
    stages: tuple
    num_classes: int = 1000
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "pooling_mode", str(self.pooling_mode).upper())
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def depth(self):
        return sum(s.depth for s in self.stages)

    @property
    def num_cells(self):
        return sum(len(s.cells) for s in self.stages)

    def cells(self):
        return tuple(c for s in self.stages for c in s.cells)

    def with_cells(self, cells):
        """Copy of this genotype with its cell slots refilled stage-major from ``cells``."""
        cells = [CellChoice(c) for c in cells]
        if len(cells) != self.num_cells:
            raise ValueError(f"expected {self.num_cells} cell choices, got {len(cells)}")
        out, i = [], 0
        for s in self.stages:
            n = len(s.cells)
            out.append(replace(s, cells=tuple(cells[i : i + n])))
            i += n
        return replace(self, stages=tuple(out))

    # -- serialisation --------------------------------------------------------
    def to_dict(self):
        stages = []
        for s in self.stages:
            d = {"tokens": s.tokens, "dim": s.dim, "heads": s.heads, "cells": [c.value for c in s.cells]}
            if s.share_flags is not None:
                d["share"] = list(s.share_flags)
            stages.append(d)
        return {
            "version": SCHEMA_VERSION,
            "pooling_mode": self.pooling_mode,
            "patch": {
                "image": self.patch.image_size,
                "patch": self.patch.patch_size,
                "channels": self.patch.channels,
                "cls": self.patch.cls_token,
            },
            "stages": stages,
            "num_classes": self.num_classes,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported genotype version {version!r} (expected {SCHEMA_VERSION})")
        p = d["patch"]
        patch = PatchConfig(int(p["image"]), int(p["patch"]), int(p.get("channels", 3)), bool(p.get("cls", True)))
        stages = tuple(
            StageSpec(
                int(s["tokens"]),
                int(s["dim"]),
                int(s["heads"]),
                tuple(s.get("cells", ())),
                tuple(s["share"]) if s.get("share") is not None else None,
            )
            for s in d["stages"]
        )
        return cls(d["pooling_mode"], patch, stages, int(d.get("num_classes", 1000)), int(d.get("mlp_ratio", 4)))

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    stage: int | None = None


def pooled_tokens(tokens, mode):
    """Token count after one pooling step in the given mode."""
    if mode == "1D":
        return (tokens + 2 * POOL_PADDING - POOL_KERNEL) // POOL_STRIDE + 1
    side = math.isqrt(tokens)
    return (side // 2) ** 2


def validate(g: Genotype) -> list[Violation]:
    """Every violated rule of ``g``; an empty list means valid."""
    out = []

    def bad(code, msg, stage=None):
        out.append(Violation(code, msg, stage))

    if g.pooling_mode not in ("1D", "2D"):
        bad("BAD_POOLING_MODE", f"pooling_mode must be 1D or 2D, got {g.pooling_mode!r}")
    p = g.patch
    if min(p.image_size, p.patch_size, p.channels) <= 0:
        bad("NONPOSITIVE_PATCH", "image, patch and channel sizes must be positive")
    elif p.image_size % p.patch_size:
        bad("PATCH_NOT_DIVISIBLE", f"image size {p.image_size} not divisible by patch {p.patch_size}")
    if g.pooling_mode == "2D" and p.cls_token:
        bad("CLS_IN_2D", "2D pooling keeps patches on a grid and has no CLS token")
    if g.num_classes <= 0:
        bad("BAD_NUM_CLASSES", f"num_classes must be positive, got {g.num_classes}")
    if g.mlp_ratio <= 0:
        bad("BAD_MLP_RATIO", f"mlp_ratio must be positive, got {g.mlp_ratio}")
    if not g.stages:
        bad("NO_STAGES", "genotype has no stages")
        return out

    for i, s in enumerate(g.stages):
        if min(s.tokens, s.dim, s.heads) <= 0:
            bad("NONPOSITIVE_STAGE", f"tokens/dim/heads must be positive ({s.tokens}, {s.dim}, {s.heads})", i)
            continue
        if s.dim % s.heads:
            bad("DIM_NOT_DIVISIBLE_BY_HEADS", f"dim {s.dim} not divisible by heads {s.heads}", i)
        if s.share_flags is not None and s.cells:
            bad("CELLS_AND_FLAGS", "a stage lists both cells and explicit share flags", i)
        flags = s.layer_flags()
        if flags and flags[0]:
            bad("SHARE_WITHOUT_SOURCE", "first layer of a stage cannot reuse attention maps", i)
        if g.pooling_mode == "2D" and math.isqrt(s.tokens) ** 2 != s.tokens:
            bad("NONSQUARE_2D_TOKENS", f"2D stage token count {s.tokens} is not a square grid", i)

    if p.patch_size > 0 and p.image_size % p.patch_size == 0 and g.stages[0].tokens != p.num_tokens:
        bad(
            "STAGE_TOKEN_MISMATCH",
            f"first stage has {g.stages[0].tokens} tokens but the patch embedding yields {p.num_tokens}",
            0,
        )

    for i in range(1, len(g.stages)):
        a, b = g.stages[i - 1], g.stages[i]
        if b.dim < a.dim:
            bad("NONDECREASING_DIM", f"token dim decreases from {a.dim} to {b.dim}", i)
        if b.tokens >= a.tokens:
            bad("TOKENS_NOT_DECREASING", f"token count does not decrease ({a.tokens} -> {b.tokens})", i)
        if g.pooling_mode == "2D" and math.isqrt(a.tokens) % 2:
            bad("ODD_SPATIAL", f"2D pooling needs an even grid side, stage {i - 1} has {a.tokens} tokens", i)
        elif g.pooling_mode in ("1D", "2D") and a.tokens > 0 and b.tokens != pooled_tokens(a.tokens, g.pooling_mode):
            bad(
                "POOL_TOKEN_MISMATCH",
                f"pooling {a.tokens} tokens yields {pooled_tokens(a.tokens, g.pooling_mode)}, stage has {b.tokens}",
                i,
            )
    return out


def require_valid(g):
    v = validate(g)
    if v:
        raise GenotypeError(v)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


@dataclass
class CostEntry:
    name: str
    kind: str
    attention_macs: int = 0
    mlp_macs: int = 0
    other_macs: int = 0
    params_attention: int = 0
    params_mlp: int = 0
    params_other: int = 0

    @property
    def macs(self):
        return self.attention_macs + self.mlp_macs + self.other_macs

    @property
    def params(self):
        return self.params_attention + self.params_mlp + self.params_other


@dataclass
class FlopsReport:
    entries: list = field(default_factory=list)
    score_macs: int = 1

    def _total(self, attr):
        return sum(getattr(e, attr) for e in self.entries)

    @property
    def attention_macs(self):
        return self._total("attention_macs")

    @property
    def mlp_macs(self):
        return self._total("mlp_macs")

    @property
    def other_macs(self):
        return self._total("other_macs")

    @property
    def total_macs(self):
        return self.attention_macs + self.mlp_macs + self.other_macs

    @property
    def total_params(self):
        return self._total("params_attention") + self._total("params_mlp") + self._total("params_other")

    def to_dict(self):
        return {
            "version": SCHEMA_VERSION,
            "score_macs": self.score_macs,
            "entries": [dict(asdict(e), macs=e.macs, params=e.params) for e in self.entries],
            "totals": {
                "macs": self.total_macs,
                "attention_macs": self.attention_macs,
                "mlp_macs": self.mlp_macs,
                "other_macs": self.other_macs,
                "params": self.total_params,
            },
        }

    def render(self):
        head = f"{'name':<14}{'kind':<8}{'attn MACs':>15}{'mlp MACs':>15}{'other MACs':>13}{'params':>12}"
        lines = [head, "-" * len(head)]
        for e in self.entries:
            lines.append(
                f"{e.name:<14}{e.kind:<8}{e.attention_macs:>15,}{e.mlp_macs:>15,}{e.other_macs:>13,}{e.params:>12,}"
            )
        lines.append("-" * len(head))
        lines.append(
            f"{'total':<22}{self.attention_macs:>15,}{self.mlp_macs:>15,}{self.other_macs:>13,}{self.total_params:>12,}"
        )
        lines.append(f"total MACs: {self.total_macs:,} ({self.total_macs / 1e9:.3f} G)")
        return "\n".join(lines)


def layer_cost(n, d, heads, shared, mlp_ratio=4, score_macs=1, bias=True, name="layer"):
    """Cost of one pre-norm encoder layer on ``n`` tokens of width ``d``.

    A sharing layer has no Q/K projections and skips the score product.
    """
    proj = (2 if shared else 4) * n * d * d
    products = (1 if shared else 2) * score_macs * n * n * d
    softmax = 0 if shared else SOFTMAX_MACS_PER_ENTRY * n * n * heads
    hidden = mlp_ratio * d
    b = 1 if bias else 0
    return CostEntry(
        name=name,
        kind="shared" if shared else "basic",
        attention_macs=proj + products,
        mlp_macs=2 * n * d * hidden,
        other_macs=softmax + 2 * NORM_MACS_PER_ELEMENT * n * d,
        params_attention=(2 if shared else 4) * (d * d + b * d),
        params_mlp=2 * d * hidden + b * (hidden + d),
        params_other=4 * d * b if bias else 0,
    )


def _entries(g, score_macs, bias):
    require_valid(g)
    b = 1 if bias else 0
    p = g.patch
    d0 = g.stages[0].dim
    patch_in = p.patch_size**2 * p.channels
    entries = [
        CostEntry(
            "embed",
            "embed",
            other_macs=p.num_patches * patch_in * d0,
            params_other=patch_in * d0 + b * d0 + p.num_tokens * d0 + (d0 if p.cls_token else 0),
        )
    ]
    for si, s in enumerate(g.stages):
        if si > 0:
            prev = g.stages[si - 1]
            if g.pooling_mode == "1D":
                conv = prev.tokens * CONV1D_KERNEL * prev.dim * s.dim
                pool = s.tokens * POOL_KERNEL * s.dim
                w = CONV1D_KERNEL * prev.dim * s.dim
            else:
                conv = s.tokens * POOL_KERNEL**2 * prev.dim * s.dim
                pool = 0
                w = POOL_KERNEL**2 * prev.dim * s.dim
            entries.append(
                CostEntry(f"pool{si}", "pool", other_macs=conv + pool, params_other=w + b * s.dim + s.tokens * s.dim)
            )
        for li, shared in enumerate(s.layer_flags()):
            entries.append(layer_cost(s.tokens, s.dim, s.heads, shared, g.mlp_ratio, score_macs, bias, f"s{si}.l{li}"))
    last = g.stages[-1]
    gap = 0 if g.pooling_mode == "1D" else last.tokens * last.dim
    entries.append(
        CostEntry(
            "head",
            "head",
            other_macs=NORM_MACS_PER_ELEMENT * last.tokens * last.dim + gap + last.dim * g.num_classes,
            params_other=2 * last.dim * b + last.dim * g.num_classes + b * g.num_classes,
        )
    )
    return entries


def count_flops(g: Genotype, score_macs: int = 1, bias: bool = True) -> FlopsReport:
    """Per-layer and total MAC / parameter accounting for a valid genotype."""
    return FlopsReport(_entries(g, score_macs, bias), score_macs)


def count_params(g: Genotype, bias: bool = True) -> dict:
    """Parameter counts itemised by component; ``total`` is their exact sum."""
    entries = _entries(g, 1, bias)
    out = {"embed": 0, "attention": 0, "mlp": 0, "norm": 0, "pool": 0, "head": 0}
    for e in entries:
        if e.kind in ("basic", "shared"):
            out["attention"] += e.params_attention
            out["mlp"] += e.params_mlp
            out["norm"] += e.params_other
        else:
            out[e.kind] += e.params
    out["total"] = sum(out.values())
    return out


def attention_compute_share(n, d) -> Fraction:
    """(4Nd² + 4N²d) / (12Nd² + 4N²d) = (d + N) / (3d + N), exactly."""
    if n <= 0 or d <= 0:
        raise ValueError("token count and width must be positive")
    return Fraction(d + n, 3 * d + n)


@dataclass(frozen=True)
class SearchSpaceParams:
    token_choices: int
    dim_choices: int
    share_choices: int
    layers: int

    def __post_init__(self):
        if min(self.token_choices, self.dim_choices, self.share_choices) <= 0 or self.layers < 0:
            raise ValueError("choice counts must be positive and the layer count non-negative")


def search_space_size(p: SearchSpaceParams) -> int:
    """(S_t * S_f * S_s) ** L as an exact integer."""
    return (p.token_choices * p.dim_choices * p.share_choices) ** p.layers


def supernet_cardinality(cells=18, choices=len(CHOICES)) -> int:
    return choices**cells


def last_layer_shared(g: Genotype) -> bool:
    flags = [f for s in g.stages for f in s.layer_flags()]
    return bool(flags) and flags[-1]


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def _stages(tokens, dims, heads, cells):
    return tuple(StageSpec(t, d, h, tuple(c)) for t, d, h, c in zip(tokens, dims, heads, cells))


def _basic(n):
    return (CellChoice.BASIC,) * n


def _sharing(period, depth):
    return tuple(i % period != 0 for i in range(depth))


def canonical_genotypes() -> dict:
    """Named reference genotypes.

    Table-style schedules with unpublished cell choices are filled with basic
    layers, four per stage.
    """
    p16 = PatchConfig(224, 16, 3, True)
    p8 = PatchConfig(224, 8, 3, True)
    toy = PatchConfig(32, 4, 3, True)
    toy2d = PatchConfig(32, 4, 3, False)
    out = {
        "deit-tiny": Genotype("1D", p16, (StageSpec(197, 192, 3, _basic(12)),)),
        "deit-small": Genotype("1D", p16, (StageSpec(197, 384, 6, _basic(12)),)),
        "dimension1": Genotype(
            "1D", p16, _stages([197, 99, 50], [192, 192, 192], [3, 3, 3], [_basic(4), _basic(8), _basic(20)])
        ),
        "dimension2": Genotype("1D", p16, _stages([197, 99, 50], [192, 256, 384], [3, 4, 6], [_basic(4)] * 3)),
        "tiny8": Genotype("1D", p8, _stages([785, 393, 197], [64, 144, 192], [1, 3, 3], [_basic(4)] * 3)),
        "tiny16": Genotype("1D", p16, _stages([197, 99, 50], [192, 288, 384], [3, 6, 6], [_basic(4)] * 3)),
        "small8": Genotype("1D", p8, _stages([785, 393, 197], [144, 256, 384], [3, 4, 6], [_basic(4)] * 3)),
        "small16": Genotype("1D", p16, _stages([197, 99, 50], [288, 512, 768], [6, 8, 12], [_basic(4)] * 3)),
        # single-stage DeiT-Tiny widths with extra layers to stay near 1.3 G
        "sharing2": Genotype("1D", p16, (StageSpec(197, 192, 3, (), _sharing(2, 14)),)),
        "sharing3": Genotype("1D", p16, (StageSpec(197, 192, 3, (), _sharing(3, 15)),)),
        "toy": Genotype(
            "1D", toy, _stages([65, 33, 17], [16, 24, 32], [2, 2, 4], [_basic(2)] * 3), num_classes=10
        ),
        "toy-sharing2": Genotype(
            "1D", toy, _stages([65, 33, 17], [16, 24, 32], [2, 2, 4], [(CellChoice.SHARED_PAIR,)] * 3), num_classes=10
        ),
        "toy-2d": Genotype("2D", toy2d, _stages([64, 16, 4], [16, 24, 32], [2, 2, 4], [_basic(2)] * 3), num_classes=10),
    }
    return out


def preset(name) -> Genotype:
    table = canonical_genotypes()
    if name not in table:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(sorted(table))}")
    return table[name]
