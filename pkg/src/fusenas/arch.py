"""Decode genomes into block-level multimodal architecture graphs.

The decoded graph has three input streams (semg 6x12, acc 18x12, fused
24x12), two channel-concatenation fusion nodes, an optional inserted local
block, an optional attention block, and a fixed two-block tail before the
classifier head.  Each stream is adaptively average-pooled to the common
6x12 grid at its fusion point, so fusion ratios are set purely by the
filter counts of the last pre-fusion blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .genome import REDUCTION_RATIOS, GeneSpace, Genome, validate

STREAM_SHAPES = {"semg": (6, 12), "acc": (18, 12), "fused": (24, 12)}
FUSION_GRID = (6, 12)

# g3 -> (early branch A, early branch B); remaining stream joins at fusion 2
FIRST_FUSION_PAIRS = (("semg", "acc"), ("semg", "fused"), ("acc", "fused"))


class BlockKind(Enum):
    ORDINARY_CONV = "OrdinaryConv"
    RESIDUAL_CONV = "ResidualConv"
    LOCAL_CONV = "LocalConv"
    LOCAL_RESIDUAL_CONV = "LocalResidualConv"
    CHANNEL_ATTENTION = "ChannelAttention"
    SPATIAL_ATTENTION = "SpatialAttention"


ATTENTION_KINDS = (BlockKind.CHANNEL_ATTENTION, BlockKind.SPATIAL_ATTENTION)


@dataclass(frozen=True)
class BlockSpec:
    """One block in the graph: kind, input channels and output filters.

    Attention blocks are channel-preserving (filters == in_channels);
    channel attention additionally carries its bottleneck reduction ratio.
    """

    kind: BlockKind
    in_channels: int
    filters: int
    reduction_ratio: int | None = None

    def __post_init__(self):
        if self.kind in ATTENTION_KINDS and self.filters != self.in_channels:
            raise ValueError("attention blocks must preserve channel count")


@dataclass(frozen=True)
class Branch:
    """An input stem: source stream name plus its ordered blocks."""

    stream: str
    blocks: tuple[BlockSpec, ...]

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].filters if self.blocks else 1


@dataclass(frozen=True)
class ArchGraph:
    """Decoded architecture: branches, fusion nodes, trunk, tail, head.

    Execution order: branch_a and branch_b feed fusion 1 (pooled to the
    common grid, concatenated on channels), then post_fusion1 blocks, the
    trunk, post_trunk blocks; branch_c joins at fusion 2, then post_fusion2
    blocks, the tail, and a global-average-pool -> dense -> softmax head.
    """

    genes: tuple[int, ...]
    branch_a: Branch
    branch_b: Branch
    branch_c: Branch
    post_fusion1: tuple[BlockSpec, ...]
    trunk: tuple[BlockSpec, ...]
    post_trunk: tuple[BlockSpec, ...]
    post_fusion2: tuple[BlockSpec, ...]
    tail: tuple[BlockSpec, ...]
    fusion1_in: tuple[int, int]
    fusion2_in: tuple[int, int]

    @property
    def out_channels(self) -> int:
        return self.tail[-1].filters

    def all_blocks(self):
        """Yield (segment_name, BlockSpec) in execution order."""
        for seg, blocks in (
            ("stem_a", self.branch_a.blocks),
            ("stem_b", self.branch_b.blocks),
            ("post_fuse1", self.post_fusion1),
            ("trunk", self.trunk),
            ("post_trunk", self.post_trunk),
            ("stem_late", self.branch_c.blocks),
            ("post_fuse2", self.post_fusion2),
            ("tail", self.tail),
        ):
            for b in blocks:
                yield seg, b


def _stem(stream: str, depth: int, filter_genes, filters: tuple[int, ...]) -> Branch:
    # first block plain conv, the rest residual
    blocks = []
    in_ch = 1
    for j in range(depth):
        kind = BlockKind.ORDINARY_CONV if j == 0 else BlockKind.RESIDUAL_CONV
        out_ch = filters[filter_genes[j]]
        blocks.append(BlockSpec(kind, in_ch, out_ch))
        in_ch = out_ch
    return Branch(stream, tuple(blocks))


def _attention_block(g: Genome, in_ch: int) -> BlockSpec:
    if g.gene(17) == 0:
        return BlockSpec(
            BlockKind.CHANNEL_ATTENTION, in_ch, in_ch,
            reduction_ratio=REDUCTION_RATIOS[g.gene(19)],
        )
    return BlockSpec(BlockKind.SPATIAL_ATTENTION, in_ch, in_ch)


def decode(g: Genome, space: GeneSpace | None = None) -> ArchGraph:
    """Deterministically expand a valid genome into its architecture graph."""
    space = space or GeneSpace()
    validate(g, space)
    cf = space.candidate_filters

    depth1, depth2, pair = g.gene(1), g.gene(2), g.gene(3)
    stream_a, stream_b = FIRST_FUSION_PAIRS[pair]
    stream_c = next(s for s in STREAM_SHAPES if s not in (stream_a, stream_b))

    branch_a = _stem(stream_a, depth1, g.genes[3:6], cf)
    branch_b = _stem(stream_b, depth1, g.genes[6:9], cf)
    branch_c = _stem(stream_c, min(depth1 + depth2, 3), g.genes[9:12], cf)

    fusion1_in = (branch_a.out_channels, branch_b.out_channels)
    ch = sum(fusion1_in)

    insert_kind = g.gene(13)
    insert_site = g.gene(14)
    attention_on = g.gene(16) == 1
    attention_site = g.gene(18)

    def site_blocks(fusion_idx: int, current: int) -> tuple[tuple[BlockSpec, ...], int]:
        # inserted local block first, attention after it
        blocks = []
        if insert_kind != 0 and insert_site == fusion_idx:
            kind = BlockKind.LOCAL_CONV if insert_kind == 1 else BlockKind.LOCAL_RESIDUAL_CONV
            blocks.append(BlockSpec(kind, current, cf[g.gene(15)]))
            current = cf[g.gene(15)]
        if attention_on and attention_site == fusion_idx:
            blocks.append(_attention_block(g, current))
        return tuple(blocks), current

    post_fusion1, ch = site_blocks(0, ch)

    trunk = []
    for _ in range(depth2):
        trunk.append(BlockSpec(BlockKind.RESIDUAL_CONV, ch, ch))

    post_trunk = (_attention_block(g, ch),) if attention_on and attention_site == 2 else ()

    fusion2_in = (ch, branch_c.out_channels)
    ch = sum(fusion2_in)

    post_fusion2, ch = site_blocks(1, ch)

    tail = [BlockSpec(BlockKind.RESIDUAL_CONV, ch, ch)]
    if attention_on and attention_site == 3:
        tail.append(_attention_block(g, ch))
    tail.append(BlockSpec(BlockKind.ORDINARY_CONV, ch, cf[g.gene(20)]))

    return ArchGraph(
        genes=g.genes,
        branch_a=branch_a,
        branch_b=branch_b,
        branch_c=branch_c,
        post_fusion1=post_fusion1,
        trunk=tuple(trunk),
        post_trunk=post_trunk,
        post_fusion2=post_fusion2,
        tail=tuple(tail),
        fusion1_in=fusion1_in,
        fusion2_in=fusion2_in,
    )


def _is_countable(b: BlockSpec) -> bool:
    return b.kind not in ATTENTION_KINDS


def main_path_depth(a: ArchGraph) -> int:
    """Longest input-to-classifier path counted in stem/trunk/tail conv blocks.

    Inserted post-fusion blocks and attention blocks do not count.
    """
    tail_n = sum(1 for b in a.tail if _is_countable(b))
    via_early = max(len(a.branch_a.blocks), len(a.branch_b.blocks)) + len(a.trunk) + tail_n
    via_late = len(a.branch_c.blocks) + tail_n
    return max(via_early, via_late)


def fusion_ratios(a: ArchGraph) -> tuple[tuple[int, int], tuple[int, int]]:
    """Channel ratio of the two incoming edges at each fusion node, reduced."""

    def reduced(pair: tuple[int, int]) -> tuple[int, int]:
        d = math.gcd(pair[0], pair[1])
        return (pair[0] // d, pair[1] // d)

    return reduced(a.fusion1_in), reduced(a.fusion2_in)


def summarize(a: ArchGraph) -> str:
    """Human-readable listing: one block per line, plus fusion and head lines."""
    r1, r2 = fusion_ratios(a)
    lines = []
    for name in ("semg", "acc", "fused"):
        h, w = STREAM_SHAPES[name]
        lines.append(f"input {name} {h}x{w}x1")

    idx = 0

    def block_line(seg: str, b: BlockSpec) -> str:
        nonlocal idx
        idx += 1
        extra = f" r={b.reduction_ratio}" if b.reduction_ratio is not None else ""
        return f"{idx:3d} {b.kind.value} @{b.filters}{extra} [{seg}]"

    for b in a.branch_a.blocks:
        lines.append(block_line(f"stem_a:{a.branch_a.stream}", b))
    for b in a.branch_b.blocks:
        lines.append(block_line(f"stem_b:{a.branch_b.stream}", b))
    lines.append(
        f"fusion1 {a.branch_a.stream}+{a.branch_b.stream} "
        f"{a.fusion1_in[0]}:{a.fusion1_in[1]} ratio {r1[0]}:{r1[1]} "
        f"-> {sum(a.fusion1_in)}ch @{FUSION_GRID[0]}x{FUSION_GRID[1]}"
    )
    for b in a.post_fusion1:
        lines.append(block_line("post_fuse1", b))
    for b in a.trunk:
        lines.append(block_line("trunk", b))
    for b in a.post_trunk:
        lines.append(block_line("post_trunk", b))
    for b in a.branch_c.blocks:
        lines.append(block_line(f"stem_late:{a.branch_c.stream}", b))
    lines.append(
        f"fusion2 trunk+{a.branch_c.stream} "
        f"{a.fusion2_in[0]}:{a.fusion2_in[1]} ratio {r2[0]}:{r2[1]} "
        f"-> {sum(a.fusion2_in)}ch @{FUSION_GRID[0]}x{FUSION_GRID[1]}"
    )
    for b in a.post_fusion2:
        lines.append(block_line("post_fuse2", b))
    for b in a.tail:
        lines.append(block_line("tail", b))
    lines.append(f"head global_avg_pool -> dense -> softmax (depth {main_path_depth(a)})")
    return "\n".join(lines)
