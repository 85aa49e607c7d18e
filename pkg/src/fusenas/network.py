"""Instantiate a decoded architecture graph as a trainable network.

The network owns one layer object per graph block plus the fusion pooling
and the classifier head.  ``forward`` takes the three feature streams as
(batch, H, W) arrays and returns class probabilities; ``backward`` takes
the logits gradient.  Parameters are addressed by stable dotted paths so
the optimizer and checkpoints stay in sync.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from .arch import ATTENTION_KINDS, FUSION_GRID, STREAM_SHAPES, ArchGraph, BlockKind, BlockSpec


class ShapeError(ValueError):
    pass


def _make_block(spec: BlockSpec, height: int, width: int, rng: np.random.Generator):
    if spec.kind == BlockKind.ORDINARY_CONV:
        return L.OrdinaryConvBlock(spec.in_channels, spec.filters, rng)
    if spec.kind == BlockKind.RESIDUAL_CONV:
        return L.ResidualConvBlock(spec.in_channels, spec.filters, rng)
    if spec.kind == BlockKind.LOCAL_CONV:
        return L.LocalConvBlock(height, width, spec.in_channels, spec.filters, rng)
    if spec.kind == BlockKind.LOCAL_RESIDUAL_CONV:
        return L.LocalResidualConvBlock(height, width, spec.in_channels, spec.filters, rng)
    if spec.kind == BlockKind.CHANNEL_ATTENTION:
        return L.ChannelAttentionBlock(spec.in_channels, spec.reduction_ratio, rng)
    if spec.kind == BlockKind.SPATIAL_ATTENTION:
        return L.SpatialAttentionBlock(spec.in_channels, rng)
    raise ValueError(f"unknown block kind {spec.kind}")


class Network:
    """A concrete multimodal classifier built from an ArchGraph."""

    def __init__(self, graph: ArchGraph, num_classes: int, seed: int = 0):
        if num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        self.graph = graph
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        gh, gw = FUSION_GRID

        def build(specs, height, width):
            return [_make_block(s, height, width, rng) for s in specs]

        self.segments: dict[str, list] = {}
        for seg, branch in (("stem_a", graph.branch_a), ("stem_b", graph.branch_b),
                            ("stem_late", graph.branch_c)):
            h, w = STREAM_SHAPES[branch.stream]
            self.segments[seg] = build(branch.blocks, h, w)
        self.segments["post_fuse1"] = build(graph.post_fusion1, gh, gw)
        self.segments["trunk"] = build(graph.trunk, gh, gw)
        self.segments["post_trunk"] = build(graph.post_trunk, gh, gw)
        self.segments["post_fuse2"] = build(graph.post_fusion2, gh, gw)
        self.segments["tail"] = build(graph.tail, gh, gw)

        self.pool_a = L.AdaptiveAvgPool(gh, gw)
        self.pool_b = L.AdaptiveAvgPool(gh, gw)
        self.pool_c = L.AdaptiveAvgPool(gh, gw)
        self.gap = L.GlobalAvgPool()
        self.dense = L.Dense(graph.out_channels, num_classes, rng)
        self._cache_split1 = graph.fusion1_in[0]
        self._cache_split2 = graph.fusion2_in[0]
        # fixed input standardisation per fused-map row; identity until set
        self.input_mean = np.zeros(24)
        self.input_std = np.ones(24)

    # -- parameter access ---------------------------------------------------

    def parameters(self):
        """Yield (path, holder, key) for every parameter array, in a fixed order."""
        order = ("stem_a", "stem_b", "post_fuse1", "trunk", "post_trunk",
                 "stem_late", "post_fuse2", "tail")
        for seg in order:
            for i, block in enumerate(self.segments[seg]):
                for name, holder in block.param_items():
                    for key in holder.params:
                        yield f"{seg}.{i}.{name}.{key}", holder, key
        for key in self.dense.params:
            yield f"head.dense.{key}", self.dense, key

    def parameter_count(self, include_attention: bool = True) -> int:
        total = 0
        for path, holder, key in self.parameters():
            seg = path.split(".")[0]
            if not include_attention and seg != "head":
                idx = int(path.split(".")[1])
                spec_list = self._segment_specs(seg)
                if spec_list[idx].kind in ATTENTION_KINDS:
                    continue
            total += holder.params[key].size
        return total

    def _segment_specs(self, seg: str):
        g = self.graph
        return {
            "stem_a": g.branch_a.blocks, "stem_b": g.branch_b.blocks,
            "stem_late": g.branch_c.blocks, "post_fuse1": g.post_fusion1,
            "trunk": g.trunk, "post_trunk": g.post_trunk,
            "post_fuse2": g.post_fusion2, "tail": g.tail,
        }[seg]

    def zero_grads(self):
        for seg in self.segments.values():
            for block in seg:
                block.zero_grads()
        self.dense.zero_grads()

    def get_state(self) -> dict[str, np.ndarray]:
        return {path: holder.params[key].copy() for path, holder, key in self.parameters()}

    def set_state(self, state: dict[str, np.ndarray]):
        for path, holder, key in self.parameters():
            if path not in state:
                raise KeyError(f"checkpoint missing parameter {path}")
            value = np.asarray(state[path], dtype=np.float64)
            if value.shape != holder.params[key].shape:
                raise ShapeError(f"{path}: checkpoint shape {value.shape} != {holder.params[key].shape}")
            holder.params[key] = value.copy()

    # -- execution ----------------------------------------------------------

    def _check_streams(self, semg, acc, fused):
        shapes = {"semg": semg.shape[1:], "acc": acc.shape[1:], "fused": fused.shape[1:]}
        for name, got in shapes.items():
            if tuple(got) != STREAM_SHAPES[name]:
                raise ShapeError(f"{name} stream shape {got} != {STREAM_SHAPES[name]}")
        if not (semg.shape[0] == acc.shape[0] == fused.shape[0]):
            raise ShapeError("stream batch sizes differ")

    def set_input_scale(self, mean: np.ndarray, std: np.ndarray):
        """Standardise incoming feature maps row-wise (fit on training data)."""
        mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
        if mean.shape != (24,) or std.shape != (24,):
            raise ShapeError("input scale must hold one mean/std per fused-map row")
        self.input_mean = mean.copy()
        self.input_std = std.copy()

    def forward_logits(self, semg: np.ndarray, acc: np.ndarray, fused: np.ndarray) -> np.ndarray:
        self._check_streams(semg, acc, fused)
        m, s = self.input_mean, self.input_std
        inputs = {
            "semg": (semg - m[None, :6, None]) / s[None, :6, None],
            "acc": (acc - m[None, 6:, None]) / s[None, 6:, None],
            "fused": (fused - m[None, :, None]) / s[None, :, None],
        }

        def run(seg, x):
            for block in self.segments[seg]:
                x = block.forward(x)
            return x

        xa = run("stem_a", inputs[self.graph.branch_a.stream][..., None])
        xb = run("stem_b", inputs[self.graph.branch_b.stream][..., None])
        x = np.concatenate([self.pool_a.forward(xa), self.pool_b.forward(xb)], axis=3)
        x = run("post_fuse1", x)
        x = run("trunk", x)
        x = run("post_trunk", x)
        xc = run("stem_late", inputs[self.graph.branch_c.stream][..., None])
        x = np.concatenate([x, self.pool_c.forward(xc)], axis=3)
        x = run("post_fuse2", x)
        x = run("tail", x)
        return self.dense.forward(self.gap.forward(x))

    def forward(self, semg, acc, fused) -> np.ndarray:
        """Class probabilities, one row per sample."""
        return L.softmax(self.forward_logits(semg, acc, fused))

    def backward(self, dlogits: np.ndarray):
        def run_back(seg, dy):
            for block in reversed(self.segments[seg]):
                dy = block.backward(dy)
            return dy

        dy = self.gap.backward(self.dense.backward(dlogits))
        dy = run_back("tail", dy)
        dy = run_back("post_fuse2", dy)
        k = self._cache_split2
        d_trunk, d_c = dy[..., :k], dy[..., k:]
        run_back("stem_late", self.pool_c.backward(d_c))
        dy = run_back("post_trunk", d_trunk)
        dy = run_back("trunk", dy)
        dy = run_back("post_fuse1", dy)
        k = self._cache_split1
        d_a, d_b = dy[..., :k], dy[..., k:]
        run_back("stem_a", self.pool_a.backward(d_a))
        run_back("stem_b", self.pool_b.backward(d_b))


def build(graph: ArchGraph, num_classes: int, seed: int = 0) -> Network:
    """Construct a network with He-uniform weights and zero biases."""
    return Network(graph, num_classes, seed)
