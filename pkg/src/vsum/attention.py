"""Subspace multi-head self-attention encoder over frame-feature sequences.

Each head projects the T x d input into its own d_n-dimensional subspace,
runs scaled dot-product self-attention there, and the per-head outputs are
concatenated and mixed back to width d. Layers stack plainly (no residuals,
no normalization, no positional encoding), so the encoder is permutation
equivariant over frames; temporal order enters the model only through the
recurrent branch.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeError


@dataclass
class HeadParams:
    """One attention head: subspace projection plus its QKV transforms."""

    proj: Tensor   # d x d_n
    wq: Tensor     # d_n x d_n
    wk: Tensor     # d_n x d_n
    wv: Tensor     # d_n x d_n

    @property
    def subspace_dim(self) -> int:
        return self.proj.shape[1]

    def tensors(self):
        return [self.proj, self.wq, self.wk, self.wv]


@dataclass
class LayerParams:
    heads: list[HeadParams]
    mix: Tensor    # (sum of d_n) x d

    def __post_init__(self):
        total = sum(h.subspace_dim for h in self.heads)
        if self.mix.shape[0] != total:
            raise ShapeError(
                f"mix matrix has {self.mix.shape[0]} rows but heads concatenate to {total}")

    @property
    def width(self) -> int:
        return self.mix.shape[1]

    def tensors(self):
        out = []
        for h in self.heads:
            out.extend(h.tensors())
        out.append(self.mix)
        return out


@dataclass
class EncoderParams:
    layers: list[LayerParams]
    d: int

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.width != self.d:
                raise ShapeError(f"layer {i} outputs width {layer.width}, expected {self.d}")
            for h in layer.heads:
                if h.proj.shape[0] != self.d:
                    raise ShapeError(
                        f"layer {i} head projection expects width {h.proj.shape[0]}, "
                        f"encoder is {self.d}")

    def tensors(self):
        out = []
        for layer in self.layers:
            out.extend(layer.tensors())
        return out


@dataclass
class AttentionMap:
    """Row-stochastic T x T frame-attention weights for one head of one layer."""

    weights: np.ndarray
    layer_index: int = 0
    head_index: int = 0


def init_head(d: int, d_n: int, rng: np.random.Generator, dtype=None) -> HeadParams:
    # variance-preserving draws keep dot-product logits O(1) for standardized
    # inputs, so attention rows are distinct from the first step; without a
    # residual path, near-uniform rows would collapse every frame to the
    # same output by the second layer
    return HeadParams(
        proj=dc.uniform_matrix(d, d_n, rng, dtype=dtype),
        wq=dc.uniform_matrix(d_n, d_n, rng, dtype=dtype),
        wk=dc.uniform_matrix(d_n, d_n, rng, dtype=dtype),
        wv=dc.uniform_matrix(d_n, d_n, rng, dtype=dtype),
    )


def init_layer(d: int, subspace_dims: list[int], rng: np.random.Generator,
               dtype=None) -> LayerParams:
    heads = [init_head(d, d_n, rng, dtype=dtype) for d_n in subspace_dims]
    return LayerParams(heads=heads, mix=dc.uniform_matrix(sum(subspace_dims), d, rng, dtype=dtype))


def init_encoder(d: int, subspace_dims: list[int], n_layers: int,
                 rng: np.random.Generator, dtype=None) -> EncoderParams:
    layers = [init_layer(d, subspace_dims, rng, dtype=dtype) for _ in range(n_layers)]
    return EncoderParams(layers=layers, d=d)


def single_head(x: Tensor, h: HeadParams, scaled: bool = True,
                layer_index: int = 0, head_index: int = 0) -> tuple[Tensor, AttentionMap]:
    """Self-attention of one head in its subspace.

    Projects x into the subspace, forms query/key/value, softmaxes the
    query-key products row-wise (divided by sqrt(d_n) when ``scaled``), and
    averages values under those weights. Returns the attended T x d_n output
    and the attention map (a detached copy of the weights).
    """
    if x.shape[1] != h.proj.shape[0]:
        raise ShapeError(
            f"input width {x.shape} does not match head projection {h.proj.shape}")
    xs = dc.matmul(x, h.proj)
    q = dc.matmul(xs, h.wq)
    k = dc.matmul(xs, h.wk)
    v = dc.matmul(xs, h.wv)
    logits = dc.matmul(q, dc.transpose(k))
    if scaled:
        logits = dc.scale(logits, 1.0 / math.sqrt(h.subspace_dim))
    weights = dc.softmax_rows(logits)
    out = dc.matmul(weights, v)
    amap = AttentionMap(weights=weights.data.copy(),
                        layer_index=layer_index, head_index=head_index)
    return out, amap


def multi_head_layer(x: Tensor, p: LayerParams, scaled: bool = True,
                     layer_index: int = 0) -> tuple[Tensor, list[AttentionMap]]:
    """Run every head, concatenate their outputs, and mix back to width d."""
    if x.shape[1] != p.heads[0].proj.shape[0]:
        raise ShapeError(f"input width {x.shape} does not match layer of width {p.width}")
    outs = []
    maps = []
    for n, head in enumerate(p.heads):
        o, amap = single_head(x, head, scaled=scaled, layer_index=layer_index, head_index=n)
        outs.append(o)
        maps.append(amap)
    r = dc.matmul(dc.concat_cols(outs), p.mix)
    return r, maps


def encoder_forward(x: Tensor, e: EncoderParams,
                    scaled: bool = True) -> tuple[Tensor, list[list[AttentionMap]]]:
    """Stack the layers: the attended output of each feeds the next.

    Returns the final T x d feature sequence and the per-layer attention
    maps for inspection export.
    """
    if not e.layers:
        raise ShapeError("encoder needs at least one layer")
    h = x
    all_maps = []
    for li, layer in enumerate(e.layers):
        h, maps = multi_head_layer(h, layer, scaled=scaled, layer_index=li)
        all_maps.append(maps)
    return h, all_maps


def export_attention_maps(all_maps: list[list[AttentionMap]], out_dir) -> Path:
    """Write one CSV per (layer, head) plus an index JSON; returns the index path.

    CSVs are row-major T x T with full double precision so row sums survive
    the roundtrip.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for maps in all_maps:
        for amap in maps:
            name = f"layer{amap.layer_index:02d}_head{amap.head_index:02d}.csv"
            with open(out_dir / name, "w", newline="") as fh:
                writer = csv.writer(fh)
                for row in amap.weights:
                    writer.writerow([f"{v:.17g}" for v in row])
            entries.append({"layer": amap.layer_index, "head": amap.head_index, "file": name})
    index = {
        "n_layers": len(all_maps),
        "n_heads": len(all_maps[0]) if all_maps else 0,
        "t": int(all_maps[0][0].weights.shape[0]) if all_maps and all_maps[0] else 0,
        "maps": entries,
    }
    index_path = out_dir / "index.json"
    with open(index_path, "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return index_path
