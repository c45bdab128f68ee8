"""Four-stage sparse encoder and decoder with lateral skips and shared key indices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import BackboneSpec
from .sparse_core import KeyIndexCache, SparseTensor, build_inverse_rulebook
from .sparse_nn import (
    ConvWeights,
    NormParams,
    inverse_sparse_conv3d,
    linear,
    norm_relu,
    resblock,
    sparse_conv3d,
    submanifold_conv3d,
)


@dataclass
class BackboneState:
    outputs: list = field(default_factory=list)
    cache: KeyIndexCache = field(default_factory=KeyIndexCache)


def conv_weights(ws, prefix: str) -> ConvWeights:
    bias = ws[prefix + ".bias"] if prefix + ".bias" in ws else None
    return ConvWeights(ws[prefix + ".weight"], bias)


def norm_params(ws, prefix: str, spec: BackboneSpec, channels: int) -> NormParams:
    if not spec.use_norm:
        return NormParams(np.ones(channels), np.zeros(channels), np.zeros(channels),
                          np.ones(channels), eps=0.0)
    return NormParams(ws[prefix + ".scale"], ws[prefix + ".shift"],
                      ws[prefix + ".mean"], ws[prefix + ".var"])


def _resblock(x: SparseTensor, rb, ws, prefix: str, spec: BackboneSpec) -> SparseTensor:
    c = x.channels
    return resblock(
        x, rb,
        conv_weights(ws, prefix + ".conv1"), norm_params(ws, prefix + ".norm1", spec, c),
        conv_weights(ws, prefix + ".conv2"), norm_params(ws, prefix + ".norm2", spec, c),
    )


def encode(vfe_out: SparseTensor, spec: BackboneSpec, ws) -> BackboneState:
    if vfe_out.stride != 1:
        raise ValueError("encoder input must be at stride 1")
    state = BackboneState()
    x = vfe_out
    state.cache.record(x)
    for s, (width, depth) in enumerate(zip(spec.encoder_widths, spec.encoder_depths)):
        prefix = f"enc.{s}"
        w = conv_weights(ws, prefix + ".conv")
        if w.c_out != width:
            raise ValueError(f"{prefix}.conv has {w.c_out} output channels, expected {width}")
        if s == 0:
            x = submanifold_conv3d(x, state.cache.submanifold_rulebook(x), w)
        else:
            x = sparse_conv3d(x, state.cache.strided_rulebook(x), w)
            state.cache.record(x)
        x = norm_relu(x, norm_params(ws, prefix + ".norm", spec, width))
        rb = state.cache.submanifold_rulebook(x)
        for j in range(depth):
            x = _resblock(x, rb, ws, f"{prefix}.block.{j}", spec)
        state.outputs.append(x)
    return state


def decode(bottleneck: SparseTensor, state: BackboneState, spec: BackboneSpec, ws,
           per_scale: list | None = None) -> SparseTensor:
    """concat(skip) -> 1x1 fuse -> resblock -> inverse conv, from stride 8 back to stride 1.

    If ``per_scale`` is given, each stage's resblock output is appended to it (coarsest first).
    """
    n = len(spec.decoder_widths)
    deepest = state.outputs[-1]
    if not np.array_equal(bottleneck.coords, deepest.coords):
        raise ValueError("bottleneck coordinates differ from the encoder's deepest scale")
    x = bottleneck.replace_features(
        linear(bottleneck.features, ws["dec.adapter.weight"], ws["dec.adapter.bias"])
    )
    for s, width in enumerate(spec.decoder_widths):
        prefix = f"dec.{s}"
        skip = state.outputs[n - 1 - s]
        if x.stride != skip.stride or not np.array_equal(x.coords, skip.coords):
            raise ValueError(f"decoder stage {s}: coordinates differ from encoder skip")
        cat = np.concatenate([x.features, skip.features], axis=1)
        fused = np.maximum(linear(cat, ws[prefix + ".fuse.weight"], ws[prefix + ".fuse.bias"]), 0.0)
        x = x.replace_features(fused)
        x = _resblock(x, state.cache.submanifold_rulebook(x), ws, prefix + ".block", spec)
        if per_scale is not None:
            per_scale.append(x)
        if s + 1 < n:
            rb = build_inverse_rulebook(x, state.cache, x.stride // 2)
            x = inverse_sparse_conv3d(x, rb, conv_weights(ws, prefix + ".up"))
            x = norm_relu(x, norm_params(ws, prefix + ".up_norm", spec, x.channels))
    return x
