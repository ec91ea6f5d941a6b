"""Layer-level reference semantics on (C, H, W) integer tensors."""

from __future__ import annotations

import numpy as np

from ..codegen import split_weight_blob
from ..errors import CompileError
from ..graph_ir import INPUT
from . import kernels
from .fixed import (I8_MIN, activate, div_round, requantize, saturate,
                    shift_round, wrap32)


class ShapeError(CompileError, ValueError):
    pass


def same_padding(in_size, out_size, kernel, stride):
    """Leading padding of the ``out = ceil(in / stride)`` convention."""
    return max((out_size - 1) * stride + kernel - in_size, 0) // 2


def _as_chw(x):
    x = np.asarray(x, dtype=np.int64)
    if x.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) tensor, got shape {x.shape}")
    return x


def conv_accumulate(x, w, stride=1):
    """32-bit partial sums of a normal convolution with shared-MAC pairs."""
    x = _as_chw(x)
    w = np.ascontiguousarray(w, dtype=np.int64)
    if w.ndim != 4 or w.shape[1] != x.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"weights {w.shape} do not fit input {x.shape}")
    k = w.shape[2]
    _, h, wd = x.shape
    oh, ow = -(-h // stride), -(-wd // stride)
    acc = kernels.conv_accumulate(np.ascontiguousarray(x), w, stride,
                                  same_padding(h, oh, k, stride),
                                  same_padding(wd, ow, k, stride), oh, ow)
    return wrap32(acc)


def dw_accumulate(x, w, stride=1):
    x = _as_chw(x)
    w = np.ascontiguousarray(w, dtype=np.int64)
    if w.ndim != 3 or w.shape[0] != x.shape[0] or w.shape[1] != w.shape[2]:
        raise ShapeError(f"depthwise weights {w.shape} do not fit input {x.shape}")
    k = w.shape[1]
    _, h, wd = x.shape
    oh, ow = -(-h // stride), -(-wd // stride)
    acc = kernels.dw_accumulate(np.ascontiguousarray(x), w, stride,
                                same_padding(h, oh, k, stride),
                                same_padding(wd, ow, k, stride), oh, ow)
    return wrap32(acc)


def conv2d(x, w, b, stride=1, shift=0, act="none"):
    acc = wrap32(conv_accumulate(x, w, stride) + np.asarray(b, np.int64)[:, None, None])
    return activate(act, requantize(acc, shift))


def dwconv2d(x, w, b, stride=1, shift=0, act="none"):
    acc = wrap32(dw_accumulate(x, w, stride) + np.asarray(b, np.int64)[:, None, None])
    return activate(act, requantize(acc, shift))


def fully_connected(x, w, b, shift=0, act="none"):
    x = np.asarray(x, np.int64).reshape(-1, 1, 1)
    w = np.asarray(w, np.int64)
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"fc weights {w.shape} do not fit {x.shape[0]} inputs")
    out = conv2d(x, w.reshape(w.shape[0], -1, 1, 1), b, 1, shift, act)
    return out


def maxpool(x, kernel, stride):
    x = _as_chw(x)
    c, h, w = x.shape
    oh, ow = -(-h // stride), -(-w // stride)
    pt, pl = same_padding(h, oh, kernel, stride), same_padding(w, ow, kernel, stride)
    pb = max(0, (oh - 1) * stride + kernel - h - pt)
    pr = max(0, (ow - 1) * stride + kernel - w - pl)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)), constant_values=I8_MIN - 1)
    out = np.full((c, oh, ow), I8_MIN - 1, dtype=np.int64)
    for ky in range(kernel):
        for kx in range(kernel):
            out = np.maximum(out, xp[:, ky:ky + stride * (oh - 1) + 1:stride,
                                     kx:kx + stride * (ow - 1) + 1:stride])
    return out


def global_avgpool(x):
    x = _as_chw(x)
    c, h, w = x.shape
    return div_round(x.sum(axis=(1, 2)), h * w).reshape(c, 1, 1)


def eltwise_add(a, b, shift=0):
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeError(f"element-wise operands {a.shape} and {b.shape} differ")
    return saturate(shift_round(a + b, shift))


def channel_scale(x, v, shift=0):
    x = _as_chw(x)
    v = np.asarray(v, np.int64).reshape(-1, 1, 1)
    if v.shape[0] != x.shape[0]:
        raise ShapeError(f"scale vector of {v.shape[0]} for {x.shape[0]} channels")
    return saturate(shift_round(x * v, shift))


def upsample(x, factor):
    return np.repeat(np.repeat(_as_chw(x), factor, axis=1), factor, axis=2)


# --------------------------------------------------------------------------


def _weights(layer, weights):
    blob = weights[layer.id]
    if isinstance(blob, (bytes, bytearray, memoryview)):
        return split_weight_blob(layer, bytes(blob))
    w, b = blob
    return np.asarray(w, np.int64), np.asarray(b, np.int64)


def run_layer(layer, tensors, weights=None):
    """Output of one layer given the tensors it reads (keyed by tensor id)."""
    def get(t):
        try:
            return tensors[t]
        except KeyError:
            raise ShapeError(f"layer {layer.id}: tensor {t} not available") from None

    k = layer.kind
    if k in ("conv", "dwconv", "fc"):
        w, b = _weights(layer, weights)
        x = get(layer.src)
        if k == "conv":
            y = conv2d(x, w, b, layer.stride, layer.quant)
        elif k == "dwconv":
            y = dwconv2d(x, w, b, layer.stride, layer.quant)
        else:
            y = fully_connected(x, w, b, layer.quant)
    elif k == "maxpool":
        y = maxpool(get(layer.src), layer.kernel, layer.stride)
    elif k == "avgpool_global":
        y = global_avgpool(get(layer.src))
    elif k == "eltwise_add":
        y = eltwise_add(get(layer.src), get(layer.shortcut_src), layer.quant)
    elif k == "scale":
        y = channel_scale(get(layer.shortcut_src), get(layer.src), layer.quant)
    elif k == "concat":
        y = np.concatenate([get(s) for s in layer.concat_srcs], axis=0)
    elif k == "upsample":
        y = upsample(get(layer.src), layer.stride)
    elif k == "activation":
        y = get(layer.src)
    else:
        raise ShapeError(f"layer {layer.id}: unsupported kind {k!r}")
    y = activate(layer.activation, y)
    expect = (layer.out_c, layer.out_h, layer.out_w)
    if y.shape != expect:
        raise ShapeError(f"layer {layer.id}: produced {y.shape}, expected {expect}")
    return y


def reference_forward(graph, weights, x):
    """Run every layer in order; returns ``{tensor id: array}`` incl. the input."""
    x = np.asarray(x, np.int64).reshape(graph.input_c, graph.input_h, graph.input_w)
    tensors = {INPUT: x}
    for layer in graph.layers:
        tensors[layer.id] = run_layer(layer, tensors, weights)
    return tensors


def conv_reference(graph, group, tensors, weights):
    """Outputs of one fused group: its layers applied in group order.

    ``tensors`` must hold the group's external inputs.  Returns a dict with
    the output of every member layer.
    """
    local = dict(tensors)
    out = {}
    for m in group.layers:
        out[m] = local[m] = run_layer(graph.layers[m], local, weights)
    return out
