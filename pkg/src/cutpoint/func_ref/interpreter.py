"""Execute a packed image instruction by instruction.

The interpreter sees only the image: instruction words, weight and input
sections, and the on-chip buffer sizes from the header.  It keeps a flat
DRAM byte array and three on-chip buffers, moves tensors exactly where the
instructions say, and computes with the reference ops.  Running it and
comparing against :func:`~cutpoint.func_ref.ops.reference_forward` checks
codegen and allocation together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..allocator import OFFCHIP
from ..codegen import unpack_image
from ..errors import CompileError
from . import ops
from .fixed import activate, saturate, shift_round


class ExecutionError(CompileError, RuntimeError):
    pass


@dataclass(frozen=True)
class ExecutionResult:
    outputs: tuple          # main output of every instruction
    terminals: tuple        # (instruction index, array) of terminal outputs
    dram: bytes


class _Machine:
    def __init__(self, image):
        lay = image.layout
        self.dram = bytearray(max(lay.feature_base + lay.feature_bytes,
                                  lay.input_offset + lay.input_bytes))
        self.dram[lay.weight_offset:lay.weight_offset + lay.weight_bytes] = image.weights
        self.dram[lay.input_offset:lay.input_offset + lay.input_bytes] = image.input
        self.buffers = [bytearray(n) for n in image.buffer_bytes]

    def _mem(self, where):
        return self.dram if where == OFFCHIP else self.buffers[where]

    def read(self, where, addr, shape):
        mem = self._mem(where)
        n = int(np.prod(shape))
        if addr < 0 or addr + n > len(mem):
            raise ExecutionError(f"read of {n} bytes at {addr} outside "
                                 f"{'DRAM' if where == OFFCHIP else f'buffer {where}'}")
        return np.frombuffer(bytes(mem[addr:addr + n]), dtype=np.int8) \
            .astype(np.int64).reshape(shape)

    def write(self, where, addr, x):
        mem = self._mem(where)
        data = np.asarray(x).astype(np.int8).tobytes()
        if addr < 0 or addr + len(data) > len(mem):
            raise ExecutionError(f"write of {len(data)} bytes at {addr} outside "
                                 f"{'DRAM' if where == OFFCHIP else f'buffer {where}'}")
        mem[addr:addr + len(data)] = data

    def operand(self, alloc, addr, load, shape):
        if alloc == OFFCHIP:
            return self.read(OFFCHIP, addr, shape)
        if load:
            x = self.read(OFFCHIP, addr, shape)
            self.write(alloc, 0, x)
            return x
        return self.read(alloc, addr, shape)

    def weights(self, ins):
        k2 = ins.kernel * ins.kernel
        if ins.kind == "conv":
            n, shape = ins.out_c * ins.in_c * k2, (ins.out_c, ins.in_c, ins.kernel, ins.kernel)
        elif ins.kind == "dwconv":
            n, shape = ins.out_c * k2, (ins.out_c, ins.kernel, ins.kernel)
        else:
            n = ins.out_c * ins.in_c * ins.in_w * ins.in_h
            shape = (ins.out_c, ins.in_c * ins.in_w * ins.in_h)
        w = self.read(OFFCHIP, ins.weight_addr, (n,)).reshape(shape)
        raw = bytes(self.dram[ins.weight_addr + n:ins.weight_addr + n + 4 * ins.out_c])
        b = np.frombuffer(raw, dtype="<i4").astype(np.int64)
        return w, b


def _execute(m, ins):
    """Run one instruction; returns its main output."""
    if ins.redirect:
        return None
    in_shape = (ins.in_c, ins.in_h, ins.in_w)
    x = m.operand(ins.alloc_in, ins.in_addr, ins.load_in, in_shape)

    def aux(shape):
        return m.operand(ins.alloc_aux, ins.aux_addr, ins.load_aux, shape)

    k = ins.kind
    if k in ("conv", "dwconv", "fc"):
        w, b = m.weights(ins)
        if k == "conv":
            y = ops.conv2d(x, w, b, ins.stride, ins.conv_shift)
        elif k == "dwconv":
            y = ops.dwconv2d(x, w, b, ins.stride, ins.conv_shift)
        else:
            y = ops.fully_connected(x, w, b, ins.conv_shift)
        y = activate(ins.act_conv, y)
        if ins.se_role == "se_gap":
            m.write(ins.alloc_aux, ins.aux_addr, ops.global_avgpool(y))
    elif k == "scale":
        y = activate(ins.act_conv, ops.channel_scale(x, aux((ins.in_c, 1, 1)),
                                                      ins.conv_shift))
    elif k == "concat":
        parts = [x]
        if ins.out_c > ins.in_c:
            parts.append(aux((ins.out_c - ins.in_c, ins.in_h, ins.in_w)))
        if ins.concat_swap:
            parts.reverse()
        y = activate(ins.act_conv, np.concatenate(parts, axis=0))
    elif k == "avgpool_global":
        y = activate(ins.act_conv, ops.global_avgpool(x))
    elif k == "activation":
        y = activate(ins.act_conv, x)
    elif k in ("maxpool", "eltwise_add", "upsample"):
        y = x
    else:
        raise ExecutionError(f"cannot execute {k!r}")

    if ins.pool:
        y = activate(ins.act_pool, ops.maxpool(y, ins.pool_k, ins.pool_s))
    if ins.eltwise:
        y = activate(ins.act_elt,
                     saturate(shift_round(y + aux(y.shape), ins.elt_shift)))
    if ins.upsample:
        y = activate(ins.act_up, ops.upsample(y, ins.up_factor))

    if y.shape != (ins.out_c, ins.out_h, ins.out_w):
        raise ExecutionError(f"{k} produced {y.shape}, instruction says "
                             f"{(ins.out_c, ins.out_h, ins.out_w)}")
    if ins.alloc_out == OFFCHIP:
        m.write(OFFCHIP, ins.out_addr, y)
    elif ins.spill:
        m.write(ins.alloc_out, 0, y)
        m.write(OFFCHIP, ins.out_addr, y)
    else:
        m.write(ins.alloc_out, ins.out_addr, y)
    return y


def run_image(data):
    """Execute a packed image (bytes or an unpacked :class:`Image`)."""
    image = unpack_image(data) if isinstance(data, (bytes, bytearray)) else data
    if image.q_a != 8:
        raise ExecutionError(f"the interpreter runs 8-bit images, got {image.q_a}-bit")
    m = _Machine(image)
    outs, terms = [], []
    for i, ins in enumerate(image.instructions):
        y = _execute(m, ins)
        if y is None:       # redirected concat: its data is already in DRAM
            shape = (ins.out_c, ins.out_h, ins.out_w)
            y = m.read(OFFCHIP, ins.out_addr, shape)
        outs.append(y)
        if ins.terminal:
            addr = ins.out_addr
            terms.append((i, m.read(OFFCHIP, addr, y.shape)))
    return ExecutionResult(tuple(outs), tuple(terms), bytes(m.dram))
