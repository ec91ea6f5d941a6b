"""Instruction emission and deployable image packing.

Every node group becomes one instruction of eleven little-endian 32-bit words.
The bit layout lives in :data:`FIELDS` (and in ``docs/image_format.md``);
:func:`encode_instruction` and :func:`decode_instruction` are driven by that
table, so the two can never drift apart.

DRAM addresses refer to a flat byte space that starts with the image itself:
header, instruction section, weight section, input section, then the feature
region that holds every tensor written off-chip.  Feature tensors are stored
channel-planar (C, H, W), which makes a channel concat a plain concatenation
of its sources.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .allocator import OFFCHIP, redirected_concats, se_vectors
from .errors import CodegenError
from .graph_ir import ACTIVATIONS, INPUT, KINDS, SE_ROLES
from .hw import HwConfig
from .policy import FRAME, ROW

WORDS = 11
INSTR_BYTES = 4 * WORDS
ALIGN = 64
MAGIC = b"CPIM"
FORMAT_VERSION = 1

OPCODES = {kind: i + 1 for i, kind in enumerate(KINDS)}
_KIND_OF = {v: k for k, v in OPCODES.items()}
_SCHEME_CODE = {ROW: 0, FRAME: 1}

# (word, low bit, width, field name, codec)
FIELDS = (
    (0, 0, 8, "kind", "opcode"),
    (0, 8, 8, "kernel", "int"),
    (0, 16, 4, "stride", "int"),
    (0, 20, 1, "scheme", "scheme"),
    (1, 0, 16, "in_w", "int"),
    (1, 16, 16, "in_h", "int"),
    (2, 0, 16, "out_w", "int"),
    (2, 16, 16, "out_h", "int"),
    (3, 0, 16, "in_c", "int"),
    (3, 16, 16, "out_c", "int"),
    (4, 0, 2, "alloc_in", "int"),
    (4, 2, 2, "alloc_out", "int"),
    (4, 4, 2, "alloc_aux", "int"),
    (4, 6, 1, "dw", "bool"),
    (4, 7, 1, "pool", "bool"),
    (4, 8, 1, "eltwise", "bool"),
    (4, 9, 1, "upsample", "bool"),
    (4, 10, 3, "se_role", "se_role"),
    (4, 13, 1, "load_in", "bool"),
    (4, 14, 1, "load_aux", "bool"),
    (4, 15, 1, "spill", "bool"),
    (4, 16, 1, "redirect", "bool"),
    (4, 17, 1, "concat_swap", "bool"),
    (5, 0, 32, "weight_addr", "int"),
    (6, 0, 32, "in_addr", "int"),
    (7, 0, 32, "out_addr", "int"),
    (8, 0, 32, "aux_addr", "int"),
    (9, 0, 3, "act_conv", "act"),
    (9, 3, 3, "act_pool", "act"),
    (9, 6, 3, "act_elt", "act"),
    (9, 9, 3, "act_up", "act"),
    (9, 12, 5, "conv_shift", "int"),
    (9, 17, 5, "elt_shift", "int"),
    (9, 22, 1, "batchnorm", "bool"),
    (10, 0, 4, "pool_k", "int"),
    (10, 4, 4, "pool_s", "int"),
    (10, 8, 4, "up_factor", "int"),
    (10, 12, 1, "terminal", "bool"),
)

RESERVED_MASKS = tuple(
    0xFFFFFFFF & ~sum(((1 << w) - 1) << lo for word, lo, w, _, _ in FIELDS if word == i)
    for i in range(WORDS))


@dataclass(frozen=True)
class Instruction:
    """Decoded form of one 11-word instruction.

    ``aux`` is the group's second operand: the shortcut of an element-wise
    add, the channel vector of a scale, the pooled side output of a
    squeeze branch, or the long-path source of a concat.  When an on-chip
    operand is loaded from (or spilled to) DRAM its address field carries the
    DRAM address and the on-chip slot starts at offset 0.
    """
    kind: str
    kernel: int = 1
    stride: int = 1
    scheme: str = FRAME
    in_w: int = 0
    in_h: int = 0
    out_w: int = 0
    out_h: int = 0
    in_c: int = 0
    out_c: int = 0
    alloc_in: int = OFFCHIP
    alloc_out: int = OFFCHIP
    alloc_aux: int = OFFCHIP
    dw: bool = False
    pool: bool = False
    eltwise: bool = False
    upsample: bool = False
    se_role: str = "none"
    load_in: bool = False
    load_aux: bool = False
    spill: bool = False
    redirect: bool = False
    concat_swap: bool = False
    weight_addr: int = 0
    in_addr: int = 0
    out_addr: int = 0
    aux_addr: int = 0
    act_conv: str = "none"
    act_pool: str = "none"
    act_elt: str = "none"
    act_up: str = "none"
    conv_shift: int = 0
    elt_shift: int = 0
    batchnorm: bool = False
    pool_k: int = 0
    pool_s: int = 0
    up_factor: int = 0
    terminal: bool = False

    def encode(self):
        return encode_instruction(self)

    def to_bytes(self):
        return struct.pack(f"<{WORDS}I", *self.encode())


def _to_code(codec, value, name):
    if codec == "opcode":
        if value not in OPCODES:
            raise CodegenError(f"unknown kind {value!r}")
        return OPCODES[value]
    if codec == "scheme":
        if value not in _SCHEME_CODE:
            raise CodegenError(f"unknown scheme {value!r}")
        return _SCHEME_CODE[value]
    if codec == "se_role":
        if value not in SE_ROLES:
            raise CodegenError(f"unknown squeeze role {value!r}")
        return SE_ROLES.index(value)
    if codec == "act":
        if value not in ACTIVATIONS:
            raise CodegenError(f"unknown activation {value!r}")
        return ACTIVATIONS.index(value)
    if codec == "bool":
        return int(bool(value))
    if isinstance(value, bool) or not isinstance(value, int):
        raise CodegenError(f"field {name} must be an integer, got {value!r}")
    return value


def _from_code(codec, code, name):
    if codec == "opcode":
        if code not in _KIND_OF:
            raise CodegenError(f"bad opcode {code}")
        return _KIND_OF[code]
    if codec == "scheme":
        return ROW if code == 0 else FRAME
    if codec == "se_role":
        if code >= len(SE_ROLES):
            raise CodegenError(f"bad squeeze role code {code}")
        return SE_ROLES[code]
    if codec == "act":
        if code >= len(ACTIVATIONS):
            raise CodegenError(f"bad activation code {code}")
        return ACTIVATIONS[code]
    if codec == "bool":
        return bool(code)
    return code


def encode_instruction(instr):
    """Pack an :class:`Instruction` into a tuple of 11 unsigned 32-bit words."""
    words = [0] * WORDS
    for word, lo, width, name, codec in FIELDS:
        code = _to_code(codec, getattr(instr, name), name)
        if not 0 <= code < (1 << width):
            raise CodegenError(f"field {name}={code} does not fit in {width} bits")
        words[word] |= code << lo
    return tuple(words)


def decode_instruction(words):
    """Inverse of :func:`encode_instruction`; rejects set reserved bits."""
    words = tuple(words)
    if len(words) != WORDS:
        raise CodegenError(f"an instruction has {WORDS} words, got {len(words)}")
    for i, w in enumerate(words):
        if not 0 <= w <= 0xFFFFFFFF:
            raise CodegenError(f"word {i} is not a 32-bit value")
        if w & RESERVED_MASKS[i]:
            raise CodegenError(f"reserved bits set in word {i}: {w & RESERVED_MASKS[i]:#x}")
    values = {}
    for word, lo, width, name, codec in FIELDS:
        values[name] = _from_code(codec, (words[word] >> lo) & ((1 << width) - 1), name)
    return Instruction(**values)


# --------------------------------------------------------------------------
# DRAM layout


def _align(n, a=ALIGN):
    return -(-n // a) * a


@dataclass(frozen=True)
class DramLayout:
    instr_offset: int
    instr_bytes: int
    weight_offset: int
    weight_bytes: int
    input_offset: int
    input_bytes: int
    feature_base: int
    feature_bytes: int
    weight_addr: dict = field(default_factory=dict)    # layer -> byte address
    tensor_addr: dict = field(default_factory=dict)    # tensor -> byte address

    @property
    def image_bytes(self):
        return self.input_offset + self.input_bytes

    @property
    def end(self):
        return self.feature_base + self.feature_bytes


def _offchip_tensors(plan, assignment, redirected, vectors):
    graph = plan.graph
    out = set()
    for gid, a in enumerate(assignment.groups):
        io = plan.ios[gid]
        if gid in redirected:
            out.add(io.out)
            out.update(io.concat_in)
        elif (not a.out.onchip or a.spill) and io.out not in vectors:
            out.add(io.out)
    out.update(graph.terminal_outputs())
    return out


def plan_layout(plan, assignment, hw=None):
    """Byte addresses of weights, input and every off-chip feature tensor."""
    hw = hw or HwConfig()
    graph = plan.graph
    q = hw.q_a
    schemes = [a.scheme for a in assignment.groups]
    redirected = redirected_concats(plan, schemes)
    vectors = se_vectors(plan)
    n = len(plan.groups)

    instr_bytes = n * INSTR_BYTES
    weight_offset = _align(ALIGN + instr_bytes)
    weight_addr = {}
    cursor = weight_offset
    for layer in graph.layers:
        if layer.is_conv:
            weight_addr[layer.id] = cursor
            cursor += layer.weight_bytes(q)
    weight_bytes = cursor - weight_offset
    input_offset = _align(cursor)
    input_bytes = graph.tensor_bytes(INPUT, q) if graph.layers else 0
    feature_base = _align(input_offset + input_bytes)

    # aliases: a route shares its source's region; the sources of a gathering
    # concat live inside the concat's region
    alias = {}
    for gid in sorted(redirected):
        io = plan.ios[gid]
        if len(io.concat_in) == 1:
            alias[io.out] = (io.concat_in[0], 0)
            continue
        prefix = 0
        for s in io.concat_in:
            if s in alias or s == INPUT:
                raise CodegenError(f"tensor {s} cannot be placed inside concat "
                                   f"{io.out}: it already has a fixed address")
            alias[s] = (io.out, prefix)
            prefix += graph.tensor_bytes(s, q)

    def root(t):
        off = 0
        seen = set()
        while t in alias:
            if t in seen:
                raise CodegenError(f"address aliases of tensor {t} form a cycle")
            seen.add(t)
            t, o = alias[t]
            off += o
        return t, off

    needed = _offchip_tensors(plan, assignment, redirected, vectors)
    roots = sorted({root(t)[0] for t in needed} - {INPUT})
    root_addr = {INPUT: input_offset}
    cursor = feature_base
    for t in roots:
        root_addr[t] = cursor
        cursor = _align(cursor + graph.tensor_bytes(t, q))
    tensor_addr = {}
    for t in sorted(needed | {INPUT}):
        r, off = root(t)
        tensor_addr[t] = root_addr[r] + off
    return DramLayout(ALIGN, instr_bytes, weight_offset, weight_bytes,
                      input_offset, input_bytes, feature_base,
                      cursor - feature_base, weight_addr, tensor_addr)


# --------------------------------------------------------------------------
# emission


@dataclass(frozen=True)
class Program:
    instructions: tuple
    layout: DramLayout
    buffer_bytes: tuple
    q_a: int = 8

    def __len__(self):
        return len(self.instructions)


def _activation_slots(graph, members):
    """Per-stage activations; ``activation`` layers fold into the stage before."""
    slots = {"conv": "none", "pool": "none", "elt": "none", "up": "none"}
    stage = "conv"
    stage_of = {"maxpool": "pool", "eltwise_add": "elt", "upsample": "up"}
    for m in members:
        layer = graph.layers[m]
        if layer.kind == "avgpool_global" and m != members[0]:
            if layer.activation != "none":
                raise CodegenError(f"layer {m}: squeeze side output cannot "
                                   "carry an activation")
            continue
        if layer.kind in stage_of:
            stage = stage_of[layer.kind]
        act = layer.activation
        if act == "none":
            continue
        if slots[stage] != "none":
            raise CodegenError(f"layer {m}: two activations in one fused stage")
        slots[stage] = act
    return slots


def emit_instructions(plan, policy, assignment, hw=None, dram_bytes=None):
    """One instruction per node group, in execution order.

    Raises :class:`CodegenError` when the image plus the feature region do
    not fit in ``dram_bytes`` (default ``hw.dram_bytes``) or in the 32-bit
    address fields.
    """
    hw = hw or HwConfig()
    dram_bytes = hw.dram_bytes if dram_bytes is None else dram_bytes
    graph = plan.graph
    q = hw.q_a
    schemes = policy.group_schemes(plan)
    if len(assignment.groups) != len(plan.groups):
        raise CodegenError("assignment does not cover every group")
    for gid, a in enumerate(assignment.groups):
        if a.scheme != schemes[gid]:
            raise CodegenError(f"group {gid}: assignment scheme {a.scheme} "
                               f"differs from policy {schemes[gid]}")
    layout = plan_layout(plan, assignment, hw)
    if layout.end > dram_bytes or layout.end > 1 << 32:
        raise CodegenError(f"address overflow: image and features need "
                           f"{layout.end} bytes, DRAM has {dram_bytes}")
    redirected = redirected_concats(plan, schemes)
    terminals = set(graph.terminal_outputs())
    addr = layout.tensor_addr

    def dram(t):
        if t not in addr:
            raise CodegenError(f"tensor {t} is read from DRAM but never written there")
        return addr[t]

    def operand(t, slot, loads):
        """(alloc, address, loaded) of one input operand."""
        if slot is None or not slot.onchip:
            return OFFCHIP, dram(t), False
        if t in loads:
            if slot.offset:
                raise CodegenError(f"tensor {t} is loaded to a nonzero offset")
            return slot.buffer, dram(t), True
        return slot.buffer, slot.offset, False

    instrs = []
    for gid, (group, io, a) in enumerate(zip(plan.groups, plan.ios, assignment.groups)):
        head = graph.layers[io.head]
        last = graph.layers[io.out]
        acts = _activation_slots(graph, group.layers)
        pool = graph.layers[io.pool] if io.pool is not None else None
        up = graph.layers[io.upsample] if io.upsample is not None else None
        elt = graph.layers[io.eltwise] if io.eltwise is not None else None
        fields = dict(
            kind=head.kind, kernel=head.kernel, stride=head.stride,
            scheme=a.scheme, in_w=head.in_w, in_h=head.in_h, in_c=head.in_c,
            out_w=last.out_w, out_h=last.out_h, out_c=last.out_c,
            dw=head.kind == "dwconv", pool=pool is not None,
            eltwise=elt is not None, upsample=up is not None,
            se_role=group.se_role, terminal=io.out in terminals,
            act_conv=acts["conv"], act_pool=acts["pool"], act_elt=acts["elt"],
            act_up=acts["up"], conv_shift=head.quant,
            elt_shift=elt.quant if elt is not None else 0,
            batchnorm=head.batchnorm_folded,
            pool_k=pool.kernel if pool else 0, pool_s=pool.stride if pool else 0,
            up_factor=up.stride if up else 0,
            weight_addr=layout.weight_addr.get(head.id, 0))
        if head.kind == "upsample":
            fields.update(upsample=True, up_factor=head.stride)
        if head.kind == "maxpool":
            fields.update(pool=True, pool_k=head.kernel, pool_s=head.stride)
        if head.kind == "eltwise_add":
            fields.update(eltwise=True, elt_shift=head.quant, conv_shift=0)

        if gid in redirected:
            a_out = dram(io.out)
            fields.update(redirect=True, alloc_in=OFFCHIP, alloc_out=OFFCHIP,
                          alloc_aux=OFFCHIP, in_addr=a_out, out_addr=a_out)
            instrs.append(Instruction(**fields))
            continue

        # main operand and auxiliary operand
        if head.kind == "concat":
            adjacent = [t for t in io.concat_in if t not in io.long_path_in]
            if len(adjacent) != 1 or len(io.long_path_in) > 1:
                raise CodegenError(f"layer {head.id}: on-chip concat needs one "
                                   "adjacent and at most one long-path source")
            main = adjacent[0]
            aux = io.long_path_in[0] if io.long_path_in else None
            fields["concat_swap"] = io.concat_in[0] != main
            fields["in_c"] = graph.shape(main)[2]
            aux_slot = None
        else:
            main = io.main_in
            aux, aux_slot = None, None
            if io.shortcut_in is not None:
                aux, aux_slot = io.shortcut_in, a.shortcut
            elif io.vector_in is not None:
                aux, aux_slot = io.vector_in, a.vector
        if main is not None:
            fields["alloc_in"], fields["in_addr"], fields["load_in"] = \
                operand(main, a.inp, a.loads)
        if aux is not None:
            fields["alloc_aux"], fields["aux_addr"], fields["load_aux"] = \
                operand(aux, aux_slot, a.loads)
        elif a.side is not None:
            fields["alloc_aux"], fields["aux_addr"] = a.side.buffer, a.side.offset

        if a.out.onchip:
            fields["alloc_out"] = a.out.buffer
            if a.spill:
                if a.out.offset:
                    raise CodegenError(f"layer {io.out}: spilled output at a "
                                       "nonzero offset")
                fields.update(spill=True, out_addr=dram(io.out))
            else:
                fields["out_addr"] = a.out.offset
        else:
            fields.update(alloc_out=OFFCHIP, out_addr=dram(io.out))
        instrs.append(Instruction(**fields))
    return Program(tuple(instrs), layout, assignment.peaks(), q)


# --------------------------------------------------------------------------
# image


HEADER = struct.Struct("<4sHH12IB3xI")
assert HEADER.size == ALIGN


@dataclass(frozen=True)
class Image:
    version: int
    q_a: int
    instructions: tuple
    weights: bytes
    input: bytes
    layout: DramLayout
    buffer_bytes: tuple


def pack_image(program, weights, input_bytes):
    """Serialize a program with its weights and input into one byte stream.

    ``weights`` maps each weighted layer id to its blob (see
    :func:`weight_blob`); ``input_bytes`` is the channel-planar network
    input.
    """
    lay = program.layout
    if set(weights) != set(lay.weight_addr):
        missing = sorted(set(lay.weight_addr) - set(weights))
        extra = sorted(set(weights) - set(lay.weight_addr))
        raise CodegenError(f"weight blobs do not match the graph "
                           f"(missing {missing}, unexpected {extra})")
    body = bytearray(lay.image_bytes)
    for i, ins in enumerate(program.instructions):
        o = lay.instr_offset + i * INSTR_BYTES
        body[o:o + INSTR_BYTES] = ins.to_bytes()
    ordered = sorted(lay.weight_addr.items(), key=lambda kv: kv[1])
    for k, (layer, at) in enumerate(ordered):
        end = ordered[k + 1][1] if k + 1 < len(ordered) else lay.weight_offset + lay.weight_bytes
        blob = bytes(weights[layer])
        if len(blob) != end - at:
            raise CodegenError(f"layer {layer}: weight blob is {len(blob)} bytes, "
                               f"expected {end - at}")
        body[at:end] = blob
    input_bytes = bytes(input_bytes)
    if len(input_bytes) != lay.input_bytes:
        raise CodegenError(f"input is {len(input_bytes)} bytes, expected {lay.input_bytes}")
    body[lay.input_offset:lay.input_offset + lay.input_bytes] = input_bytes
    payload = bytes(body[ALIGN:])
    bufs = tuple(program.buffer_bytes) + (0,) * (3 - len(program.buffer_bytes))
    header = HEADER.pack(MAGIC, FORMAT_VERSION, WORDS, len(program.instructions),
                         lay.instr_offset, lay.weight_offset, lay.weight_bytes,
                         lay.input_offset, lay.input_bytes, lay.feature_base,
                         lay.feature_bytes, bufs[0], bufs[1], bufs[2],
                         lay.image_bytes, program.q_a, zlib.crc32(payload))
    return header + payload


def unpack_image(data):
    """Parse and verify an image produced by :func:`pack_image`."""
    data = bytes(data)
    if len(data) < ALIGN:
        raise CodegenError("image shorter than its header")
    (magic, version, words, n, instr_off, w_off, w_bytes, in_off, in_bytes,
     f_base, f_bytes, b0, b1, b2, total, q_a, crc) = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CodegenError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CodegenError(f"unsupported image version {version}")
    if words != WORDS:
        raise CodegenError(f"unsupported instruction width {words}")
    if total != len(data):
        raise CodegenError(f"image is {len(data)} bytes, header says {total}")
    if zlib.crc32(data[ALIGN:]) != crc:
        raise CodegenError("image checksum mismatch")
    if instr_off + n * INSTR_BYTES > w_off or w_off + w_bytes > in_off \
            or in_off + in_bytes != total:
        raise CodegenError("inconsistent section offsets")
    instrs = []
    for i in range(n):
        ws = struct.unpack_from(f"<{WORDS}I", data, instr_off + i * INSTR_BYTES)
        instrs.append(decode_instruction(ws))
    layout = DramLayout(instr_off, n * INSTR_BYTES, w_off, w_bytes, in_off,
                        in_bytes, f_base, f_bytes)
    return Image(version, q_a, tuple(instrs), data[w_off:w_off + w_bytes],
                 data[in_off:in_off + in_bytes], layout, (b0, b1, b2))


# --------------------------------------------------------------------------
# weights


def weight_blob(layer, weights, bias, q_a=8):
    """Serialize integer weights and int32 biases of one layer.

    Weights are stored in (out_c, in_c, K, K) order for a convolution,
    (C, K, K) for a depthwise convolution and (out_c, in_features) for a
    fully connected layer, at ``q_a`` bits each, followed by one
    little-endian int32 bias per output channel.
    """
    dtype = {8: "<i1", 16: "<i2"}.get(q_a)
    if dtype is None:
        raise CodegenError(f"no weight encoding for {q_a}-bit weights")
    w = np.asarray(weights).reshape(-1)
    b = np.asarray(bias).reshape(-1)
    if w.size != layer.weight_params or b.size != layer.out_c:
        raise CodegenError(f"layer {layer.id}: expected {layer.weight_params} "
                           f"weights and {layer.out_c} biases")
    return w.astype(dtype).tobytes() + b.astype("<i4").tobytes()


def split_weight_blob(layer, blob, q_a=8):
    """Inverse of :func:`weight_blob`: ``(weights, bias)`` as int64 arrays."""
    dtype = {8: "<i1", 16: "<i2"}[q_a]
    n = layer.weight_params * q_a // 8
    if len(blob) != n + 4 * layer.out_c:
        raise CodegenError(f"layer {layer.id}: weight blob has the wrong size")
    w = np.frombuffer(blob[:n], dtype=dtype).astype(np.int64)
    b = np.frombuffer(blob[n:], dtype="<i4").astype(np.int64)
    k = layer.kernel
    if layer.kind == "conv":
        w = w.reshape(layer.out_c, layer.in_c, k, k)
    elif layer.kind == "dwconv":
        w = w.reshape(layer.out_c, k, k)
    else:
        w = w.reshape(layer.out_c, -1)
    return w, b


def synthesize_weights(graph, q_a=8, seed=0, magnitude=4):
    """Deterministic small random weights for every weighted layer."""
    rng = np.random.default_rng(seed)
    out = {}
    for layer in graph.layers:
        if layer.is_conv:
            w = rng.integers(-magnitude, magnitude, layer.weight_params)
            b = rng.integers(-magnitude * 4, magnitude * 4, layer.out_c)
            out[layer.id] = weight_blob(layer, w, b, q_a)
    return out


def synthesize_input(graph, q_a=8, seed=0):
    if not graph.layers:
        return b""
    rng = np.random.default_rng(seed + 1)
    n = graph.input_w * graph.input_h * graph.input_c
    dtype = {8: "<i1", 16: "<i2"}[q_a]
    return rng.integers(-64, 64, n).astype(dtype).tobytes()


def instruction_listing(program):
    """Human-readable listing, one instruction per line."""
    lines = []
    names = [f.name for f in dc_fields(Instruction)]
    for i, ins in enumerate(program.instructions):
        words = " ".join(f"{w:08x}" for w in ins.encode())
        parts = [f"{n}={getattr(ins, n)}" for n in names
                 if getattr(ins, n) != getattr(Instruction, n, None)]
        lines.append(f"{i:4d} {words}  {' '.join(parts)}")
    return "\n".join(lines) + ("\n" if lines else "")
