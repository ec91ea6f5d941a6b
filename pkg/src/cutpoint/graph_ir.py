"""Network graph IR: parsing, node fusion, block detection and segment inference.

A network description is a JSON document::

    {"name": "toy", "input": {"w": 8, "h": 8, "c": 16},
     "layers": [{"kind": "conv", "out_c": 16, "kernel": 3, "activation": "relu"},
                {"kind": "eltwise_add", "shortcut_src": -1}]}

Layer ``i`` reads the output of layer ``i - 1`` unless ``src`` says otherwise
(``-1`` is the network input).  ``eltwise_add`` and ``scale`` read a second
tensor through ``shortcut_src``; ``concat`` reads only ``concat_srcs``.  A
``concat`` with a single source is a plain route back to an earlier tensor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import GraphError

INPUT = -1

KINDS = ("conv", "dwconv", "fc", "maxpool", "avgpool_global", "eltwise_add",
         "concat", "upsample", "activation", "scale")
ACTIVATIONS = ("none", "relu", "leaky", "sigmoid", "swish")
CONV_KINDS = frozenset(("conv", "dwconv", "fc"))
SE_ROLES = ("none", "se_gap", "se_fc1", "se_fc2", "se_scale")

# order of the fusable ops inside a group: conv, pool, eltwise, upsample
_STAGE = {"maxpool": 1, "eltwise_add": 2, "upsample": 3}


@dataclass(frozen=True)
class LayerNode:
    id: int
    kind: str
    in_w: int
    in_h: int
    in_c: int
    out_w: int
    out_h: int
    out_c: int
    kernel: int = 1
    stride: int = 1
    activation: str = "none"
    batchnorm_folded: bool = False
    src: Optional[int] = None
    shortcut_src: Optional[int] = None
    concat_srcs: Optional[tuple] = None
    quant: int = 0
    name: str = ""
    # concat sources that are not the preceding layer; spilled off-chip
    long_path_srcs: tuple = ()

    @property
    def is_conv(self):
        return self.kind in CONV_KINDS

    def inputs(self):
        """All tensor ids read by this layer, main input first."""
        if self.kind == "concat":
            return tuple(self.concat_srcs)
        ins = (self.src,)
        if self.shortcut_src is not None:
            ins += (self.shortcut_src,)
        return ins

    @property
    def macs(self):
        k2 = self.kernel * self.kernel
        if self.kind == "conv":
            return self.out_w * self.out_h * self.out_c * self.in_c * k2
        if self.kind == "dwconv":
            return self.out_w * self.out_h * self.out_c * k2
        if self.kind == "fc":
            return self.in_w * self.in_h * self.in_c * self.out_c
        if self.kind == "scale":
            return self.out_w * self.out_h * self.out_c
        return 0

    @property
    def weight_params(self):
        k2 = self.kernel * self.kernel
        if self.kind == "conv":
            return k2 * self.in_c * self.out_c
        if self.kind == "dwconv":
            return k2 * self.out_c
        if self.kind == "fc":
            return self.in_w * self.in_h * self.in_c * self.out_c
        return 0

    def weight_bytes(self, q_a=8):
        """Weights at ``q_a`` bits plus 4-byte bias/scale words per output channel."""
        if not self.is_conv:
            return 0
        return self.weight_params * q_a // 8 + 4 * self.out_c


@dataclass(frozen=True)
class NetworkGraph:
    name: str
    input_w: int
    input_h: int
    input_c: int
    layers: tuple
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        cons = {INPUT: []}
        for layer in self.layers:
            cons[layer.id] = []
        for layer in self.layers:
            for t in layer.inputs():
                if layer.id not in cons[t]:
                    cons[t].append(layer.id)
        object.__setattr__(self, "_consumers",
                           {t: tuple(v) for t, v in cons.items()})

    def __len__(self):
        return len(self.layers)

    def consumers(self, tensor):
        return self._consumers[tensor]

    def shape(self, tensor):
        if tensor == INPUT:
            return (self.input_w, self.input_h, self.input_c)
        layer = self.layers[tensor]
        return (layer.out_w, layer.out_h, layer.out_c)

    def tensor_bytes(self, tensor, q_a=8):
        w, h, c = self.shape(tensor)
        return w * h * c * q_a // 8

    def terminal_outputs(self):
        return tuple(l.id for l in self.layers if not self._consumers[l.id])

    @property
    def macs(self):
        return sum(l.macs for l in self.layers)

    def weight_bytes(self, q_a=8):
        return sum(l.weight_bytes(q_a) for l in self.layers)

    @property
    def conv_layers(self):
        return tuple(l.id for l in self.layers if l.kind in ("conv", "dwconv", "fc"))


# --------------------------------------------------------------------------
# parsing

_LAYER_KEYS = {"kind", "out_c", "kernel", "stride", "activation",
               "batchnorm_folded", "src", "shortcut_src", "concat_srcs",
               "quant", "name", "in_w", "in_h", "in_c", "out_w", "out_h"}


def _ceil_div(a, b):
    return -(-a // b)


def parse_network(document):
    """Parse a JSON network description (text or decoded mapping)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise GraphError(f"not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise GraphError("network document must be a JSON object")
    try:
        inp = document["input"]
        in_w, in_h, in_c = int(inp["w"]), int(inp["h"]), int(inp["c"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError("missing or malformed 'input' {w, h, c}") from exc
    if min(in_w, in_h, in_c) <= 0:
        raise GraphError("input dimensions must be positive")
    name = str(document.get("name", "network"))
    meta = dict(document.get("meta", {}))

    shapes = {INPUT: (in_w, in_h, in_c)}
    layers = []
    for idx, spec in enumerate(document.get("layers", [])):
        layer = _build_layer(idx, spec, shapes)
        shapes[idx] = (layer.out_w, layer.out_h, layer.out_c)
        layers.append(layer)
    return NetworkGraph(name, in_w, in_h, in_c, tuple(layers), meta)


def load_network(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_network(fh.read())


def _ref(idx, value, what):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise GraphError(f"{what} must be an integer layer id", idx)
    if value >= idx:
        raise GraphError(f"{what}={value} does not precede this layer "
                         "(cycle or not topologically ordered)", idx)
    if value < INPUT:
        raise GraphError(f"{what}={value} is not a layer id", idx)
    return value


def _build_layer(idx, spec, shapes):
    if not isinstance(spec, dict):
        raise GraphError("layer entry must be an object", idx)
    unknown = set(spec) - _LAYER_KEYS
    if unknown:
        raise GraphError(f"unknown field(s) {sorted(unknown)}", idx)
    kind = spec.get("kind")
    if kind not in KINDS:
        raise GraphError(f"unknown layer kind {kind!r}", idx)
    act = spec.get("activation", "none")
    if act not in ACTIVATIONS:
        raise GraphError(f"unknown activation {act!r}", idx)
    kernel = int(spec.get("kernel", 1))
    stride = int(spec.get("stride", 1))
    quant = int(spec.get("quant", 0))

    concat_srcs = None
    src = None
    shortcut = _ref(idx, spec.get("shortcut_src"), "shortcut_src")
    if kind == "concat":
        raw = spec.get("concat_srcs")
        if not raw:
            raise GraphError("concat needs a non-empty concat_srcs list", idx)
        concat_srcs = tuple(_ref(idx, s, "concat_srcs") for s in raw)
        if "src" in spec:
            raise GraphError("concat takes concat_srcs, not src", idx)
    else:
        src = _ref(idx, spec.get("src", idx - 1), "src")
    if shortcut is not None and kind not in ("eltwise_add", "scale"):
        raise GraphError(f"shortcut_src not allowed on {kind}", idx)
    if kind in ("eltwise_add", "scale") and shortcut is None:
        raise GraphError(f"{kind} requires shortcut_src", idx)

    if kind == "concat":
        srcs_shapes = [shapes[s] for s in concat_srcs]
        iw, ih = srcs_shapes[0][:2]
        for s, (w, h, _) in zip(concat_srcs, srcs_shapes):
            if (w, h) != (iw, ih):
                raise GraphError(
                    f"concat source {s} is {w}x{h}, expected {iw}x{ih}", idx)
        ic = sum(c for _, _, c in srcs_shapes)
    elif kind == "scale":
        vw, vh, vc = shapes[src]
        iw, ih, ic = shapes[shortcut]
        if (vw, vh) != (1, 1) or vc != ic:
            raise GraphError(
                f"scale vector {vw}x{vh}x{vc} does not match feature channels {ic}",
                idx)
    else:
        iw, ih, ic = shapes[src]

    out_c_spec = spec.get("out_c")
    if kind in ("conv", "fc"):
        if out_c_spec is None or int(out_c_spec) <= 0:
            raise GraphError(f"{kind} requires a positive out_c", idx)
        oc = int(out_c_spec)
    else:
        oc = ic
        if out_c_spec is not None and int(out_c_spec) != oc:
            raise GraphError(f"out_c={out_c_spec} but {kind} keeps {oc} channels",
                             idx)

    if kind in ("conv", "dwconv"):
        if kernel <= 0 or kernel % 2 == 0:
            raise GraphError(f"kernel must be odd and positive, got {kernel}", idx)
    if kind in ("conv", "dwconv", "maxpool"):
        if stride not in (1, 2):
            raise GraphError(f"stride must be 1 or 2, got {stride}", idx)
        if kernel <= 0:
            raise GraphError("kernel must be positive", idx)
        ow, oh = _ceil_div(iw, stride), _ceil_div(ih, stride)
    elif kind in ("fc", "avgpool_global"):
        ow = oh = 1
    elif kind == "upsample":
        if stride < 2:
            raise GraphError("upsample factor (stride) must be >= 2", idx)
        ow, oh = iw * stride, ih * stride
    else:
        ow, oh = iw, ih

    if kind == "eltwise_add":
        if shapes[shortcut] != (iw, ih, ic):
            raise GraphError(
                f"shortcut {shortcut} shape {shapes[shortcut]} != input shape "
                f"{(iw, ih, ic)}", idx)

    for key, val in (("in_w", iw), ("in_h", ih), ("in_c", ic),
                     ("out_w", ow), ("out_h", oh)):
        if key in spec and int(spec[key]) != val:
            raise GraphError(f"declared {key}={spec[key]} but inferred {val}", idx)

    long_path = ()
    if concat_srcs is not None:
        long_path = tuple(s for s in concat_srcs if s != idx - 1)

    return LayerNode(
        id=idx, kind=kind, in_w=iw, in_h=ih, in_c=ic, out_w=ow, out_h=oh,
        out_c=oc, kernel=kernel, stride=stride, activation=act,
        batchnorm_folded=bool(spec.get("batchnorm_folded", False)),
        src=src, shortcut_src=shortcut, concat_srcs=concat_srcs, quant=quant,
        name=str(spec.get("name", "")), long_path_srcs=long_path)


def to_document(graph):
    """Canonical document form of ``graph`` (only non-default fields)."""
    layers = []
    for l in graph.layers:
        d = {"kind": l.kind}
        if l.name:
            d["name"] = l.name
        if l.kind in ("conv", "fc"):
            d["out_c"] = l.out_c
        if l.kernel != 1:
            d["kernel"] = l.kernel
        if l.stride != 1:
            d["stride"] = l.stride
        if l.activation != "none":
            d["activation"] = l.activation
        if l.batchnorm_folded:
            d["batchnorm_folded"] = True
        if l.kind == "concat":
            d["concat_srcs"] = list(l.concat_srcs)
        elif l.src != l.id - 1:
            d["src"] = l.src
        if l.shortcut_src is not None:
            d["shortcut_src"] = l.shortcut_src
        if l.quant:
            d["quant"] = l.quant
        layers.append(d)
    doc = {"name": graph.name,
           "input": {"w": graph.input_w, "h": graph.input_h, "c": graph.input_c}}
    if graph.meta:
        doc["meta"] = graph.meta
    doc["layers"] = layers
    return doc


def serialize_network(graph):
    """Canonical JSON text; ``parse_network(serialize_network(g)) == g``."""
    doc = to_document(graph)
    head = json.dumps({k: v for k, v in doc.items() if k != "layers"})[:-1]
    body = ",\n  ".join(json.dumps(l) for l in doc["layers"])
    return f'{head}, "layers": [\n  {body}\n]}}\n'


# --------------------------------------------------------------------------
# fusion


@dataclass(frozen=True)
class NodeGroup:
    group_id: int
    layers: tuple
    se_role: str = "none"
    # concat layers this group's output is written into directly (row mode)
    redirect_to: tuple = ()

    @property
    def head(self):
        return self.layers[0]


def fuse_groups(graph, fuse_eltwise=True):
    """Fuse layers into accelerator-executable groups.

    A conv/dwconv absorbs the chain ``[act] [maxpool] [eltwise] [upsample]``
    that follows it, as long as each absorbed layer is the sole consumer of
    the running output.  A dwconv whose output feeds a global average pool
    and a channel ``scale`` takes the pool as a side output (SE squeeze).
    ``fuse_eltwise=False`` keeps element-wise adds as their own groups.
    """
    layers = graph.layers
    n = len(layers)
    raw = []
    i = 0
    while i < n:
        head = layers[i]
        members = [i]
        role = "none"
        if head.kind in ("conv", "dwconv", "fc"):
            last = i
            stage = 0
            j = i + 1
            while j < n:
                nxt = layers[j]
                cons = graph.consumers(last)
                if nxt.kind == "concat" or nxt.src != last:
                    break
                if (head.kind == "dwconv" and nxt.kind == "avgpool_global"
                        and len(cons) > 1 and cons[0] == j
                        and all(layers[c].kind == "scale"
                                and layers[c].shortcut_src == last
                                for c in cons[1:])):
                    members.append(j)
                    role = "se_gap"
                    j += 1
                    break
                if cons != (j,):
                    break
                if nxt.kind == "activation":
                    pass
                elif head.kind == "fc":
                    break
                elif nxt.kind in _STAGE:
                    s = _STAGE[nxt.kind]
                    if s <= stage or (s == 2 and not fuse_eltwise):
                        break
                    stage = s
                else:
                    break
                members.append(j)
                last = j
                j += 1
                if stage == 3:
                    break
            i = j
        else:
            i += 1
        raw.append((tuple(members), role))

    owner = {}
    for gid, (members, _) in enumerate(raw):
        for m in members:
            owner[m] = gid
    roles = [r for _, r in raw]
    for gid, (members, role) in enumerate(raw):
        head = layers[members[0]]
        if role != "none":
            continue
        if head.kind == "fc" and head.src != INPUT:
            pg = owner[head.src]
            if roles[pg] == "se_gap" and layers[head.src].kind == "avgpool_global":
                roles[gid] = "se_fc1"
            elif roles[pg] == "se_fc1":
                roles[gid] = "se_fc2"
        elif head.kind == "scale":
            roles[gid] = "se_scale"

    redirects = {gid: [] for gid in range(len(raw))}
    for layer in layers:
        if layer.kind == "concat":
            for s in layer.concat_srcs:
                if s != INPUT and layer.id not in redirects[owner[s]]:
                    redirects[owner[s]].append(layer.id)
    return [NodeGroup(gid, members, roles[gid], tuple(redirects[gid]))
            for gid, (members, _) in enumerate(raw)]


@dataclass(frozen=True)
class GroupIO:
    """Tensor-level view of one group."""
    group_id: int
    head: int
    kind: str
    main_in: Optional[int]
    shortcut_in: Optional[int]
    vector_in: Optional[int]
    concat_in: tuple
    long_path_in: tuple
    out: int
    side_outs: tuple
    conv: Optional[int]
    pool: Optional[int]
    eltwise: Optional[int]
    upsample: Optional[int]

    @property
    def external_inputs(self):
        ins = []
        for t in (self.main_in, self.shortcut_in, self.vector_in) + self.concat_in:
            if t is not None and t not in ins:
                ins.append(t)
        return tuple(ins)

    @property
    def outputs(self):
        return (self.out,) + self.side_outs


def group_io(graph, group):
    layers = graph.layers
    members = group.layers
    head = layers[members[0]]
    side = ()
    chain = list(members)
    if group.se_role == "se_gap":
        side = (members[-1],)
        chain = chain[:-1]
    conv = head.id if head.kind in ("conv", "dwconv", "fc", "scale") else None
    pool = eltwise = upsample = None
    shortcut = vector = None
    for m in members:
        k = layers[m].kind
        if k == "maxpool" and m not in side:
            pool = m
        elif k == "eltwise_add":
            eltwise = m
            shortcut = layers[m].shortcut_src
        elif k == "upsample":
            upsample = m
    concat_in = ()
    long_path = ()
    main_in = head.src
    if head.kind == "concat":
        main_in = None
        concat_in = head.concat_srcs
        long_path = head.long_path_srcs
    elif head.kind == "scale":
        main_in = head.shortcut_src
        vector = head.src
    return GroupIO(group.group_id, head.id, head.kind, main_in, shortcut, vector,
                   concat_in, long_path, chain[-1], side, conv, pool, eltwise,
                   upsample)


# --------------------------------------------------------------------------
# blocks and segments


@dataclass(frozen=True)
class Block:
    block_id: int
    groups: tuple
    kind: str  # plain | residual | residual_se | se

    @property
    def first(self):
        return self.groups[0]

    @property
    def last(self):
        return self.groups[-1]


def detect_blocks(graph, groups):
    """Partition groups into scheduling blocks.

    A block is the smallest contiguous run of groups closed under on-chip data
    references: an element-wise shortcut or an SE channel scale pins a tensor
    across several groups.  Long-path concat sources are spilled off-chip and
    never open a block.  Groups outside any such span are singleton plain
    blocks.
    """
    owner = {}
    for g in groups:
        for m in g.layers:
            owner[m] = g.group_id
    owner[INPUT] = -1
    ios = [group_io(graph, g) for g in groups]

    spans = []       # (start, end, is_residual, has_se)
    for io in ios:
        g = io.group_id
        refs = []
        for t in (io.main_in, io.shortcut_in, io.vector_in):
            if t is not None:
                refs.append(t)
        for t in io.concat_in:
            if t not in io.long_path_in:
                refs.append(t)
        for t in refs:
            p = owner[t]
            if p < g - 1:
                spans.append([p + 1, g, t == io.shortcut_in, False])
        if groups[g].se_role == "se_scale":
            p = owner[io.main_in]
            spans.append([p, g, False, True])

    residual_spans = sorted((s, e) for s, e, r, _ in spans if r)
    for a in range(len(residual_spans)):
        s1, e1 = residual_spans[a]
        for b in range(a + 1, len(residual_spans)):
            s2, e2 = residual_spans[b]
            if s2 > e1:
                break
            if s2 > s1 and s2 <= e1 and e2 > e1:
                raise GraphError(
                    f"residual spans over groups {s1}-{e1} and {s2}-{e2} overlap "
                    "without nesting", groups[e1].layers[0])

    # merge spans until closed (a block may need to grow to cover the
    # producers of tensors its own members read)
    spans.sort()
    merged = []
    for s, e, r, se in spans:
        if merged and s <= merged[-1][1]:
            m = merged[-1]
            m[1] = max(m[1], e)
            m[2] |= r
            m[3] |= se
        else:
            merged.append([s, e, r, se])

    blocks = []
    gid = 0
    for s, e, r, se in merged:
        while gid < s:
            blocks.append(Block(len(blocks), (gid,), "plain"))
            gid += 1
        if r and se:
            kind = "residual_se"
        elif r:
            kind = "residual"
        elif se:
            kind = "se"
        else:
            kind = "plain"
        blocks.append(Block(len(blocks), tuple(range(s, e + 1)), kind))
        gid = e + 1
    while gid < len(groups):
        blocks.append(Block(len(blocks), (gid,), "plain"))
        gid += 1
    return blocks


@dataclass(frozen=True)
class Segment:
    start: int      # first block id
    stop: int       # one past the last block id
    direction: str  # decreasing | increasing

    @property
    def depth(self):
        return self.stop - self.start


@dataclass(frozen=True)
class SegmentPlan:
    segments: tuple

    @property
    def k(self):
        return len(self.segments)

    @property
    def sub_depths(self):
        return tuple(s.depth for s in self.segments)


def block_areas(graph, groups, blocks):
    out = []
    for b in blocks:
        io = group_io(graph, groups[b.last])
        w, h, _ = graph.shape(io.out)
        out.append(w * h)
    return out


def infer_segments_from_areas(areas):
    """Split a block-area sequence into maximal monotone runs.

    Plateaus stay with the run they extend; the block at a turning point
    closes the run that reached it.
    """
    n = len(areas)
    if n == 0:
        return SegmentPlan(())
    segs = []
    start = 0
    direction = None
    for b in range(1, n):
        if areas[b] == areas[b - 1]:
            continue
        cur = "decreasing" if areas[b] < areas[b - 1] else "increasing"
        if direction is None:
            direction = cur
        elif cur != direction:
            segs.append(Segment(start, b, direction))
            start = b
            direction = cur
    segs.append(Segment(start, n, direction or "decreasing"))
    return SegmentPlan(tuple(segs))


def infer_segments(graph, groups, blocks):
    return infer_segments_from_areas(block_areas(graph, groups, blocks))


# --------------------------------------------------------------------------


@dataclass
class NetworkPlan:
    """Graph plus its fused groups, blocks and segment structure."""
    graph: NetworkGraph
    groups: list
    blocks: list
    segments: SegmentPlan
    ios: list = field(default_factory=list)
    group_block: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ios:
            self.ios = [group_io(self.graph, g) for g in self.groups]
        if not self.group_block:
            gb = [0] * len(self.groups)
            for b in self.blocks:
                for g in b.groups:
                    gb[g] = b.block_id
            self.group_block = gb
        owner = {INPUT: -1}
        for g in self.groups:
            for m in g.layers:
                owner[m] = g.group_id
        self.owner = owner


def plan_network(graph, fuse_eltwise=True):
    groups = fuse_groups(graph, fuse_eltwise=fuse_eltwise)
    blocks = detect_blocks(graph, groups)
    return NetworkPlan(graph, groups, blocks, infer_segments(graph, groups, blocks))
