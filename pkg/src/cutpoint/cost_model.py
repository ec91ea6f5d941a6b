"""Closed-form buffer sizing, BRAM18K estimate and DRAM traffic.

All sizes are bytes.  Feature tensors are ``w * h * c * Q_A / 8`` bytes;
partial sums are ``Q_S / 8`` bytes per element.
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass, asdict, field

from .allocator import (OFFCHIP, assign_with_fallback, redirected_concats,
                        se_vectors)
from .errors import CostModelError
from .graph_ir import INPUT, NetworkGraph, plan_network
from .hw import HwConfig, MB
from .policy import FRAME, ROW, ReusePolicy

# the double-buffered weight block lives in LUT-RAM, outside the SRAM total
WEIGHT_BLOCK_DEPTH = 18

__all__ = [
    "BufferRequirements", "CostReport", "HwConfig", "ReusePolicy",
    "scheme_characteristics", "required_buffer_sizes", "bram18k_count",
    "buffer_brams", "dram_feature_access", "feature_traffic", "total_dram",
    "baseline_dram", "dsp_efficiency", "evaluate_policy", "as_plan",
]


def as_plan(graph_or_plan):
    if isinstance(graph_or_plan, NetworkGraph):
        return plan_network(graph_or_plan)
    return graph_or_plan


def _ceil_div(a, b):
    return -(-a // b)


# --------------------------------------------------------------------------


def scheme_characteristics(layer, scheme, hw=None):
    """Buffer and weight-reuse characteristics of one conv-bearing layer.

    ``H`` is the feature height, ``N`` the input channel count and ``K`` the
    kernel size.  Frame-reuse buffers two whole input frames and a ``T_o``
    slice of whole-frame partial sums; row-reuse buffers ``K + 1`` input rows
    and one row of partial sums, re-reading the weights once per output row.
    """
    hw = hw or HwConfig()
    if layer.kind not in ("conv", "dwconv", "fc"):
        raise CostModelError(f"layer {layer.id}: {layer.kind} has no reuse "
                             "characteristics")
    h_in, w_in, n, k = layer.in_h, layer.in_w, layer.in_c, layer.kernel
    h_out, w_out = layer.out_h, layer.out_w
    if scheme == FRAME:
        return {"input_buf_bytes": 2 * h_in * w_in * n * hw.q_a // 8,
                "output_buf_bytes": hw.t_o * h_out * w_out * hw.q_s // 8,
                "weight_reads": 1,
                "weight_reuses": h_out * w_out}
    if scheme == ROW:
        return {"input_buf_bytes": (k + 1) * n * w_in * hw.q_a // 8,
                "output_buf_bytes": hw.t_o * w_out * hw.q_s // 8,
                "weight_reads": h_out,
                "weight_reuses": w_out}
    raise CostModelError(f"unknown scheme {scheme!r}")


def bram18k_count(depth, width):
    """BRAM18K tiles for a ``depth`` x ``width``-bit memory (1024 x 18 tiles)."""
    if depth <= 0 or width <= 0:
        raise CostModelError(f"buffer dimensions must be positive, got "
                             f"depth={depth} width={width}")
    return _ceil_div(depth, 1024) * _ceil_div(width, 18)


@dataclass(frozen=True)
class BufferRequirements:
    buff0: int
    buff1: int
    buff2: int
    weight_buff: int
    row_buff: int
    out_buff: int
    write_buff: int
    sram_total: int
    bram18k_total: int
    bram_detail: dict = field(default_factory=dict, compare=False)

    @property
    def feature_buffers(self):
        return (self.buff0, self.buff1, self.buff2)

    @property
    def sram_mb(self):
        return self.sram_total / MB

    def as_dict(self):
        d = asdict(self)
        d.pop("bram_detail")
        return d


def buffer_brams(name, size, hw):
    """BRAM18K tiles of one named buffer given its byte size."""
    if size <= 0:
        return 0
    if name == "out_buff":
        width = hw.t_o * hw.q_s
    else:
        width = hw.t_i * hw.q_a
    depth = _ceil_div(size * 8, width)
    return bram18k_count(depth, width)


def _uses_lut(graph):
    return any(l.activation in ("sigmoid", "swish") for l in graph.layers)


def required_buffer_sizes(policy, assignment, plan, hw=None):
    """Size every on-chip buffer for ``policy`` placed as ``assignment``."""
    hw = hw or HwConfig()
    plan = as_plan(plan)
    graph = plan.graph
    layers = graph.layers
    schemes = policy.group_schemes(plan)
    q = hw.q_a // 8
    ps = hw.q_s // 8

    buff = list(assignment.peaks())
    weight_buff = row_buff = out_buff = write_buff = 0
    for gid, io in enumerate(plan.ios):
        a = assignment[gid]
        scheme = schemes[gid]
        conv = layers[io.conv] if io.conv is not None else None
        if conv is not None and conv.kind in ("conv", "dwconv", "fc"):
            row_buff = max(row_buff, 6 * conv.in_w * conv.in_c * q)
            if scheme == ROW:
                weight_buff = max(weight_buff, conv.weight_bytes(hw.q_a))
            w, h = conv.out_w, conv.out_h
        else:
            head = layers[io.head]
            w, h = head.out_w, head.out_h
        if scheme == FRAME:
            out_buff = max(out_buff, w * h * hw.t_o * ps)
        else:
            out_buff = max(out_buff, w * hw.t_o * ps)
        ow, oh, _ = graph.shape(io.out)
        if scheme == ROW:
            if a.out.buffer == OFFCHIP:
                write_buff = max(write_buff, ow * hw.t_o * q)
        elif a.spill:
            write_buff = max(write_buff, ow * oh * hw.t_o * q)

    buff[1] = max(weight_buff, buff[1])
    sizes = {"buff0": buff[0], "buff1": buff[1], "buff2": buff[2],
             "row_buff": row_buff, "out_buff": out_buff,
             "write_buff": write_buff}
    detail = {k: buffer_brams(k, v, hw) for k, v in sizes.items()}
    if hw.lut_brams and _uses_lut(graph):
        detail["activation_lut"] = hw.t_o
    total = sum(sizes.values())
    return BufferRequirements(buff[0], buff[1], buff[2], weight_buff, row_buff,
                              out_buff, write_buff, total,
                              sum(detail.values()), detail)


# --------------------------------------------------------------------------
# DRAM traffic


def feature_traffic(plan, policy, hw=None):
    """Off-chip feature-map events, in execution order.

    Returns ``(layer, direction, bytes, tensor)`` tuples with direction ``"R"``
    or ``"W"``.  A tensor is written off-chip once, by its producer, when
    anything reads it from DRAM: a row-reuse consumer, a long-path concat, or
    nobody at all (network outputs).  It is read once by every row-reuse
    group that consumes it and once by the first frame-reuse group that
    needs it on-chip (later frame readers find it resident).  A fused
    element-wise add reads its shortcut in the same pass, so a row-reuse
    conv+add is two reads and one write.  A concat that is never assembled
    on-chip moves nothing: its producers write straight into the
    concatenated tensor and its readers load that (see
    :func:`~cutpoint.allocator.redirected_concats`).  The
    squeeze-excitation vectors never leave the chip.
    """
    hw = hw or HwConfig()
    plan = as_plan(plan)
    graph = plan.graph
    schemes = policy.group_schemes(plan)
    vectors = se_vectors(plan)
    size = lambda t: graph.tensor_bytes(t, hw.q_a)

    redirected = redirected_concats(plan, schemes)
    offchip_readers = set(graph.terminal_outputs())
    for gid, io in enumerate(plan.ios):
        offchip_readers.update(io.long_path_in)
        if gid in redirected:
            # producers write straight into the concat destination
            offchip_readers.update(io.concat_in)
        elif schemes[gid] == ROW:
            offchip_readers.update(t for t in (io.main_in, io.shortcut_in)
                                   if t is not None and t not in vectors)

    events = []
    resident = set()
    for gid, io in enumerate(plan.ios):
        scheme = schemes[gid]
        layer = io.head
        if gid in redirected:
            continue
        if scheme == ROW:
            for t in (io.main_in, io.shortcut_in):
                if t is not None and t not in vectors:
                    events.append((layer, "R", size(t), t))
            if io.out not in vectors:
                events.append((io.out, "W", size(io.out), io.out))
            continue
        for t in io.external_inputs:
            if t in io.long_path_in or t in vectors or t in resident:
                continue
            producer = plan.owner[t]
            if t == INPUT or schemes[producer] == ROW or producer in redirected:
                events.append((layer, "R", size(t), t))
                resident.add(t)
        for t in io.long_path_in:
            events.append((layer, "R", size(t), t))
        for t in io.outputs:
            resident.add(t)
        if io.out in offchip_readers and io.out not in vectors:
            events.append((io.out, "W", size(io.out), io.out))
    return events


def dram_feature_access(policy, plan, hw=None):
    return sum(e[2] for e in feature_traffic(plan, policy, hw))


def total_dram(policy, plan, hw=None):
    """Feature traffic plus every weight read exactly once."""
    hw = hw or HwConfig()
    plan = as_plan(plan)
    return dram_feature_access(policy, plan, hw) + plan.graph.weight_bytes(hw.q_a)


def baseline_dram(graph, hw=None, fuse_shortcut=True):
    """Traffic when every layer reads its inputs and writes its output once.

    With ``fuse_shortcut`` a convolution whose only consumer is an
    element-wise add is counted together with that add: the intermediate
    tensor between them never leaves the chip (the reference accelerators
    all fuse the shortcut add).  Weights are read once.
    """
    hw = hw or HwConfig()
    if isinstance(graph, NetworkGraph) is False:
        graph = graph.graph
    size = lambda t: graph.tensor_bytes(t, hw.q_a)
    total = 0
    for l in graph.layers:
        total += sum(size(t) for t in l.inputs()) + size(l.id)
        if (fuse_shortcut and l.kind == "eltwise_add" and l.src != INPUT
                and graph.layers[l.src].kind in ("conv", "dwconv")
                and graph.consumers(l.src) == (l.id,)):
            total -= 2 * size(l.src)
    return total + graph.weight_bytes(hw.q_a)


def dsp_efficiency(avg_gops, hw=None):
    """Average GOPS over peak (4 operations per MAC per cycle: double-MAC)."""
    hw = hw or HwConfig()
    peak = 4 * hw.freq * hw.n_mac / 1e9
    return avg_gops / peak


# --------------------------------------------------------------------------


@dataclass
class CostReport:
    """Buffer sizes and traffic of one policy, with per-group rows."""
    model: str
    policy: ReusePolicy
    buffers: BufferRequirements
    feature_bytes: int
    weight_bytes: int
    baseline_bytes: int
    rows: list
    forced_row: tuple = ()
    latency_cycles: int = 0
    gops: float = 0.0

    @property
    def total_bytes(self):
        return self.feature_bytes + self.weight_bytes

    @property
    def reduction(self):
        if not self.baseline_bytes:
            return 0.0
        return 1.0 - self.total_bytes / self.baseline_bytes

    def summary(self):
        b = self.buffers
        cp = self.policy.cut_points
        lines = [
            f"model: {self.model}",
            f"cut_points: {list(cp) if cp is not None else 'custom'}",
            f"forced_row_blocks: {list(self.forced_row)}",
            f"row_blocks: {sum(s == ROW for s in self.policy.schemes)}",
            f"frame_blocks: {sum(s == FRAME for s in self.policy.schemes)}",
        ]
        for k, v in b.as_dict().items():
            lines.append(f"{k}: {v}")
        lines += [
            f"sram_mb: {b.sram_total / MB:.4f}",
            # the narrower reading of "minimum buffer": the three feature
            # buffers only (buffer 1 already covers the row weights)
            f"feature_buffers_mb: {(b.buff0 + b.buff1 + b.buff2) / MB:.4f}",
            f"weight_block_lutram_depth: {WEIGHT_BLOCK_DEPTH}",
            f"feature_dram_mb: {self.feature_bytes / MB:.4f}",
            f"weight_dram_mb: {self.weight_bytes / MB:.4f}",
            f"total_dram_mb: {self.total_bytes / MB:.4f}",
            f"baseline_dram_mb: {self.baseline_bytes / MB:.4f}",
            f"offchip_reduction_pct: {100 * self.reduction:.2f}",
        ]
        if self.latency_cycles:
            lines += [f"latency_cycles: {self.latency_cycles}",
                      f"gops: {self.gops:.2f}"]
        return "\n".join(lines) + "\n"

    def csv(self):
        buf = io.StringIO()
        if self.rows:
            w = csv.DictWriter(buf, fieldnames=list(self.rows[0]),
                               lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)
        return buf.getvalue()


def evaluate_policy(plan, policy, hw=None, fallback=True):
    """Allocate, size and price ``policy``.  Returns ``(report, assignment)``.

    With ``fallback`` blocks that do not fit in three buffers are forced to
    row-reuse (listed in ``report.forced_row``).
    """
    from .allocator import assign_buffers
    hw = hw or HwConfig()
    plan = as_plan(plan)
    if fallback:
        assignment, policy = assign_with_fallback(plan, policy, hw)
    else:
        assignment = assign_buffers(plan, policy, hw)
    buffers = required_buffer_sizes(policy, assignment, plan, hw)
    events = feature_traffic(plan, policy, hw)
    per_group = {}
    for layer, d, b, _ in events:
        gid = plan.owner[layer] if layer in plan.owner else -1
        per_group.setdefault(gid, [0, 0])[0 if d == "R" else 1] += b
    layers = plan.graph.layers
    rows = []
    for gid, io in enumerate(plan.ios):
        a = assignment[gid]
        r, w = per_group.get(gid, (0, 0))
        head = layers[io.head]
        rows.append({
            "group": gid, "block": a.block_id, "head": io.head,
            "kind": head.kind, "scheme": a.scheme,
            "alloc_in": a.alloc_in, "alloc_out": a.alloc_out,
            "alloc_shortcut": a.alloc_shortcut,
            "weight_bytes": head.weight_bytes(hw.q_a),
            "dram_read": r, "dram_write": w,
        })
    report = CostReport(plan.graph.name, policy, buffers, sum(e[2] for e in events),
                        plan.graph.weight_bytes(hw.q_a),
                        baseline_dram(plan.graph, hw), rows,
                        assignment.forced_row)
    return report, assignment
