"""Cycle model of one inference under a reuse policy.

Every group is charged ``max(compute, memory)`` cycles:

* compute: the MAC-array cycles of the group's head layer (see
  :func:`compute_cycles`), plus a fixed pipeline setup cost for any group
  that does work;
* memory: ``ceil(bytes / bus_bytes)``, with the group's off-chip feature
  traffic plus its weights (read once per output row in row-reuse, once in
  frame-reuse).

Fused pooling, element-wise adds, activations and upsampling add no cycles.
Groups run back to back, so the network latency is the sum.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .cost_model import as_plan, evaluate_policy, feature_traffic
from .errors import SimulationError
from .hw import HwConfig, MB
from .policy import FRAME, ROW, ReusePolicy


def _cdiv(a, b):
    return -(-a // b)


@dataclass(frozen=True)
class GroupTiming:
    group_id: int
    head: int
    kind: str
    scheme: str
    compute: int
    memory: int
    total: int
    macs: int
    reads: int
    writes: int
    read_bytes: int
    write_bytes: int
    weight_bytes: int


@dataclass(frozen=True)
class LatencyReport:
    groups: tuple
    cycles: int
    seconds: float
    macs: int
    trace: tuple = field(compare=False, default=())

    @property
    def gops(self):
        return 2 * self.macs / self.seconds / 1e9 if self.seconds else 0.0

    @property
    def ms(self):
        return self.seconds * 1e3

    @property
    def trace_bytes(self):
        return sum(e[2] for e in self.trace)

    def trace_text(self):
        """Ordered off-chip events, one per line: ``layer dir bytes tensor``."""
        return "".join(f"{l} {d} {b} {t}\n" for l, d, b, t in self.trace)

    def table(self):
        head = "group,head,kind,scheme,compute,memory,total,macs,reads,writes\n"
        return head + "".join(
            f"{g.group_id},{g.head},{g.kind},{g.scheme},{g.compute},{g.memory},"
            f"{g.total},{g.macs},{g.reads},{g.writes}\n" for g in self.groups)


def parallel_kernels(hw):
    """Convolution kernels working side by side (``n_mac / (T_i * T_o)``)."""
    return max(1, hw.n_mac // (hw.t_i * hw.t_o))


def compute_cycles(layer, hw):
    """MAC-array cycles of the head layer of a group (without setup).

    A normal convolution tiles ``T_i`` input by ``T_o`` output channels per
    kernel with two products per shared MAC (one at 16-bit); a depthwise convolution gets a
    single product per MAC, spread over ``T_o`` channels and
    ``n_mac / T_o`` kernel taps or pixels.
    """
    k2 = layer.kernel * layer.kernel
    area = layer.out_w * layer.out_h
    if layer.kind == "conv":
        n = _cdiv(layer.out_c, hw.t_o) * _cdiv(layer.in_c, hw.t_i) * area * k2
        return _cdiv(n, hw.products_per_mac * parallel_kernels(hw))
    if layer.kind in ("dwconv", "scale"):
        lanes = max(1, hw.n_mac // hw.t_o)
        return _cdiv(layer.out_c, hw.t_o) * _cdiv(area * k2, lanes)
    if layer.kind == "fc":
        n_in = layer.in_w * layer.in_h * layer.in_c
        n = _cdiv(layer.out_c, hw.t_o) * _cdiv(n_in, hw.t_i)
        return _cdiv(n, hw.products_per_mac * parallel_kernels(hw))
    if layer.kind in ("eltwise_add", "maxpool", "upsample", "activation"):
        return _cdiv(layer.out_c, hw.t_o) * area
    if layer.kind == "avgpool_global":
        return _cdiv(layer.in_c, hw.t_o) * layer.in_w * layer.in_h
    if layer.kind == "concat":
        return 0
    raise SimulationError(f"layer {layer.id}: unsupported kind {layer.kind!r}")


def simulate_group(plan, group_id, scheme, hw=None, events=None):
    """Time one group.  ``events`` are its off-chip feature events; when
    omitted they are taken from a policy running every group in ``scheme``."""
    hw = hw or HwConfig()
    plan = as_plan(plan)
    io = plan.ios[group_id]
    layers = plan.graph.layers
    head = layers[io.head]
    if events is None:
        pol = ReusePolicy.uniform(len(plan.blocks), scheme)
        events = [e for e in feature_traffic(plan, pol, hw)
                  if plan.owner.get(e[0]) == group_id]
    compute = compute_cycles(head, hw)
    macs = sum(layers[m].macs for m in plan.groups[group_id].layers)
    w_bytes = head.weight_bytes(hw.q_a)
    if scheme == ROW and head.kind in ("conv", "dwconv"):
        w_traffic = w_bytes * head.out_h
    elif scheme in (ROW, FRAME):
        w_traffic = w_bytes
    else:
        raise SimulationError(f"unknown scheme {scheme!r}")
    rb = sum(e[2] for e in events if e[1] == "R")
    wb = sum(e[2] for e in events if e[1] == "W")
    memory = _cdiv(rb + wb + w_traffic, hw.bus_bytes)
    if compute or memory:
        compute += hw.setup_cycles
    return GroupTiming(group_id, io.head, head.kind, scheme, compute, memory,
                       max(compute, memory), macs,
                       sum(e[1] == "R" for e in events),
                       sum(e[1] == "W" for e in events), rb, wb, w_bytes)


def simulate_network(policy, plan, hw=None, assignment=None):
    """Sequentially time every group of ``plan`` under ``policy``.

    ``assignment`` is accepted for interface symmetry; the timing depends
    only on the policy because on-chip placement is free in this model.
    """
    hw = hw or HwConfig()
    plan = as_plan(plan)
    schemes = policy.group_schemes(plan)
    trace = feature_traffic(plan, policy, hw)
    per_group = {}
    for e in trace:
        per_group.setdefault(plan.owner[e[0]], []).append(e)
    timings = tuple(simulate_group(plan, g, schemes[g], hw, per_group.get(g, []))
                    for g in range(len(plan.groups)))
    cycles = sum(t.total for t in timings)
    macs = sum(t.macs for t in timings)
    return LatencyReport(timings, cycles, cycles / hw.freq, macs, tuple(trace))


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    cut_points: tuple
    first_frame_layer: object
    sram: int
    bram18k: int
    feature_dram: int
    total_dram: int
    cycles: int
    forced_row: tuple


def sweep_cut_points(plan, hw=None):
    """Evaluate every cut-point tuple (buffer size, traffic, latency)."""
    hw = hw or HwConfig()
    plan = as_plan(plan)
    points = []
    ranges = [range(d + 1) for d in plan.segments.sub_depths]
    for cp in itertools.product(*ranges):
        policy = ReusePolicy.from_cut_points(plan.segments, cp)
        report, _ = evaluate_policy(plan, policy, hw)
        lat = simulate_network(report.policy, plan, hw)
        first = report.policy.first_frame_layer(plan)
        points.append(SweepPoint(cp, first, report.buffers.sram_total,
                                 report.buffers.bram18k_total,
                                 report.feature_bytes, report.total_bytes,
                                 lat.cycles, report.forced_row))
    return points


def sweep_csv(points):
    lines = ["cut_points,first_frame_layer,sram_bytes,sram_mb,bram18k,"
             "feature_dram_mb,total_dram_mb,cycles,forced_row\n"]
    for p in points:
        cp = "-".join(map(str, p.cut_points))
        first = "" if p.first_frame_layer is None else p.first_frame_layer
        forced = "-".join(map(str, p.forced_row))
        lines.append(f"{cp},{first},{p.sram},{p.sram / MB:.4f},{p.bram18k},"
                     f"{p.feature_dram / MB:.4f},{p.total_dram / MB:.4f},"
                     f"{p.cycles},{forced}\n")
    return "".join(lines)
