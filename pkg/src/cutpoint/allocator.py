"""Static placement of feature tensors in the three on-chip feature buffers.

Frame-reuse groups keep their tensors on-chip.  The allocator walks the groups
in execution order and gives every produced tensor a slot ``(buffer, offset)``:

* a main output goes to offset 0 of the lowest-numbered buffer that is neither
  the group's main input nor its shortcut buffer and whose ``[0, size)`` range
  holds no live tensor (plain chains therefore ping-pong between two buffers
  and a residual block uses the third for its pinned entry tensor);
* tensors produced off-chip and read by a frame group are loaded into a free
  buffer and stay there until their last on-chip reader (a block entry read
  again by the block's element-wise add stays pinned);
* the squeeze-excitation vectors use fixed offsets: the pooled vector sits in
  the depthwise input buffer just past the input tensor, the first FC output
  in the depthwise output buffer past that tensor, and the second FC output
  reuses the pooled vector's slot.

Row-reuse groups stream from and to DRAM (``OFFCHIP``), except for the small
squeeze-excitation vectors, which stay on-chip.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import AllocationError
from .graph_ir import INPUT
from .policy import FRAME, ROW

OFFCHIP = 3
NUM_BUFFERS = 3


def round_up(value, align):
    return -(-value // align) * align if align > 1 else value


@dataclass(frozen=True)
class Slot:
    buffer: int
    offset: int = 0
    size: int = 0

    @property
    def end(self):
        return self.offset + self.size

    @property
    def onchip(self):
        return self.buffer != OFFCHIP

    def overlaps(self, other):
        return (self.buffer == other.buffer and self.onchip
                and self.offset < other.end and other.offset < self.end)


OFF = Slot(OFFCHIP)


@dataclass(frozen=True)
class GroupAssignment:
    group_id: int
    block_id: int
    scheme: str
    inp: Slot
    out: Slot
    shortcut: Optional[Slot] = None
    vector: Optional[Slot] = None
    side: Optional[Slot] = None
    # tensors loaded from DRAM into their slot when this group starts
    loads: tuple = ()
    # the output is also written off-chip (terminal, row consumer, long path)
    spill: bool = False

    @property
    def alloc_in(self):
        return self.inp.buffer

    @property
    def alloc_out(self):
        return self.out.buffer

    @property
    def alloc_shortcut(self):
        return self.shortcut.buffer if self.shortcut is not None else OFFCHIP


@dataclass(frozen=True)
class BufferAssignment:
    groups: tuple
    forced_row: tuple = ()
    layer_group: dict = field(default_factory=dict, compare=False)

    def __getitem__(self, group_id):
        return self.groups[group_id]

    def __len__(self):
        return len(self.groups)

    def for_layer(self, layer_id):
        return self.groups[self.layer_group[layer_id]]

    def buffers_used(self, group_ids):
        used = set()
        for g in group_ids:
            a = self.groups[g]
            for s in (a.inp, a.out, a.shortcut):
                if s is not None and s.onchip:
                    used.add(s.buffer)
        return used

    def peaks(self):
        """Highest byte touched in each buffer."""
        peak = [0] * NUM_BUFFERS
        for a in self.groups:
            for s in (a.inp, a.out, a.shortcut, a.vector, a.side):
                if s is not None and s.onchip:
                    peak[s.buffer] = max(peak[s.buffer], s.end)
        return tuple(peak)

    def records(self, plan):
        """One record per layer for report dumps."""
        rows = []
        for a in self.groups:
            for layer in plan.groups[a.group_id].layers:
                rows.append({
                    "layer": layer, "group": a.group_id, "block": a.block_id,
                    "scheme": a.scheme,
                    "alloc_in": a.alloc_in, "alloc_out": a.alloc_out,
                    "alloc_shortcut": a.alloc_shortcut,
                    "in_offset": a.inp.offset, "out_offset": a.out.offset,
                    "side_offset": a.side.offset if a.side else 0,
                })
        return rows


# --------------------------------------------------------------------------


def se_vectors(plan):
    """Tensors of squeeze-excitation branches (kept on-chip in both schemes)."""
    vecs = set()
    for g, io in zip(plan.groups, plan.ios):
        if g.se_role == "se_gap":
            vecs.update(io.side_outs)
        elif g.se_role in ("se_fc1", "se_fc2"):
            vecs.add(io.out)
    return vecs


def redirected_concats(plan, schemes):
    """Concat groups that are never assembled on-chip.

    A row-reuse concat, a frame-reuse concat none of whose sources is held
    on-chip (long paths and row-reuse producers), and a frame-reuse concat
    none of whose readers is a frame-reuse group are resolved by address
    redirection: producers write into the concatenated tensor in DRAM and
    readers load it from there.
    """
    out = set()
    for gid, io in enumerate(plan.ios):
        if io.kind != "concat":
            continue
        if schemes[gid] == ROW or set(io.concat_in) <= set(io.long_path_in):
            out.add(gid)
            continue
        adjacent = [t for t in io.concat_in if t not in io.long_path_in]
        if all(t != INPUT and (schemes[plan.owner[t]] == ROW or plan.owner[t] in out)
               for t in adjacent):
            out.add(gid)    # nothing to assemble on-chip
            continue
        onchip = False
        for c in plan.graph.consumers(io.out):
            cg = plan.owner[c]
            if schemes[cg] == FRAME and io.out not in plan.ios[cg].long_path_in:
                onchip = True
        if not onchip:
            out.add(gid)
    return out


def onchip_inputs(plan, gid, scheme, vectors, redirected=()):
    """Inputs of group ``gid`` read from on-chip buffers: (role, tensor) pairs."""
    io = plan.ios[gid]
    if gid in redirected:
        return []
    pairs = []
    if io.kind == "concat":
        adjacent = [t for t in io.concat_in if t not in io.long_path_in]
        if adjacent:
            pairs.append(("in", adjacent[0]))
    elif io.main_in is not None:
        pairs.append(("in", io.main_in))
    if io.shortcut_in is not None:
        pairs.append(("shortcut", io.shortcut_in))
    if io.vector_in is not None:
        pairs.append(("vector", io.vector_in))
    if scheme == ROW:
        pairs = [(r, t) for r, t in pairs if t in vectors]
    return pairs


def _spilled(plan, schemes, vectors, redirected):
    """Tensors that must exist off-chip: read by row groups or long paths,
    gathered by a redirected concat, network input, or terminal outputs."""
    graph = plan.graph
    off = {INPUT}
    for gid, io in enumerate(plan.ios):
        off.update(io.long_path_in)
        if gid in redirected:
            off.update(io.concat_in)
        elif schemes[gid] == ROW:
            for t in io.external_inputs:
                if t not in vectors:
                    off.add(t)
    off.update(graph.terminal_outputs())
    return off


def _readers(plan, schemes, vectors, redirected):
    """On-chip reader groups per tensor."""
    readers = {}
    for gid in range(len(plan.groups)):
        for _, t in onchip_inputs(plan, gid, schemes[gid], vectors, redirected):
            readers.setdefault(t, set()).add(gid)
    return readers


class _Memory:
    """Live regions of the three buffers."""

    def __init__(self):
        self.live = {}          # tensor -> Slot

    def free_at(self, slot):
        return not any(s.overlaps(slot) for s in self.live.values())

    def first_free(self, size, exclude=(), order=(0, 1, 2)):
        for b in order:
            if b in exclude:
                continue
            slot = Slot(b, 0, size)
            if self.free_at(slot):
                return slot
        return None

    def first_fit(self, size, align, exclude=(), order=(0, 2, 1)):
        for b in order:
            if b in exclude:
                continue
            ends = sorted({0} | {s.end for s in self.live.values() if s.buffer == b})
            for start in ends:
                slot = Slot(b, round_up(start, align), size)
                if self.free_at(slot):
                    return slot
        return None


def assign_buffers(plan, policy, hw=None):
    """Place every tensor of ``plan`` under ``policy``.

    Raises :class:`AllocationError` naming the block when a frame-reuse
    block needs more simultaneously live tensors than the buffers can hold.
    """
    from .hw import HwConfig
    hw = hw or HwConfig()
    graph = plan.graph
    q = hw.q_a
    bank = hw.bank_bytes
    schemes = policy.group_schemes(plan)
    vectors = se_vectors(plan)
    redirected = redirected_concats(plan, schemes)
    spilled = _spilled(plan, schemes, vectors, redirected)
    readers = _readers(plan, schemes, vectors, redirected)
    size = lambda t: graph.tensor_bytes(t, q)

    mem = _Memory()
    remaining = {t: set(r) for t, r in readers.items()}
    se = {}                 # block-local squeeze-excitation anchors
    out = []
    layer_group = {}

    for gid, group in enumerate(plan.groups):
        for m in group.layers:
            layer_group[m] = gid
        io = plan.ios[gid]
        block = plan.group_block[gid]
        scheme = schemes[gid]

        def fail(msg):
            raise AllocationError(
                f"block {block} (layer {io.head}): {msg}", block)

        slots = {}
        loads = []
        used = set()
        for role, t in onchip_inputs(plan, gid, scheme, vectors, redirected):
            if t in mem.live:
                slot = mem.live[t]
            else:
                slot = mem.first_free(size(t), exclude=used)
                if slot is None:
                    fail(f"no free buffer to load tensor {t}")
                mem.live[t] = slot
                loads.append(t)
            slots[role] = slot
            if role != "vector":
                used.add(slot.buffer)

        inp = slots.get("in", OFF)
        shortcut = slots.get("shortcut")
        vector = slots.get("vector")
        if scheme == ROW and io.shortcut_in is not None and shortcut is None:
            shortcut = OFF

        side = None
        o_size = size(io.out)
        if io.out in vectors:
            # SE vectors: fixed offsets in frame mode, first fit in row mode
            slot = None
            if scheme == FRAME and group.se_role == "se_fc1" and "dw_out" in se:
                b, s = se["dw_out"]
                slot = Slot(b, round_up(s, bank), o_size)
            elif scheme == FRAME and group.se_role == "se_fc2" and "gap" in se:
                slot = replace(se["gap"], size=o_size)
            if slot is None or not mem.free_at(slot) or slot.buffer == inp.buffer:
                slot = mem.first_fit(o_size, bank, exclude={inp.buffer})
            if slot is None:
                fail("no room for squeeze-excitation vector")
            o_slot = slot
        elif scheme == ROW or gid in redirected:
            o_slot = OFF
        else:
            o_slot = mem.first_free(o_size, exclude=used)
            if o_slot is None:
                fail(f"more than {NUM_BUFFERS} live tensors; "
                     f"cannot place output of layer {io.out}")

        if group.se_role == "se_gap":
            gap = io.side_outs[0]
            g_size = size(gap)
            slot = None
            if scheme == FRAME and inp.onchip:
                slot = Slot(inp.buffer, round_up(inp.end, bank), g_size)
                if not mem.free_at(slot) or slot.overlaps(o_slot):
                    slot = None
            if slot is None:
                exclude = {o_slot.buffer} if scheme == FRAME else set()
                slot = mem.first_fit(g_size, bank, exclude=exclude)
            if slot is None:
                fail("no room for the pooled squeeze branch")
            side = slot
            se["gap"] = slot
            se["dw_out"] = (o_slot.buffer, o_slot.end)

        # reads done: release tensors with no later on-chip reader
        for _, t in onchip_inputs(plan, gid, scheme, vectors, redirected):
            r = remaining.get(t)
            if r is not None:
                r.discard(gid)
                if not r:
                    mem.live.pop(t, None)

        outs = [(io.out, o_slot)]
        if side is not None:
            outs.append((io.side_outs[0], side))
        for t, slot in outs:
            if slot.onchip and remaining.get(t):
                mem.live[t] = slot

        out.append(GroupAssignment(
            gid, block, scheme, inp, o_slot, shortcut, vector, side,
            tuple(loads), scheme == FRAME and io.out in spilled))
    return BufferAssignment(tuple(out), (), layer_group)


def assign_with_fallback(plan, policy, hw=None):
    """Like :func:`assign_buffers`, but blocks that do not fit are forced to
    row-reuse.  Returns ``(assignment, effective_policy)``."""
    forced = []
    while True:
        try:
            a = assign_buffers(plan, policy, hw)
        except AllocationError as exc:
            if exc.block_id is None or exc.block_id in forced:
                raise
            forced.append(exc.block_id)
            policy = policy.with_row([exc.block_id])
            continue
        return replace(a, forced_row=tuple(forced)), policy


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    layer: int
    buffer: Optional[int]
    message: str

    def __str__(self):
        where = f" buffer {self.buffer}" if self.buffer is not None else ""
        return f"layer {self.layer}{where}: {self.message}"


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple
    peaks: tuple

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_assignment(assignment, plan, policy):
    """Replay ``assignment`` against a three-slot memory model.

    Checks that frame groups never read and write the same buffer, that every
    on-chip read finds its tensor where the assignment says, that no write
    lands on a tensor that still has readers, and that off-chip reads only
    touch tensors that were written off-chip.  Never raises.
    """
    v = []
    try:
        schemes = policy.group_schemes(plan)
    except ValueError as exc:
        return ValidationResult((Violation(-1, None, str(exc)),), (0, 0, 0))
    if len(assignment.groups) != len(plan.groups):
        return ValidationResult(
            (Violation(-1, None, "assignment does not cover every group"),),
            (0, 0, 0))
    graph = plan.graph
    vectors = se_vectors(plan)
    redirected = redirected_concats(plan, schemes)
    readers = _readers(plan, schemes, vectors, redirected)
    remaining = {t: set(r) for t, r in readers.items()}
    live = {}               # tensor -> Slot
    clobbered = set()
    offchip = {INPUT}
    peak = [0] * NUM_BUFFERS

    def touch(slot):
        if slot is not None and slot.onchip:
            if not 0 <= slot.buffer < NUM_BUFFERS:
                return
            peak[slot.buffer] = max(peak[slot.buffer], slot.end)

    for gid, a in enumerate(assignment.groups):
        io = plan.ios[gid]
        layer = io.head
        scheme = schemes[gid]
        if a.scheme != scheme:
            v.append(Violation(layer, None,
                               f"scheme {a.scheme} but policy says {scheme}"))
        for s in (a.inp, a.out, a.shortcut, a.vector, a.side):
            if s is not None and not 0 <= s.buffer <= OFFCHIP:
                v.append(Violation(layer, s.buffer, "no such buffer"))
        if scheme == FRAME and a.inp.onchip and a.inp.buffer == a.out.buffer:
            v.append(Violation(layer, a.out.buffer,
                               "frame group reads and writes the same buffer"))
        if a.shortcut is not None and a.shortcut.onchip \
                and a.shortcut.buffer == a.out.buffer:
            v.append(Violation(layer, a.out.buffer,
                               "output buffer holds the shortcut being read"))

        role_slot = {"in": a.inp, "shortcut": a.shortcut, "vector": a.vector}
        loaded_here = set()
        for role, t in onchip_inputs(plan, gid, scheme, vectors, redirected):
            slot = role_slot.get(role)
            if slot is None or not slot.onchip:
                v.append(Violation(layer, None,
                                   f"tensor {t} must be read from a buffer"))
                continue
            touch(slot)
            if t in a.loads and live.get(t) == slot and t in loaded_here:
                continue        # the same tensor in a second role
            if t in a.loads:
                loaded_here.add(t)
                if t not in offchip:
                    v.append(Violation(layer, slot.buffer,
                                       f"loads tensor {t} that was never "
                                       "written off-chip"))
                clash = [u for u, s in live.items() if s.overlaps(slot)
                         and remaining.get(u)]
                for u in clash:
                    v.append(Violation(layer, slot.buffer,
                                       f"load overwrites live tensor {u}"))
                    clobbered.add(u)
                    live.pop(u)
                live[t] = slot
            elif t in clobbered:
                pass
            elif live.get(t) != slot:
                v.append(Violation(layer, slot.buffer,
                                   f"tensor {t} is not live at this slot"))

        on_inputs = [u for _, u in onchip_inputs(plan, gid, scheme, vectors,
                                                 redirected)]
        # off-chip reads (a redirected concat only renames DRAM regions)
        for t in io.external_inputs:
            if gid in redirected:
                continue
            if t not in on_inputs and t not in offchip:
                v.append(Violation(layer, OFFCHIP,
                                   f"reads tensor {t} from DRAM before it is "
                                   "written there"))
        for t in io.long_path_in:
            if t not in offchip:
                v.append(Violation(layer, OFFCHIP,
                                   f"long-path tensor {t} not in DRAM"))

        for t in on_inputs:
            r = remaining.get(t)
            if r is not None:
                r.discard(gid)
                if not r:
                    live.pop(t, None)

        outs = [(io.out, a.out)]
        if a.side is not None and io.side_outs:
            outs.append((io.side_outs[0], a.side))
        for t, slot in outs:
            if slot.onchip:
                touch(slot)
                for u, s in list(live.items()):
                    if s.overlaps(slot) and remaining.get(u):
                        v.append(Violation(layer, slot.buffer,
                                           f"overwrites live tensor {u}"))
                        clobbered.add(u)
                        live.pop(u)
                if remaining.get(t):
                    live[t] = slot
            if gid in redirected:
                missing = [u for u in io.concat_in if u not in offchip]
                if missing:
                    v.append(Violation(layer, OFFCHIP,
                                       f"redirected concat gathers {missing} "
                                       "that are not in DRAM"))
                offchip.add(t)
            elif not slot.onchip or (scheme == FRAME and a.spill):
                offchip.add(t)
            elif scheme == ROW and t not in vectors:
                offchip.add(t)
        if scheme == ROW:
            offchip.update(t for t in io.outputs if t not in vectors)

    for t in graph.terminal_outputs():
        if t not in offchip:
            v.append(Violation(t, None, "network output never written off-chip"))
    return ValidationResult(tuple(v), tuple(peak))
