"""Reuse policies: which weight-reuse scheme every block runs in."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

ROW = "row"
FRAME = "frame"
SCHEMES = (ROW, FRAME)


@dataclass(frozen=True)
class ReusePolicy:
    """Per-block scheme assignment, optionally derived from cut-points.

    ``cut_points[j]`` is the number of row-reuse blocks in segment ``j``.
    Row-reuse occupies the large-feature end of each segment: the head of a
    decreasing segment, the tail of an increasing one.  A cut-point of 0 is
    all frame-reuse and ``N_j`` is all row-reuse, so moving a cut-point
    towards 0 always hands more blocks to frame-reuse.
    """
    schemes: tuple
    cut_points: Optional[tuple] = None

    def __post_init__(self):
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ValueError(f"unknown scheme(s) {sorted(set(bad))}")

    @classmethod
    def from_cut_points(cls, segments, cut_points):
        cut_points = tuple(int(c) for c in cut_points)
        if len(cut_points) != segments.k:
            raise ValueError(f"expected {segments.k} cut-points, got {len(cut_points)}")
        schemes = []
        for seg, cut in zip(segments.segments, cut_points):
            if not 0 <= cut <= seg.depth:
                raise ValueError(f"cut-point {cut} outside [0, {seg.depth}]")
            for pos in range(seg.depth):
                if seg.direction == "decreasing":
                    row = pos < cut
                else:
                    row = pos >= seg.depth - cut
                schemes.append(ROW if row else FRAME)
        return cls(tuple(schemes), cut_points)

    @classmethod
    def uniform(cls, n_blocks, scheme):
        return cls((scheme,) * n_blocks)

    @classmethod
    def all_row(cls, plan):
        return cls.from_cut_points(plan.segments, plan.segments.sub_depths)

    @classmethod
    def all_frame(cls, plan):
        return cls.from_cut_points(plan.segments, (0,) * plan.segments.k)

    def __len__(self):
        return len(self.schemes)

    def scheme(self, block_id):
        return self.schemes[block_id]

    def group_schemes(self, plan):
        if len(self.schemes) != len(plan.blocks):
            raise ValueError(f"policy covers {len(self.schemes)} blocks, "
                             f"network has {len(plan.blocks)}")
        return [self.schemes[b] for b in plan.group_block]

    def with_row(self, block_ids):
        """Copy with ``block_ids`` forced to row-reuse (cut-points dropped)."""
        block_ids = set(block_ids)
        if not block_ids:
            return self
        s = tuple(ROW if i in block_ids else x for i, x in enumerate(self.schemes))
        return ReusePolicy(s, None)

    def first_frame_layer(self, plan):
        """Head layer id of the first frame-reuse block, or None."""
        for b, s in zip(plan.blocks, self.schemes):
            if s == FRAME:
                return plan.groups[b.first].head
        return None
