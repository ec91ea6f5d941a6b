"""Cut-point search under MAC and BRAM budgets.

Candidates are ranked by simulated latency, then by off-chip feature
traffic, then by SRAM size, then by the cut-point tuple itself, so the result
never depends on evaluation order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

from .allocator import validate_assignment
from .cost_model import as_plan, evaluate_policy
from .errors import InfeasibleError
from .hw import HwConfig
from .latency_sim import simulate_network
from .policy import FRAME, ROW, ReusePolicy

ORACLE_MAX_BLOCKS = 14


@dataclass(frozen=True)
class Constraints:
    """Budgets of the search.  ``None`` takes the value from the HwConfig."""
    mac_budget: Optional[int] = None
    bram_budget: Optional[int] = None

    def resolve(self, hw):
        alpha = hw.mac_budget if self.mac_budget is None else self.mac_budget
        beta = hw.bram_budget if self.bram_budget is None else self.bram_budget
        return alpha, beta


@dataclass(frozen=True)
class Candidate:
    key: tuple              # (cycles, feature bytes, sram, tuple)
    policy: ReusePolicy
    report: object          # CostReport
    latency: object         # LatencyReport
    assignment: object

    @property
    def cycles(self):
        return self.latency.cycles


@dataclass(frozen=True)
class SearchResult:
    best: Candidate
    evaluated: int
    feasible: int
    # oracle only: best among the policies a cut-point tuple can express
    single_switch: Optional[Candidate] = None

    @property
    def policy(self):
        return self.best.policy

    @property
    def report(self):
        return self.best.report

    @property
    def latency(self):
        return self.best.latency


def _evaluate(plan, policy, hw, key_tail):
    report, assignment = evaluate_policy(plan, policy, hw)
    lat = simulate_network(report.policy, plan, hw, assignment)
    report.latency_cycles = lat.cycles
    report.gops = lat.gops
    key = (lat.cycles, report.feature_bytes, report.buffers.sram_total, key_tail)
    return Candidate(key, report.policy, report, lat, assignment)


def _check_mac(hw, alpha):
    if hw.n_mac > alpha:
        raise InfeasibleError(
            f"MAC array of {hw.n_mac} exceeds the budget of {alpha}",
            "mac_budget", hw.n_mac, alpha)


def _pick(candidates, beta):
    best = None
    tightest = None
    n_feasible = 0
    for c in candidates:
        bram = c.report.buffers.bram18k_total
        if bram >= beta:
            if tightest is None or bram < tightest:
                tightest = bram
            continue
        n_feasible += 1
        if best is None or c.key < best.key:
            best = c
    return best, tightest, n_feasible


def search_cut_points(plan, hw=None, constraints=None):
    """Exhaustive search over all cut-point tuples.

    Feasible means ``bram18k_total < beta`` and ``n_mac <= alpha``; weights
    are read once and features at most once under every candidate by
    construction.  Blocks the allocator cannot fit into three buffers run in
    row-reuse.
    """
    hw = hw or HwConfig()
    plan = as_plan(plan)
    alpha, beta = (constraints or Constraints()).resolve(hw)
    _check_mac(hw, alpha)
    ranges = [range(d + 1) for d in plan.segments.sub_depths]
    cands = [_evaluate(plan, ReusePolicy.from_cut_points(plan.segments, cp), hw, cp)
             for cp in itertools.product(*ranges)]
    best, tightest, n = _pick(cands, beta)
    if best is None:
        raise InfeasibleError(
            f"no cut-point tuple fits {beta} BRAM18K (smallest needs {tightest})",
            "bram_budget", tightest, beta)
    _revalidate(plan, best, hw, alpha, beta)
    return SearchResult(best, len(cands), n)


def exhaustive_policy_oracle(plan, hw=None, constraints=None,
                             max_blocks=ORACLE_MAX_BLOCKS):
    """Best policy over all ``2^N`` per-block scheme assignments.

    The result also carries the best candidate among the assignments that a
    cut-point tuple can express, which is what :func:`search_cut_points`
    should find; the latency difference to the global best is the cost of
    the single-switch relaxation.
    """
    hw = hw or HwConfig()
    plan = as_plan(plan)
    n = len(plan.blocks)
    if n > max_blocks:
        raise ValueError(f"oracle refuses {n} blocks (limit {max_blocks})")
    alpha, beta = (constraints or Constraints()).resolve(hw)
    _check_mac(hw, alpha)
    ranges = [range(d + 1) for d in plan.segments.sub_depths]
    expressible = {ReusePolicy.from_cut_points(plan.segments, cp).schemes
                   for cp in itertools.product(*ranges)}
    cands, single = [], []
    for bits in itertools.product((FRAME, ROW), repeat=n):
        tail = tuple(int(s == ROW) for s in bits)
        c = _evaluate(plan, ReusePolicy(bits), hw, tail)
        cands.append(c)
        if bits in expressible:
            single.append(c)
    best, tightest, feasible = _pick(cands, beta)
    if best is None:
        raise InfeasibleError(
            f"no policy fits {beta} BRAM18K (smallest needs {tightest})",
            "bram_budget", tightest, beta)
    _revalidate(plan, best, hw, alpha, beta)
    return SearchResult(best, len(cands), feasible, _pick(single, beta)[0])


def minimum_buffer_search(plan, hw=None):
    """Smallest raw SRAM over all cut-point tuples.

    Every candidate reads weights once and features at most once, so all
    of them satisfy the traffic constraints.  Ties go to the smaller
    cut-point tuple (more frame-reuse).
    """
    hw = hw or HwConfig()
    plan = as_plan(plan)
    best = None
    ranges = [range(d + 1) for d in plan.segments.sub_depths]
    for cp in itertools.product(*ranges):
        policy = ReusePolicy.from_cut_points(plan.segments, cp)
        report, assignment = evaluate_policy(plan, policy, hw)
        key = (report.buffers.sram_total, cp)
        if best is None or key < best[0]:
            best = (key, report, assignment)
    _, report, assignment = best
    lat = simulate_network(report.policy, plan, hw, assignment)
    report.latency_cycles = lat.cycles
    report.gops = lat.gops
    return Candidate((lat.cycles, report.feature_bytes, report.buffers.sram_total,
                      report.policy.cut_points),
                     report.policy, report, lat, assignment)


def _revalidate(plan, cand, hw, alpha, beta):
    """Re-check the winner independently of the ranking code."""
    if not (cand.report.buffers.bram18k_total < beta and hw.n_mac <= alpha):
        raise AssertionError("selected policy violates its constraints")
    result = validate_assignment(cand.assignment, plan, cand.policy)
    if not result.ok:
        raise AssertionError(f"selected assignment is invalid: {result.violations[0]}")
