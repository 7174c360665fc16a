"""Alternating-optimization baseline.

Variables are split into communication powers (group 1) and
{beacon power, trajectory} (group 2).  Each group is improved with the other
held fixed, reusing the CCCP subproblem with the other group's variables
pinned: a single solve for the powers, up to ``inner_iters`` CCCP steps for
the motion group.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import cccp
from .evaluation import objective
from .scenario import Scenario

log = logging.getLogger(__name__)

POWER_GROUP = ("trajectory", "beacon")     # frozen while updating powers
MOTION_GROUP = ("powers",)                 # frozen while updating P_s and q


@dataclass
class AoOptions:
    tol: float = 1e-5
    max_outer: int = 50
    inner_iters: int = 100
    cccp: cccp.CccpOptions | None = None


def solve(sc: Scenario, opts: AoOptions | None = None, init: cccp.CccpState | None = None):
    """Returns (trajectory, powers, metrics, history) with one history entry per group step."""
    opts = opts or AoOptions()
    copts = opts.cccp or cccp.CccpOptions()
    gamma = sc.gamma_weight if copts.gamma is None else copts.gamma
    state = init if init is not None else cccp.initialize(sc, copts)
    history = [state.value(gamma)]
    for outer in range(opts.max_outer):
        start = state.value(gamma)
        # powers: one convex solve with the motion group pinned; motion: inner CCCP
        for frozen, cap in ((POWER_GROUP, 1), (MOTION_GROUP, opts.inner_iters)):
            state.history = [state.value(gamma)]
            state, _ = cccp.run(state, sc, copts, freeze=frozen, max_iters=cap)
            history.append(state.value(gamma))
        change = (state.value(gamma) - start) / max(abs(start), 1e-12)
        log.debug("AO outer %d: objective %.6f (change %.2e)", outer, state.value(gamma), change)
        if change < opts.tol:
            break
    traj, pw = state.trajectory, state.powers
    return traj, pw, objective(traj, pw, sc, gamma), history
