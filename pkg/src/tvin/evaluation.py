"""%Opt / %Suc metrics, greedy rollouts and comparison tables.

A *policy* here is anything with ``tables(maps) -> list[(O, m, m) int array]``
(greedy action per state) -- see :class:`ExpertTablePolicy` and
:class:`tvin.vin.ModelPolicy` -- or a plain callable ``grid -> table``.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from .gridworld import AgentState, Dataset, DomainSpec, GridMap, at_goal, shortest_path_policy, step


class Outcome(enum.Enum):
    REACHED_GOAL = "ReachedGoal"
    HIT_OBSTACLE = "HitObstacle"
    STEP_LIMIT = "StepLimit"


@dataclass
class RolloutResult:
    path: list[AgentState]
    actions: list[int]
    outcome: Outcome

    @property
    def steps(self) -> int:
        return len(self.actions)


@dataclass
class EvalReport:
    pct_opt: float
    pct_suc: float
    n_states: int
    n_trajectories: int
    per_map: list[tuple[float, float]] = field(default_factory=list)


class ExpertTablePolicy:
    def __init__(self, domain: DomainSpec):
        self.domain = domain

    def __call__(self, grid: GridMap) -> np.ndarray:
        return shortest_path_policy(self.domain, grid).opt_action

    def tables(self, maps: Sequence[GridMap]) -> list[np.ndarray]:
        return [self(g) for g in maps]


class LabelPolicy:
    """Replays a dataset's own expert labels (tables built from its experts)."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset

    def tables(self, maps: Sequence[GridMap]) -> list[np.ndarray]:
        return [e.opt_action for e in self.dataset.experts()]


def policy_tables(policy, maps: Sequence[GridMap]) -> list[np.ndarray]:
    if hasattr(policy, "tables"):
        return list(policy.tables(maps))
    return [np.asarray(policy(g)) for g in maps]


def _opt_hits(tables: Sequence[np.ndarray], test: Dataset, strict: bool) -> np.ndarray:
    """Per-record bool: was the predicted action (co-)optimal?"""
    r = test.records
    pred = np.array([tables[k][o, i, j] for k, i, j, o in zip(r["map"], r["i"], r["j"], r["o"])],
                    dtype=np.int64)
    if strict:
        return pred == r["action"]
    experts = test.experts()
    return np.array([experts[k].co_optimal[o, i, j, a] for k, i, j, o, a in
                     zip(r["map"], r["i"], r["j"], r["o"], pred)], dtype=bool)


def percent_optimal(policy, test: Dataset, strict: bool = False, all_states: bool = False,
                    tables: Sequence[np.ndarray] | None = None) -> float:
    """Share of test states whose predicted action is shortest-path optimal.

    Any co-optimal action counts unless ``strict``, which compares against
    the single recorded label.  ``all_states`` scores every reachable
    non-goal state of each map instead of the sampled trajectory states.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    tables = tables if tables is not None else policy_tables(policy, test.maps)
    if all_states:
        hit = total = 0
        for k, ex in enumerate(test.experts()):
            mask = ex.dist > 0
            pred = tables[k]
            if strict:
                ok = pred == ex.opt_action
            else:
                ok = np.take_along_axis(ex.co_optimal, np.clip(pred, 0, None)[..., None], axis=-1)[..., 0]
            hit += int((ok & mask).sum())
            total += int(mask.sum())
        return 100.0 * hit / total
    return 100.0 * float(_opt_hits(tables, test, strict).mean())


def rollout(policy, domain: DomainSpec, grid: GridMap, start: AgentState, max_steps: int,
            bounce: bool = False, table: np.ndarray | None = None) -> RolloutResult:
    """Greedy rollout; a blocked move ends the episode unless ``bounce``."""
    if not grid.free(start.i, start.j) or not 0 <= start.o < domain.orientation_count:
        raise ValueError(f"invalid start state {start}")
    table = table if table is not None else policy_tables(policy, [grid])[0]
    s = start
    path, acts = [s], []
    while True:
        if at_goal(domain, grid, s):
            return RolloutResult(path, acts, Outcome.REACHED_GOAL)
        if len(acts) >= max_steps:
            return RolloutResult(path, acts, Outcome.STEP_LIMIT)
        a = int(table[s.o, s.i, s.j])
        nxt, blocked = step(domain, grid, s, a)
        acts.append(a)
        if blocked and not bounce:
            return RolloutResult(path, acts, Outcome.HIT_OBSTACLE)
        s = nxt
        path.append(s)


def _successes(tables: Sequence[np.ndarray], test: Dataset, max_steps: int | None, bounce: bool,
               trace: TextIO | None) -> list[tuple[int, bool]]:
    starts = test.trajectory_starts()
    if not starts:
        raise ValueError("no test trajectories")
    max_steps = 8 * test.m if max_steps is None else max_steps
    out = []
    for k, s in starts:
        res = rollout(None, test.domain, test.maps[k], s, max_steps, bounce, table=tables[k])
        out.append((k, res.outcome is Outcome.REACHED_GOAL))
        if trace is not None:
            trace.write(json.dumps({
                "map": k, "start": [s.i, s.j, s.o], "outcome": res.outcome.value,
                "steps": res.steps, "path": [[p.i, p.j, p.o] for p in res.path],
            }) + "\n")
    return out


def percent_success(policy, test: Dataset, max_steps: int | None = None, bounce: bool = False,
                    tables: Sequence[np.ndarray] | None = None,
                    trace: TextIO | None = None) -> float:
    """Share of test trajectories whose greedy rollout reaches the goal.

    ``max_steps`` defaults to ``8 * m``.  ``trace`` receives one JSON line per
    rollout.
    """
    tables = tables if tables is not None else policy_tables(policy, test.maps)
    wins = _successes(tables, test, max_steps, bounce, trace)
    return 100.0 * sum(w for _, w in wins) / len(wins)


def evaluate(policy, test: Dataset, max_steps: int | None = None, strict: bool = False,
             bounce: bool = False, trace: TextIO | None = None) -> EvalReport:
    if len(test) == 0:
        raise ValueError("empty test set")
    tables = policy_tables(policy, test.maps)
    hits = _opt_hits(tables, test, strict)
    wins = _successes(tables, test, max_steps, bounce, trace)
    per_map = []
    rec_map = test.records["map"]
    for k in range(len(test.maps)):
        h = hits[rec_map == k]
        w = [ok for kk, ok in wins if kk == k]
        per_map.append((100.0 * float(h.mean()) if len(h) else float("nan"),
                        100.0 * sum(w) / len(w) if w else float("nan")))
    return EvalReport(
        pct_opt=100.0 * float(hits.mean()),
        pct_suc=100.0 * sum(w for _, w in wins) / len(wins),
        n_states=len(test),
        n_trajectories=len(wins),
        per_map=per_map,
    )


CSV_COLUMNS = ["model", "N", "source", "target", "pct_opt", "pct_suc"]


@dataclass
class CompareRow:
    model: str
    N: int | str
    source: str
    target: str
    report: EvalReport

    def csv_row(self) -> list:
        return [self.model, self.N, self.source, self.target,
                f"{self.report.pct_opt:.2f}", f"{self.report.pct_suc:.2f}"]


def compare(models: Sequence[tuple[str, object]], test: Dataset, N: int | str = "", source: str = "",
            target: str | None = None, max_steps: int | None = None) -> list[CompareRow]:
    """One evaluation row per named policy, in the given order."""
    rows = []
    for name, policy in models:
        dom = getattr(getattr(policy, "model", None), "domain", None)
        if dom is not None and dom.id != test.domain.id:
            raise ValueError(f"model {name} is for {dom.name}, test set is {test.domain.name}")
        rows.append(CompareRow(name, N, source, target or f"{test.domain.name}-{test.m}",
                               evaluate(policy, test, max_steps)))
    return rows


def write_compare_csv(rows: Sequence[CompareRow], out: TextIO, header_note: str | None = None) -> None:
    if header_note:
        out.write(f"# {header_note}\n")
    w = csv.writer(out)
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.csv_row())
