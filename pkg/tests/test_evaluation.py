import io
import json

import numpy as np
import pytest

from tvin import evaluation as ev
from tvin import gridworld as gw
from tvin.gridworld import AgentState, GridMap


def empty_map(m, goal):
    return GridMap(np.zeros((m, m), dtype=bool), goal)


@pytest.fixture(scope="module", params=["news", "moore", "drive"])
def test_set(request):
    dom = gw.get_domain(request.param)
    return gw.sample_dataset(dom, 6, 4, gw.MapGen(9), 21, split="test")


class ConstPolicy:
    def __init__(self, domain, a):
        self.domain, self.a = domain, a

    def __call__(self, grid):
        return np.full((self.domain.orientation_count, grid.m, grid.m), self.a)


# -- %Opt -------------------------------------------------------------------------


def test_expert_scores_100(test_set):
    pol = ev.ExpertTablePolicy(test_set.domain)
    assert ev.percent_optimal(pol, test_set) == 100.0
    assert ev.percent_optimal(pol, test_set, strict=True) == 100.0
    assert ev.percent_optimal(pol, test_set, all_states=True) == 100.0
    assert ev.percent_success(pol, test_set) == 100.0


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["obstacles", "maze"])
def test_expert_100_across_seeds(seed, kind):
    for dom in (gw.NEWS, gw.MOORE, gw.DRIVE):
        ds = gw.sample_dataset(dom, 3, 3, gw.MapGen(9, kind=kind), seed)
        rep = ev.evaluate(ev.ExpertTablePolicy(dom), ds)
        assert (rep.pct_opt, rep.pct_suc) == (100.0, 100.0)


def test_label_policy_scores_100(test_set):
    rep = ev.evaluate(ev.LabelPolicy(test_set), test_set)
    assert (rep.pct_opt, rep.pct_suc) == (100.0, 100.0)


def test_three_of_four():
    grid = empty_map(5, (0, 4))
    recs = np.zeros(4, dtype=gw._SAMPLE_DTYPE)
    # states in column 4 below the goal: only North is optimal
    recs["i"] = [1, 2, 3, 4]
    recs["j"] = 4
    recs["action"] = gw.NEWS.action_index("North")
    ds = gw.Dataset(gw.NEWS, [grid], recs, "test")
    table = np.full((1, 5, 5), gw.NEWS.action_index("North"))
    table[0, 3, 4] = gw.NEWS.action_index("West")
    assert ev.percent_optimal(None, ds, tables=[table]) == 75.0


def test_random_policy_matches_co_optimal_fraction():
    """Averaging every constant policy = expected score of a uniform random one."""
    maps = [empty_map(7, (k, 6 - k)) for k in range(4)]
    ds = gw.sample_dataset(gw.NEWS, 4, 5, None, 3, maps=maps)
    scores = [ev.percent_optimal(ConstPolicy(gw.NEWS, a), ds) for a in range(4)]
    experts = ds.experts()
    r = ds.records
    frac = np.mean([experts[k].co_optimal[o, i, j].sum() / 4
                    for k, i, j, o in zip(r["map"], r["i"], r["j"], r["o"])])
    assert np.mean(scores) == pytest.approx(100 * frac)


def test_co_optimal_credit_vs_strict():
    grid = empty_map(5, (0, 4))
    recs = np.zeros(1, dtype=gw._SAMPLE_DTYPE)
    recs[0] = (0, 4, 0, 0, gw.NEWS.action_index("East"))  # from (4,0) East and North are both optimal
    ds = gw.Dataset(gw.NEWS, [grid], recs, "test")
    north = np.full((1, 5, 5), gw.NEWS.action_index("North"))
    assert ev.percent_optimal(None, ds, tables=[north]) == 100.0
    assert ev.percent_optimal(None, ds, tables=[north], strict=True) == 0.0


def test_empty_test_set():
    grid = empty_map(5, (0, 4))
    ds = gw.Dataset(gw.NEWS, [grid], np.zeros(0, dtype=gw._SAMPLE_DTYPE), "test")
    with pytest.raises(ValueError):
        ev.percent_optimal(ev.ExpertTablePolicy(gw.NEWS), ds)
    with pytest.raises(ValueError):
        ev.percent_success(ev.ExpertTablePolicy(gw.NEWS), ds)


# -- rollouts ----------------------------------------------------------------------


def test_rollout_start_at_goal():
    grid = empty_map(5, (2, 2))
    res = ev.rollout(ev.ExpertTablePolicy(gw.NEWS), gw.NEWS, grid, AgentState(2, 2), 10)
    assert res.outcome is ev.Outcome.REACHED_GOAL and res.steps == 0


def test_rollout_wall_hit():
    grid = empty_map(5, (4, 4))
    res = ev.rollout(ConstPolicy(gw.NEWS, gw.NEWS.action_index("North")), gw.NEWS, grid, AgentState(0, 0), 10)
    assert res.outcome is ev.Outcome.HIT_OBSTACLE and res.steps == 1


def test_rollout_bounce_then_step_limit():
    grid = empty_map(5, (4, 4))
    res = ev.rollout(ConstPolicy(gw.NEWS, gw.NEWS.action_index("North")), gw.NEWS, grid, AgentState(0, 0), 7,
                     bounce=True)
    assert res.outcome is ev.Outcome.STEP_LIMIT and res.steps == 7


def test_rollout_invalid_start():
    obs = np.zeros((5, 5), dtype=bool)
    obs[1, 1] = True
    with pytest.raises(ValueError):
        ev.rollout(ev.ExpertTablePolicy(gw.NEWS), gw.NEWS, GridMap(obs, (4, 4)), AgentState(1, 1), 5)


def test_expert_rollout_takes_dist_steps(test_set):
    dom = test_set.domain
    for k, s in test_set.trajectory_starts():
        grid = test_set.maps[k]
        dist = test_set.experts()[k].dist[s.o, s.i, s.j]
        res = ev.rollout(ev.ExpertTablePolicy(dom), dom, grid, s, 8 * grid.m)
        assert res.outcome is ev.Outcome.REACHED_GOAL
        assert res.steps == dist


def test_rollout_paths_replay(test_set):
    dom = test_set.domain
    rng = np.random.default_rng(0)
    for k, s in test_set.trajectory_starts()[:10]:
        grid = test_set.maps[k]
        table = rng.integers(dom.n_actions, size=(dom.orientation_count, grid.m, grid.m))
        res = ev.rollout(None, dom, grid, s, 20, table=table, bounce=bool(k % 2))
        cur = res.path[0]
        for t, a in enumerate(res.actions):
            nxt, blocked = gw.step(dom, grid, cur, a)
            if blocked and res.outcome is ev.Outcome.HIT_OBSTACLE and t == len(res.actions) - 1:
                assert len(res.path) == len(res.actions)
                break
            assert res.path[t + 1] == nxt
            cur = nxt
        if res.outcome is ev.Outcome.REACHED_GOAL:
            assert gw.at_goal(dom, grid, res.path[-1])


def test_success_zero_step_limit(test_set):
    assert ev.percent_success(ev.ExpertTablePolicy(test_set.domain), test_set, max_steps=0) == 0.0


def test_success_monotone_in_max_steps(test_set):
    dom = test_set.domain
    rng = np.random.default_rng(1)
    # a sloppy expert: random action on a fifth of states
    tables = []
    for ex in test_set.experts():
        t = ex.opt_action.copy()
        noise = rng.random(t.shape) < 0.2
        t[noise] = rng.integers(dom.n_actions, size=int(noise.sum()))
        tables.append(t)
    vals = [ev.percent_success(None, test_set, max_steps=n, tables=tables, bounce=True) for n in range(0, 40, 3)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_trace_lines(test_set):
    buf = io.StringIO()
    ev.percent_success(ev.ExpertTablePolicy(test_set.domain), test_set, trace=buf)
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert len(lines) == len(test_set.trajectory_starts())
    assert all(x["outcome"] == "ReachedGoal" for x in lines)
    assert lines[0]["steps"] == len(lines[0]["path"]) - 1


# -- reports ------------------------------------------------------------------------


def test_evaluate_per_map_and_purity(test_set):
    rng = np.random.default_rng(2)
    dom = test_set.domain
    tables = [rng.integers(dom.n_actions, size=(dom.orientation_count, test_set.m, test_set.m))
              for _ in test_set.maps]

    class Fixed:
        def tables(self, maps):
            return tables

    a = ev.evaluate(Fixed(), test_set)
    b = ev.evaluate(Fixed(), test_set)
    assert a == b
    assert len(a.per_map) == len(test_set.maps)
    assert 0 <= a.pct_opt <= 100 and 0 <= a.pct_suc <= 100
    counts = np.bincount(test_set.records["map"], minlength=len(test_set.maps))
    weighted = sum(c * o for c, (o, _) in zip(counts, a.per_map)) / counts.sum()
    assert weighted == pytest.approx(a.pct_opt)


def test_compare_rows_and_csv(test_set):
    dom = test_set.domain
    rows = ev.compare([("expert", ev.ExpertTablePolicy(dom)), ("const", ConstPolicy(dom, 0))], test_set,
                      N=200, source="news-9")
    assert [r.model for r in rows] == ["expert", "const"]
    buf = io.StringIO()
    ev.write_compare_csv(rows, buf, header_note="epochs=30, final-epoch metrics")
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == ",".join(ev.CSV_COLUMNS)
    assert lines[2] == f"expert,200,news-9,{dom.name}-9,100.00,100.00"


def test_compare_domain_mismatch(test_set):
    from tvin import vin
    other = gw.NEWS if test_set.domain.id != gw.DomainId.NEWS else gw.MOORE
    model = vin.VinModel(vin.VinConfig(other, K=2, h=4))
    with pytest.raises(ValueError, match="test set"):
        ev.compare([("m", vin.ModelPolicy(model))], test_set)
