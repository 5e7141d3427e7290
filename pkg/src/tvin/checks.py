"""Self-checks: finite-difference gradient suite and exact-VI equivalence.

Both run in float64.  The VI oracle sets the planner's kernels by hand so that
one conv sweep is exactly a Bellman backup with discount ``gamma``; leaving
the grid lands in an absorbing zero-value state, which is what the
convolution's zero padding encodes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import diffkit as dk
from . import gridworld as gw
from . import transfer as tr
from . import vin

OP_TOL = 1e-4
COMPOSED_TOL = 1e-3
ORACLE_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


# -- exact value iteration --------------------------------------------------------


def oracle_kernels(domain: gw.DomainSpec, gamma: float = 0.99, F: int = 3) -> np.ndarray:
    """Action-major kernel block ``(A*r, 2r, F, F)`` realising one Bellman backup."""
    r, c = domain.orientation_count, F // 2
    out = np.zeros((domain.n_actions, r, 2 * r, F, F))
    for a in range(domain.n_actions):
        for o in range(r):
            di, dj, o2 = gw.displacement(domain, o, a)
            out[a, o, o, c, c] = 1.0
            out[a, o, r + o2, c + di, c + dj] = gamma
    return out.reshape(domain.n_actions * r, 2 * r, F, F)


def tabular_value_iteration(domain: gw.DomainSpec, R: np.ndarray, K: int,
                            gamma: float = 0.99) -> list[np.ndarray]:
    """Reference VI by explicit loops; returns ``[V_0, ..., V_K]``."""
    r, m, _ = R.shape
    V = np.zeros_like(R, dtype=np.float64)
    out = [V]
    for _ in range(K):
        nV = np.empty_like(V)
        for o in range(r):
            for i in range(m):
                for j in range(m):
                    best = -np.inf
                    for a in range(domain.n_actions):
                        di, dj, o2 = gw.displacement(domain, o, a)
                        ni, nj = i + di, j + dj
                        v = V[o2, ni, nj] if 0 <= ni < m and 0 <= nj < m else 0.0
                        best = max(best, R[o, i, j] + gamma * v)
                    nV[o, i, j] = best
        V = nV
        out.append(V)
    return out


def oracle_reward(domain: gw.DomainSpec, grid: gw.GridMap) -> np.ndarray:
    R = np.where(grid.obstacles, -1.0, -0.02)
    R = np.repeat(R[None], domain.orientation_count, axis=0)
    R[:, grid.goal[0], grid.goal[1]] = 1.0
    return R


def oracle_case(seed: int, gamma: float = 0.99) -> CheckResult:
    domain = (gw.NEWS, gw.MOORE, gw.DRIVE)[seed % 3]
    m = 3 + seed % 5  # sizes 3..7
    grid = gw.MapGen(m, density=0.3)(seed, domain)
    R = oracle_reward(domain, grid)
    K = 2 * m
    with dk.precision(np.float64):
        trace: list = []
        vin.value_iteration(dk.Tensor(R), dk.Tensor(oracle_kernels(domain, gamma)), K,
                            domain.orientation_count, trace)
    ref = tabular_value_iteration(domain, R, K, gamma)
    err = max(float(np.max(np.abs(a - b))) for a, b in zip(trace, ref))
    return CheckResult(f"vi-oracle/{domain.name}-{m}", seed, err, ORACLE_TOL)


def oracle_suite(seeds: Iterable[int] = range(50)) -> list[CheckResult]:
    return [oracle_case(s) for s in seeds]


# -- gradients ----------------------------------------------------------------------


def _weighted_sum(x: dk.Tensor, w: np.ndarray) -> dk.Tensor:
    return dk._emit(np.asarray(np.sum(x.data * w)), (x,), lambda g: ((g * w).astype(x.data.dtype),))


def _fd_op(name: str, build: Callable, arrays: list[np.ndarray], seed: int) -> CheckResult:
    """Check ``sum(w * build(*params))`` for a random weighting ``w``."""
    params = [dk.Param(a, f"{name}.in{k}") for k, a in enumerate(arrays)]
    w = np.random.default_rng(seed + 7).standard_normal(build(*params).shape)
    rep = dk.grad_check(lambda: _weighted_sum(build(*params), w), params, eps=1e-6, tol=OP_TOL,
                        max_coords=40, seed=seed)
    return CheckResult(f"op/{name}", seed, rep.max_rel_error, OP_TOL)


def _op_cases(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    n = rng.standard_normal
    F = (1, 3, 5)[seed % 3]
    idx = dict(batch=np.array([0, 1, 1]), chan0=np.array([0, 1, 0]), i=np.array([0, 2, 3]),
               j=np.array([1, 1, 3]))
    t = rng.integers(4, size=3)
    return [
        _fd_op("conv2d", dk.conv2d, [n((2, 2, 5, 5)), n((3, 2, F, F)), n(3)], seed),
        _fd_op("channel_group_max", lambda x: dk.channel_group_max(x, 2)[0], [n((6, 4, 4))], seed),
        _fd_op("relu", dk.relu, [n((3, 4, 4))], seed),
        _fd_op("linear", dk.linear, [n((3, 5)), n((4, 5)), n(4)], seed),
        _fd_op("scalar_scale", dk.scalar_scale, [n((2, 4, 3, 3)), np.array(n())], seed),
        _fd_op("concat", lambda a, b: dk.concat([a, b], axis=-3), [n((2, 1, 3, 3)), n((2, 2, 3, 3))], seed),
        _fd_op("channel_mean", dk.channel_mean, [n((2, 4, 3, 3))], seed),
        _fd_op("repeat_channels", lambda x: dk.repeat_channels(x, 4), [n((2, 1, 3, 3))], seed),
        _fd_op("gather_pixels", lambda x: dk.gather_pixels(x, idx["batch"], idx["chan0"], 2, idx["i"], idx["j"]),
               [n((2, 3, 4, 4))], seed),
        _fd_op("softmax_cross_entropy", lambda z: dk.softmax_cross_entropy(z, t)[0], [n((3, 4))], seed),
    ]


def _composed_problem(model: vin.VinModel, seed: int, m: int = 5):
    domain = model.domain
    maps = [gw.MapGen(m)(seed * 10 + k, domain) for k in range(2)]
    obs = dk.Tensor(np.stack([gw.render_observation(domain, g) for g in maps]))
    rng = np.random.default_rng(seed)
    S = 6
    batch = rng.integers(2, size=S)
    states = np.stack([rng.integers(m, size=S), rng.integers(m, size=S),
                       rng.integers(domain.orientation_count, size=S)], axis=1)
    target = rng.integers(domain.n_actions, size=S)

    def loss():
        logits, _, _ = vin.policy_logits(model, obs, batch, states)
        return dk.softmax_cross_entropy(logits, target)[0]

    return loss


def _small_cfg(domain, seed):
    return vin.VinConfig(domain, K=4, F=3, h=6, seed=seed)


def _off_kink(model: vin.VinModel, seed: int) -> None:
    # zero bias puts hidden units exactly on the relu kink over empty windows
    model.conv_h_b.data[:] = np.random.default_rng(seed).uniform(-0.5, 0.5, model.conv_h_b.shape)


def _composed_cases(seed: int) -> list[CheckResult]:
    domain = (gw.NEWS, gw.MOORE, gw.DRIVE)[seed % 3]
    model = vin.VinModel(_small_cfg(domain, seed))
    _off_kink(model, seed)
    rep = dk.grad_check(_composed_problem(model, seed), model.params(), eps=1e-6, tol=COMPOSED_TOL,
                        max_coords=10, seed=seed)
    out = [CheckResult(f"vin/{domain.name}", seed, rep.max_rel_error, COMPOSED_TOL)]

    tgt = (gw.MOORE, gw.DRIVE, gw.NEWS)[seed % 3]
    src = vin.VinModel(_small_cfg(gw.NEWS, 100 + seed))
    _off_kink(src, seed)
    tv = tr.build_tvin(src, gw.NEWS, tgt, tr.default_mapping(gw.NEWS, tgt), _small_cfg(tgt, seed))
    for a, t in tv.theta.items():
        t.data[...] = 0.5 + 0.25 * a
    rep = dk.grad_check(_composed_problem(tv, seed), tv.trainable(), eps=1e-6, tol=COMPOSED_TOL,
                        max_coords=10, seed=seed)
    out.append(CheckResult(f"tvin/news->{tgt.name}", seed, rep.max_rel_error, COMPOSED_TOL))
    return out


def gradient_suite(seeds: Iterable[int] = range(20)) -> list[CheckResult]:
    results = []
    with dk.precision(np.float64):
        for s in seeds:
            results.extend(_op_cases(s))
            results.extend(_composed_cases(s))
    return results


def summarize(results: list[CheckResult]) -> dict[str, tuple[float, float, bool]]:
    """Worst error per check name: ``name -> (max_error, tol, all_passed)``."""
    out: dict[str, tuple[float, float, bool]] = {}
    for r in results:
        err, tol, ok = out.get(r.name, (0.0, r.tol, True))
        out[r.name] = (max(err, r.error), tol, ok and r.passed)
    return out


def timed(fn: Callable[[], list[CheckResult]]) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    res = fn()
    return res, time.perf_counter() - t0
