"""Value iteration network: reward net, recurrent VI module, attention head.

A model maps a batch of observation images to a Q image with
``A * r`` channels (action-major, ``r`` orientation groups).  Attention picks
the ``A`` Q values at the agent's cell and orientation; a single affine head
turns them into action logits.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import diffkit as dk
from .gridworld import AgentState, Dataset, DomainSpec, GridMap, get_domain, render_observation

log = logging.getLogger(__name__)

DEFAULT_K = {9: 20, 15: 30, 28: 56}


def default_k(m: int) -> int:
    """Recurrence depth for maze size ``m`` (20/30/56 for 9/15/28)."""
    if m in DEFAULT_K:
        return DEFAULT_K[m]
    return int(round(2 * m))


@dataclass
class VinConfig:
    domain: DomainSpec
    K: int = 20
    F: int = 3
    h: int = 150
    lr: float = 0.005
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    clip: float = 1.0  # global grad-norm cap per step; 0 = plain SGD

    def __post_init__(self):
        self.domain = get_domain(self.domain)
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.F < 1 or self.F % 2 == 0:
            raise ValueError("F must be odd and >= 1")

    @property
    def r_channels(self) -> int:
        return self.domain.orientation_count


@dataclass
class PolicyOutput:
    logits: np.ndarray
    probs: np.ndarray
    value_map: np.ndarray


class VinModel:
    """Plain VIN.  Subclasses override :meth:`reward_map` and :meth:`q_block`."""

    def __init__(self, cfg: VinConfig, rng: np.random.Generator | None = None):
        self.domain = cfg.domain
        self.K = cfg.K
        self.F = cfg.F
        self.h = cfg.h
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        A, r, C = self.domain.n_actions, cfg.r_channels, self.domain.obs_channels
        self.conv_h = dk.Param(dk.init_uniform(rng, (cfg.h, C, 3, 3), C * 9), "fr.conv_h")
        self.conv_h_b = dk.Param(np.zeros(cfg.h), "fr.conv_h_b")
        self.conv_r = dk.Param(dk.init_uniform(rng, (r, cfg.h, 1, 1), cfg.h), "fr.conv_r")
        fan = 2 * r * cfg.F * cfg.F
        self.q = [
            dk.Param(dk.init_uniform(rng, (r, 2 * r, cfg.F, cfg.F), fan), f"q.{a}")
            for a in self.domain.actions
        ]
        self.head_w = dk.Param(dk.init_uniform(rng, (A, A), A), "head.w")
        self.head_b = dk.Param(np.zeros(A), "head.b")

    @property
    def r(self) -> int:
        return self.domain.orientation_count

    def reward_params(self) -> list[dk.Param]:
        return [self.conv_h, self.conv_h_b, self.conv_r]

    def head_params(self) -> list[dk.Param]:
        return [self.head_w, self.head_b]

    def params(self) -> list[dk.Param]:
        return self.reward_params() + list(self.q) + self.head_params()

    def trainable(self) -> list[dk.Param]:
        return [p for p in self.params() if not p.frozen]

    def reward_map(self, obs: dk.Tensor) -> dk.Tensor:
        hid = dk.relu(dk.conv2d(obs, self.conv_h, self.conv_h_b))
        return dk.conv2d(hid, self.conv_r)

    def q_block(self) -> dk.Tensor:
        """All action kernels stacked action-major: (A*r, 2r, F, F)."""
        return dk.concat(self.q, axis=0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params()}

    def load_params(self, params: Iterable[dk.Param]) -> None:
        by_name = {p.name: p for p in self.params()}
        for p in params:
            if p.name not in by_name:
                raise KeyError(f"unexpected checkpoint entry {p.name!r}")
            tgt = by_name[p.name]
            if tgt.shape != p.shape:
                raise ValueError(f"{p.name}: checkpoint shape {p.shape} != model shape {tgt.shape}")
            tgt.data = p.data.astype(dk.dtype())
            tgt.frozen = p.frozen
            tgt.zero_grad()


# ---------------------------------------------------------------------------
# forward machinery


def reward_map(model: VinModel, obs) -> dk.Tensor:
    obs = dk.as_tensor(obs)
    if obs.shape[-3] != model.domain.obs_channels:
        raise ValueError(f"observation has {obs.shape[-3]} channels, domain expects {model.domain.obs_channels}")
    return model.reward_map(obs)


def value_iteration(R: dk.Tensor, W: dk.Tensor, K: int, groups: int,
                    trace: list | None = None) -> tuple[dk.Tensor, dk.Tensor]:
    """K shared-weight sweeps of ``Q = conv([R; V], W)``, ``V = max_a Q``.

    Returns the final value map and the Q image from one extra sweep over
    ``[R; V_K]``.  If ``trace`` is a list, every intermediate V array is
    appended to it.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    V = dk.Tensor(np.zeros_like(R.data))
    if trace is not None:
        trace.append(V.data)
    for _ in range(K):
        Q = dk.conv2d(dk.concat([R, V], axis=-3), W)
        V, _ = dk.channel_group_max(Q, groups)
        if trace is not None:
            trace.append(V.data)
    Q = dk.conv2d(dk.concat([R, V], axis=-3), W)
    return V, Q


def vi_forward(model: VinModel, R: dk.Tensor, K: int | None = None,
               trace: list | None = None) -> tuple[dk.Tensor, dk.Tensor]:
    return value_iteration(R, model.q_block(), model.K if K is None else K, model.r, trace)


def attend_batch(Q: dk.Tensor, n_actions: int, groups: int, batch: np.ndarray,
                 states: np.ndarray) -> dk.Tensor:
    """Attended Q vectors (S, A) for states given as rows of (i, j, o)."""
    states = np.asarray(states, dtype=np.int64).reshape(-1, 3)
    H, W = Q.shape[-2:]
    i, j, o = states[:, 0], states[:, 1], states[:, 2]
    if np.any((i < 0) | (i >= H) | (j < 0) | (j >= W) | (o < 0) | (o >= groups)):
        raise IndexError("state out of range")
    return dk.gather_pixels(Q, np.asarray(batch, dtype=np.int64), o, n_actions, i, j, stride=groups)


def attend(Q: dk.Tensor, s: AgentState, n_actions: int | None = None, groups: int = 1) -> dk.Tensor:
    """Q values of state ``s`` for a single (unbatched) Q image."""
    if n_actions is None:
        n_actions = Q.shape[-3] // groups
    Qb = Q if Q.data.ndim == 4 else _unsqueeze(Q)
    out = attend_batch(Qb, n_actions, groups, np.zeros(1, np.int64), np.array([[s.i, s.j, s.o]]))
    return _row(out)


def _unsqueeze(x: dk.Tensor) -> dk.Tensor:
    return dk._emit(x.data[None], (x,), lambda g: (g[0],))


def _row(x: dk.Tensor) -> dk.Tensor:
    return dk._emit(x.data[0], (x,), lambda g: (g[None],))


def policy_logits(model: VinModel, obs, batch: np.ndarray, states: np.ndarray,
                  ) -> tuple[dk.Tensor, dk.Tensor, dk.Tensor]:
    """Batched forward: obs (N, C, m, m) -> logits (S, A), plus V and Q."""
    R = reward_map(model, obs)
    V, Q = vi_forward(model, R)
    psi = attend_batch(Q, model.domain.n_actions, model.r, batch, states)
    return dk.linear(psi, model.head_w, model.head_b), V, Q


def forward(model: VinModel, obs, s: AgentState) -> PolicyOutput:
    obs = dk.as_tensor(obs)
    logits, V, _ = policy_logits(model, _unsqueeze(obs), np.zeros(1, np.int64), np.array([[s.i, s.j, s.o]]))
    lg = logits.data[0]
    return PolicyOutput(lg, dk.softmax(lg.astype(np.float64)).astype(lg.dtype), V.data[0])


def argmax_lowest(logits: np.ndarray) -> np.ndarray | int:
    """Argmax along the last axis; ties resolve to the lowest index."""
    return np.argmax(logits, axis=-1)


def predict_action(model: VinModel, obs, s: AgentState) -> int:
    return int(argmax_lowest(forward(model, obs, s).logits))


def action_tables(model: VinModel, obs: np.ndarray) -> np.ndarray:
    """Greedy action for every (o, i, j) of every map: (N, O, m, m)."""
    R = reward_map(model, obs)
    _, Q = vi_forward(model, R)
    N, _, m, _ = Q.shape
    A, G = model.domain.n_actions, model.r
    q = Q.data.reshape(N, A, G, m, m).transpose(0, 2, 3, 4, 1)  # (N, G, m, m, A)
    logits = q @ model.head_w.data.T + model.head_b.data
    return argmax_lowest(logits)


class ModelPolicy:
    """Adapter exposing a trained model as a per-map action table."""

    def __init__(self, model: VinModel, chunk: int = 64):
        self.model = model
        self.chunk = chunk

    def __call__(self, grid: GridMap) -> np.ndarray:
        obs = render_observation(self.model.domain, grid)[None]
        return action_tables(self.model, obs)[0]

    def tables(self, maps: Sequence[GridMap]) -> list[np.ndarray]:
        out = []
        for k in range(0, len(maps), self.chunk):
            obs = np.stack([render_observation(self.model.domain, g) for g in maps[k:k + self.chunk]])
            out.extend(action_tables(self.model, obs))
        return out


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    train_accuracy: float
    wall_ms: float

    def csv_row(self) -> list:
        return [self.epoch, f"{self.mean_loss:.6f}", f"{self.train_accuracy:.4f}", f"{self.wall_ms:.1f}"]


def batches(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatches of record indices, grouped by map.

    Maps are visited in random order and each map's samples are shuffled, so
    a batch touches only a couple of maps and the expensive VI recurrence is
    run once per map rather than once per sample.
    """
    recs = dataset.records
    maps = np.unique(recs["map"])
    order = rng.permutation(maps)
    rank = np.empty(int(recs["map"].max()) + 1, dtype=np.int64)
    rank[order] = np.arange(len(order))
    key = rank[recs["map"]] * len(recs) + rng.permutation(len(recs))
    idx = np.argsort(key, kind="stable")
    return [idx[k:k + batch_size] for k in range(0, len(idx), batch_size)]


def batch_loss(model: VinModel, dataset: Dataset, idx: np.ndarray) -> tuple[dk.Tensor, np.ndarray, np.ndarray]:
    recs = dataset.records[idx]
    maps, local = np.unique(recs["map"], return_inverse=True)
    obs = dk.Tensor(dataset.observations()[maps])
    states = np.stack([recs["i"], recs["j"], recs["o"]], axis=1).astype(np.int64)
    logits, _, _ = policy_logits(model, obs, local, states)
    target = recs["action"].astype(np.int64)
    loss, probs = dk.softmax_cross_entropy(logits, target)
    return loss, probs, target


def train_epoch(model: VinModel, dataset: Dataset, cfg: VinConfig, epoch: int = 0,
                params: Sequence[dk.Param] | None = None) -> EpochStats:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    t0 = time.perf_counter()
    params = list(params) if params is not None else model.params()
    rng = np.random.default_rng([cfg.seed, epoch])
    total, correct, n = 0.0, 0, 0
    for idx in batches(dataset, cfg.batch_size, rng):
        with dk.Tape() as tape:
            loss, probs, target = batch_loss(model, dataset, idx)
        lv = float(loss.data)
        if not math.isfinite(lv):
            raise dk.NumericError(f"non-finite loss {lv} at epoch {epoch} (batch of {len(idx)} samples)")
        tape.backward(loss)
        if cfg.clip:
            dk.clip_grad_norm([p for p in params if not p.frozen], cfg.clip)
        dk.sgd_step(params, cfg.lr)
        total += lv * len(idx)
        correct += int((probs.argmax(axis=1) == target).sum())
        n += len(idx)
    return EpochStats(epoch, total / n, correct / n, 1000 * (time.perf_counter() - t0))


def evaluate_loss(model: VinModel, dataset: Dataset, batch_size: int = 512) -> float:
    total = 0.0
    idx_all = np.arange(len(dataset))
    for k in range(0, len(idx_all), batch_size):
        idx = idx_all[k:k + batch_size]
        loss, _, _ = batch_loss(model, dataset, idx)
        total += float(loss.data) * len(idx)
    return total / len(dataset)


CSV_HEADER = ["epoch", "mean_loss", "train_acc", "wall_ms"]


def train(model: VinModel, dataset: Dataset, cfg: VinConfig, csv_out: TextIO | None = None,
          on_epoch: Callable[[EpochStats], None] | None = None,
          params: Sequence[dk.Param] | None = None) -> list[EpochStats]:
    writer = None
    if csv_out is not None:
        writer = csv.writer(csv_out)
        writer.writerow(CSV_HEADER)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        stats = train_epoch(model, dataset, cfg, epoch, params)
        history.append(stats)
        log.info("epoch %d loss %.4f acc %.3f (%.0f ms)", epoch, stats.mean_loss,
                 stats.train_accuracy, stats.wall_ms)
        if writer is not None:
            writer.writerow(stats.csv_row())
        if on_epoch is not None:
            on_epoch(stats)
    return history


def model_config(model: VinModel, **overrides) -> VinConfig:
    base = dict(domain=model.domain, K=model.K, F=model.F, h=model.h)
    base.update(overrides)
    return VinConfig(**base)
