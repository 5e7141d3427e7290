"""Gridworld navigation domains: NEWS, Moore and differential drive.

Coordinates are (row, col) with row 0 at the north edge, so North decreases
``i`` and East increases ``j``.  DRIVE orientations are indexed clockwise
starting at North (0=N, 1=E, 2=S, 3=W).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DomainId(enum.IntEnum):
    NEWS = 0
    MOORE = 1
    DRIVE = 2


@dataclass(frozen=True)
class DomainSpec:
    id: DomainId
    actions: tuple[str, ...]
    orientation_count: int
    obs_goal_channels: int
    # DRIVE only: require the goal orientation to be matched as well.
    strict_goal: bool = False

    @property
    def name(self) -> str:
        return self.id.name.lower()

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def obs_channels(self) -> int:
        return 1 + self.obs_goal_channels

    def action_index(self, name: str) -> int:
        key = _ACTION_ALIASES.get(name.lower(), name.lower())
        for k, a in enumerate(self.actions):
            if a.lower() == key:
                return k
        raise KeyError(f"domain {self.name} has no action {name!r}; actions are {self.actions}")


NEWS = DomainSpec(DomainId.NEWS, ("East", "West", "North", "South"), 1, 1)
MOORE = DomainSpec(
    DomainId.MOORE,
    ("East", "West", "North", "South", "Northeast", "Northwest", "Southeast", "Southwest"),
    1,
    1,
)
DRIVE = DomainSpec(DomainId.DRIVE, ("MoveForward", "TurnLeft", "TurnRight"), 4, 4)

DOMAINS = {d.name: d for d in (NEWS, MOORE, DRIVE)}

_ACTION_ALIASES = {
    "e": "east", "w": "west", "n": "north", "s": "south",
    "ne": "northeast", "nw": "northwest", "se": "southeast", "sw": "southwest",
    "f": "moveforward", "fwd": "moveforward", "forward": "moveforward",
    "l": "turnleft", "left": "turnleft", "r": "turnright", "right": "turnright",
}

_OFFSETS = {
    "East": (0, 1), "West": (0, -1), "North": (-1, 0), "South": (1, 0),
    "Northeast": (-1, 1), "Northwest": (-1, -1), "Southeast": (1, 1), "Southwest": (1, -1),
}
# facing direction per DRIVE orientation: N, E, S, W
_HEADING = ((-1, 0), (0, 1), (1, 0), (0, -1))


def get_domain(name: str | DomainId | DomainSpec) -> DomainSpec:
    if isinstance(name, DomainSpec):
        return name
    if isinstance(name, DomainId):
        return DOMAINS[name.name.lower()]
    try:
        return DOMAINS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown domain {name!r}; choose from {sorted(DOMAINS)}") from None


class MapGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentState:
    i: int
    j: int
    o: int = 0


@dataclass
class GridMap:
    obstacles: np.ndarray  # (m, m) bool
    goal: tuple[int, int]
    goal_o: int = 0

    @property
    def m(self) -> int:
        return self.obstacles.shape[0]

    def free(self, i: int, j: int) -> bool:
        return 0 <= i < self.m and 0 <= j < self.m and not self.obstacles[i, j]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GridMap):
            return NotImplemented
        return (
            self.goal == other.goal
            and self.goal_o == other.goal_o
            and np.array_equal(self.obstacles, other.obstacles)
        )


@dataclass(frozen=True)
class MapGen:
    """Map generator configuration."""

    m: int
    kind: str = "obstacles"  # or "maze"
    density: float = 0.3

    def __call__(self, seed: int, domain: DomainSpec = NEWS) -> GridMap:
        if self.kind == "obstacles":
            grid = generate_obstacle_map(self.m, self.density, seed)
        elif self.kind == "maze":
            grid = generate_maze_backtracker(self.m, seed)
        else:
            raise ValueError(f"unknown map kind {self.kind!r}")
        if domain.orientation_count > 1:
            grid.goal_o = int(np.random.default_rng([seed, 1]).integers(domain.orientation_count))
        return grid


# ---------------------------------------------------------------------------
# map generation


def _component(free: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """4-connected flood fill over free cells."""
    m = free.shape[0]
    seen = np.zeros_like(free)
    stack = [start]
    seen[start] = True
    while stack:
        i, j = stack.pop()
        for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            a, b = i + di, j + dj
            if 0 <= a < m and 0 <= b < m and free[a, b] and not seen[a, b]:
                seen[a, b] = True
                stack.append((a, b))
    return seen


def generate_obstacle_map(m: int, density: float, rng_seed: int, max_retries: int = 100) -> GridMap:
    if m < 3:
        raise ValueError("m must be >= 3")
    if not 0.0 <= density < 1.0:
        raise ValueError("density must lie in [0, 1)")
    rng = np.random.default_rng(rng_seed)
    for _ in range(max_retries):
        obstacles = rng.random((m, m)) < density
        free_cells = np.argwhere(~obstacles)
        if len(free_cells) < 2:
            continue
        gi, gj = free_cells[rng.integers(len(free_cells))]
        goal = (int(gi), int(gj))
        if _component(~obstacles, goal).sum() >= 2:
            return GridMap(obstacles, goal)
    raise MapGenerationError(f"no valid {m}x{m} map at density {density} after {max_retries} tries")


def generate_maze_backtracker(m: int, rng_seed: int) -> GridMap:
    """Perfect maze by randomized depth-first search (recursive backtracker).

    Lattice nodes sit at even coordinates; odd cells between two nodes are
    knocked out when the walk passes between them.
    """
    if m < 3 or m % 2 == 0:
        raise ValueError("maze size must be odd and >= 3")
    rng = np.random.default_rng(rng_seed)
    n = (m + 1) // 2
    obstacles = np.ones((m, m), dtype=bool)
    visited = np.zeros((n, n), dtype=bool)
    start = (int(rng.integers(n)), int(rng.integers(n)))
    visited[start] = True
    obstacles[2 * start[0], 2 * start[1]] = False
    stack = [start]
    while stack:
        a, b = stack[-1]
        nbrs = [
            (a + da, b + db)
            for da, db in ((0, 1), (0, -1), (1, 0), (-1, 0))
            if 0 <= a + da < n and 0 <= b + db < n and not visited[a + da, b + db]
        ]
        if not nbrs:
            stack.pop()
            continue
        na, nb = nbrs[rng.integers(len(nbrs))]
        visited[na, nb] = True
        obstacles[a + na, b + nb] = False  # passage cell (2a+2na)/2
        obstacles[2 * na, 2 * nb] = False
        stack.append((na, nb))
    free_cells = np.argwhere(~obstacles)
    gi, gj = free_cells[rng.integers(len(free_cells))]
    return GridMap(obstacles, (int(gi), int(gj)))


# ---------------------------------------------------------------------------
# dynamics


def displacement(domain: DomainSpec, o: int, a: int) -> tuple[int, int, int]:
    """``(di, dj, new_o)`` of action ``a`` taken with orientation ``o``, ignoring obstacles."""
    name = domain.actions[a]
    if domain.id is DomainId.DRIVE:
        if name == "TurnLeft":
            return 0, 0, (o - 1) % 4
        if name == "TurnRight":
            return 0, 0, (o + 1) % 4
        return (*_HEADING[o], o)
    return (*_OFFSETS[name], o)


def step(domain: DomainSpec, grid: GridMap, s: AgentState, a: int) -> tuple[AgentState, bool]:
    """Apply action ``a``; returns ``(next_state, blocked)``."""
    di, dj, o2 = displacement(domain, s.o, a)
    if (di, dj) == (0, 0):
        return AgentState(s.i, s.j, o2), False
    ni, nj = s.i + di, s.j + dj
    if not grid.free(ni, nj):
        return s, True
    return AgentState(ni, nj, o2), False


def at_goal(domain: DomainSpec, grid: GridMap, s: AgentState) -> bool:
    if (s.i, s.j) != grid.goal:
        return False
    return not domain.strict_goal or s.o == grid.goal_o


def transition_table(domain: DomainSpec, grid: GridMap) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised successor table over all (o, i, j) states.

    Returns ``(nxt, blocked)`` where ``nxt`` has shape (O, m, m, A, 3) holding
    successor (o, i, j) and ``blocked`` has shape (O, m, m, A).
    """
    m, O, A = grid.m, domain.orientation_count, domain.n_actions
    oo, ii, jj = np.meshgrid(np.arange(O), np.arange(m), np.arange(m), indexing="ij")
    nxt = np.empty((O, m, m, A, 3), dtype=np.int64)
    blocked = np.zeros((O, m, m, A), dtype=bool)
    pad = np.pad(grid.obstacles, 1, constant_values=True)
    for a, name in enumerate(domain.actions):
        no = oo.copy()
        if domain.id is DomainId.DRIVE:
            if name == "TurnLeft":
                di = dj = np.zeros_like(ii)
                no = (oo - 1) % 4
            elif name == "TurnRight":
                di = dj = np.zeros_like(ii)
                no = (oo + 1) % 4
            else:
                heading = np.array(_HEADING)
                di, dj = heading[oo, 0], heading[oo, 1]
        else:
            d = _OFFSETS[name]
            di, dj = np.full_like(ii, d[0]), np.full_like(jj, d[1])
        ni, nj = ii + di, jj + dj
        hit = pad[ni + 1, nj + 1]
        blocked[..., a] = hit
        nxt[..., a, 0] = np.where(hit, oo, no)
        nxt[..., a, 1] = np.where(hit, ii, ni)
        nxt[..., a, 2] = np.where(hit, jj, nj)
    return nxt, blocked


@dataclass
class ExpertPolicy:
    """Exact shortest-path solution; ``-1`` marks unreachable / NONE."""

    dist: np.ndarray  # (O, m, m) int
    opt_action: np.ndarray  # (O, m, m) int
    co_optimal: np.ndarray  # (O, m, m, A) bool

    def action_table(self) -> np.ndarray:
        return self.opt_action


def goal_mask(domain: DomainSpec, grid: GridMap) -> np.ndarray:
    mask = np.zeros((domain.orientation_count, grid.m, grid.m), dtype=bool)
    gi, gj = grid.goal
    if domain.strict_goal:
        mask[grid.goal_o, gi, gj] = True
    else:
        mask[:, gi, gj] = True
    return mask


def shortest_path_policy(domain: DomainSpec, grid: GridMap) -> ExpertPolicy:
    nxt, blocked = transition_table(domain, grid)
    free = ~grid.obstacles[None].repeat(domain.orientation_count, axis=0)
    dist = np.full(free.shape, -1, dtype=np.int64)
    dist[goal_mask(domain, grid)] = 0
    no, ni, nj = nxt[..., 0], nxt[..., 1], nxt[..., 2]
    d = 0
    while True:
        succ_d = dist[no, ni, nj]  # (O, m, m, A)
        hits = ((succ_d == d) & ~blocked).any(axis=-1) & free & (dist < 0)
        if not hits.any():
            break
        dist[hits] = d + 1
        d += 1
    succ_d = dist[no, ni, nj]
    co = (succ_d == dist[..., None] - 1) & ~blocked & (dist[..., None] > 0)
    opt = np.where(co.any(axis=-1), co.argmax(axis=-1), -1)
    return ExpertPolicy(dist, opt, co)


# ---------------------------------------------------------------------------
# observations


def render_observation(domain: DomainSpec, grid: GridMap) -> np.ndarray:
    m = grid.m
    obs = np.zeros((domain.obs_channels, m, m), dtype=np.float32)
    obs[0] = grid.obstacles
    gi, gj = grid.goal
    if domain.obs_goal_channels == 1:
        obs[1, gi, gj] = 1.0
    else:
        obs[1 + grid.goal_o, gi, gj] = 1.0
    return obs


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Sample:
    map_ref: int
    state: AgentState
    expert_action: int


_SAMPLE_DTYPE = np.dtype([("map", "<u4"), ("i", "<u2"), ("j", "<u2"), ("o", "u1"), ("action", "u1")])


@dataclass
class Dataset:
    domain: DomainSpec
    maps: list[GridMap]
    records: np.ndarray  # structured array with _SAMPLE_DTYPE
    split: str = "train"
    _obs_cache: np.ndarray | None = field(default=None, repr=False, compare=False)
    _expert_cache: list | None = field(default=None, repr=False, compare=False)

    @property
    def m(self) -> int:
        return self.maps[0].m

    def __len__(self) -> int:
        return len(self.records)

    @property
    def samples(self) -> list[Sample]:
        return [
            Sample(int(r["map"]), AgentState(int(r["i"]), int(r["j"]), int(r["o"])), int(r["action"]))
            for r in self.records
        ]

    def observations(self) -> np.ndarray:
        """Stacked observation tensors, one per map: (n_maps, C, m, m)."""
        if self._obs_cache is None:
            self._obs_cache = np.stack([render_observation(self.domain, g) for g in self.maps])
        return self._obs_cache

    def experts(self) -> list[ExpertPolicy]:
        if self._expert_cache is None:
            self._expert_cache = [shortest_path_policy(self.domain, g) for g in self.maps]
        return self._expert_cache

    def trajectory_starts(self) -> list[tuple[int, AgentState]]:
        """Start state of every expert trajectory, recovered from sample order.

        A record opens a new trajectory unless it is the expert successor of the
        previous record on the same map.
        """
        starts = []
        prev = None
        for r in self.records:
            s = AgentState(int(r["i"]), int(r["j"]), int(r["o"]))
            k = int(r["map"])
            if prev is not None and prev[0] == k:
                nxt, _ = step(self.domain, self.maps[k], prev[1], prev[2])
                if nxt == s:
                    prev = (k, s, int(r["action"]))
                    continue
            starts.append((k, s))
            prev = (k, s, int(r["action"]))
        return starts

    def subset_maps(self, n_maps: int) -> "Dataset":
        """First ``n_maps`` maps and their samples."""
        keep = self.records[self.records["map"] < n_maps]
        return Dataset(self.domain, self.maps[:n_maps], keep.copy(), self.split)


def expert_trajectory(domain: DomainSpec, grid: GridMap, expert: ExpertPolicy,
                      start: AgentState) -> list[tuple[AgentState, int]]:
    """(state, expert action) pairs from ``start`` until the goal is reached."""
    out = []
    s = start
    while expert.dist[s.o, s.i, s.j] > 0:
        a = int(expert.opt_action[s.o, s.i, s.j])
        out.append((s, a))
        s, _ = step(domain, grid, s, a)
    return out


def sample_dataset(
    domain: DomainSpec,
    n_maps: int,
    trajs_per_map: int,
    gen: MapGen | None,
    rng_seed: int,
    split: str = "train",
    maps: Sequence[GridMap] | None = None,
) -> Dataset:
    """Expert trajectories on freshly generated maps.

    ``maps`` may be given explicitly (then ``gen`` is only used to replace
    maps with no reachable start).
    """
    if n_maps < 1:
        raise ValueError("n_maps must be >= 1")
    rng = np.random.default_rng(rng_seed)
    out_maps: list[GridMap] = []
    rows: list[tuple] = []
    for k in range(n_maps):
        grid = maps[k] if maps is not None else None
        while True:
            if grid is None:
                if gen is None:
                    raise ValueError("need a map generator")
                grid = gen(int(rng.integers(2**31)), domain)
            expert = shortest_path_policy(domain, grid)
            starts = np.argwhere(expert.dist > 0)
            if len(starts):
                break
            grid = None
        out_maps.append(grid)
        for _ in range(trajs_per_map):
            o, i, j = starts[rng.integers(len(starts))]
            for s, a in expert_trajectory(domain, grid, expert, AgentState(int(i), int(j), int(o))):
                rows.append((k, s.i, s.j, s.o, a))
    records = np.array(rows, dtype=_SAMPLE_DTYPE)
    return Dataset(domain, out_maps, records, split)


# ---------------------------------------------------------------------------
# binary dataset files

_MAGIC = b"TVIN"
_VERSION = 1
_HEADER = struct.Struct("<4sHBHII")
_GOAL = np.dtype([("i", "<u2"), ("j", "<u2"), ("o", "u1")])


def dataset_to_bytes(ds: Dataset) -> bytes:
    m = ds.m
    parts = [_HEADER.pack(_MAGIC, _VERSION, int(ds.domain.id), m, len(ds.maps), len(ds.records))]
    for g in ds.maps:
        parts.append(np.packbits(g.obstacles.astype(np.uint8), axis=1).tobytes())
        parts.append(np.array([(g.goal[0], g.goal[1], g.goal_o)], dtype=_GOAL).tobytes())
    parts.append(ds.records.astype(_SAMPLE_DTYPE).tobytes())
    return b"".join(parts)


class DatasetFormatError(ValueError):
    pass


def dataset_from_bytes(buf: bytes, split: str = "train") -> Dataset:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("file too short for a dataset header")
    magic, version, dom, m, n_maps, n_samples = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise DatasetFormatError("not a TVIN dataset file")
    if version != _VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    try:
        domain = get_domain(DomainId(dom))
    except ValueError:
        raise DatasetFormatError(f"unknown domain id {dom}") from None
    off = _HEADER.size
    row_bytes = (m + 7) // 8
    want = off + n_maps * (m * row_bytes + _GOAL.itemsize) + n_samples * _SAMPLE_DTYPE.itemsize
    if len(buf) != want:
        raise DatasetFormatError(f"dataset size {len(buf)} bytes, header implies {want}")
    maps = []
    for _ in range(n_maps):
        packed = np.frombuffer(buf, np.uint8, m * row_bytes, off).reshape(m, row_bytes)
        off += m * row_bytes
        obstacles = np.unpackbits(packed, axis=1, count=m).astype(bool)
        goal = np.frombuffer(buf, _GOAL, 1, off)[0]
        off += _GOAL.itemsize
        maps.append(GridMap(obstacles, (int(goal["i"]), int(goal["j"])), int(goal["o"])))
    records = np.frombuffer(buf, _SAMPLE_DTYPE, n_samples, off).copy()
    return Dataset(domain, maps, records, split)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path: str | Path, split: str = "train") -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes(), split)


def iter_states(domain: DomainSpec, grid: GridMap) -> Iterator[AgentState]:
    for o in range(domain.orientation_count):
        for i in range(grid.m):
            for j in range(grid.m):
                if not grid.obstacles[i, j]:
                    yield AgentState(i, j, o)


def with_strict_goal(domain: DomainSpec, strict: bool = True) -> DomainSpec:
    return replace(domain, strict_goal=strict)
