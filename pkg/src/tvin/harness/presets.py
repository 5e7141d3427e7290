"""Desk-scale experiment presets (NEWS-9 source, Moore-15 target)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from .. import gridworld as gw
from ..vin import default_k

MODELS = ("VIN", "VIN_i", "TVIN")


@dataclass(frozen=True)
class DataSpec:
    domain: str
    m: int
    n_maps: int


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    source: DataSpec
    target: DataSpec  # n_maps is the pool every N is cut from
    target_n: tuple[int, ...]
    models: tuple[str, ...] = MODELS
    pair_counts: tuple[int | None, ...] = (None,)  # None = every default pair
    target_K: tuple[int, ...] = ()  # empty = default for the maze size
    F: tuple[int, ...] = (3,)
    density: float = 0.3
    maze_kind: str = "obstacles"
    seeds: tuple[int, ...] = (1, 2, 3)
    epochs: int = 30
    source_lr: float = 0.1
    lr: float = 0.005
    clip: float = 1.0  # every model, source and target
    batch_size: int = 128
    h: int = 150
    trajs_per_map: int = 7
    test_maps: int = 200
    budget_min: float = 30.0
    description: str = ""

    def __post_init__(self):
        for d in (self.source, self.target):
            gw.get_domain(d.domain)
        if self.density not in (0.3, 0.5):
            raise ValueError("preset densities are 0.3 or 0.5")
        if any(n > self.target.n_maps for n in self.target_n):
            raise ValueError("target N exceeds the generated pool")
        unknown = set(self.models) - set(MODELS)
        if unknown:
            raise ValueError(f"unknown models {sorted(unknown)}")

    @property
    def source_K(self) -> int:
        return default_k(self.source.m)

    @property
    def ks(self) -> tuple[int, ...]:
        return self.target_K or (default_k(self.target.m),)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPreset":
        d = dict(d)
        d["source"] = DataSpec(**d["source"])
        d["target"] = DataSpec(**d["target"])
        for k in ("target_n", "models", "pair_counts", "target_K", "F", "seeds"):
            d[k] = tuple(d[k])
        return cls(**d)

    def with_overrides(self, **kw) -> "ExperimentPreset":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


_SRC = DataSpec("news", 9, 1000)
_TGT = DataSpec("moore", 15, 1000)

PRESETS = {
    p.name: p
    for p in (
        ExperimentPreset(
            "news2moore-desk", _SRC, _TGT, (200, 1000), budget_min=60.0,
            description="NEWS-9 -> Moore-15; VIN, VIN_i and TVIN at N = 200 and 1000 maps",
        ),
        ExperimentPreset(
            "news2moore-hard", DataSpec("news", 9, 1000), DataSpec("moore", 15, 200), (200,),
            density=0.5, budget_min=20.0,
            description="as news2moore-desk at 50% obstacle density, N = 200",
        ),
        ExperimentPreset(
            "kf-sweep", _SRC, _TGT, (200,), models=("VIN", "TVIN"), target_K=(10, 20, 30), F=(3, 5, 7),
            budget_min=60.0,
            description="recurrence depth K and kernel size F sweep at N = 200 (source retrained per F)",
        ),
        ExperimentPreset(
            "action-ablation", _SRC, _TGT, (200,), models=("TVIN",), pair_counts=(1, 2, 3, 4),
            budget_min=20.0,
            description="TVIN with 1..4 transferred action pairs at N = 200",
        ),
        ExperimentPreset(
            "smoke", DataSpec("news", 7, 24), DataSpec("moore", 7, 24), (12, 24), seeds=(1,), epochs=2,
            h=16, trajs_per_map=3, test_maps=8, budget_min=2.0,
            description="tiny end-to-end run for plumbing checks",
        ),
    )
}


def get_preset(name: str) -> ExperimentPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
