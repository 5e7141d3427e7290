"""Transfer of a trained source VIN into a target domain.

The target model reuses the source reward network behind a 1x1-conv feature
encoder, keeps the source kernels of mapped actions frozen and scales each by
a learnable scalar transfer weight, and learns kernels for the remaining
target actions from scratch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from . import diffkit as dk
from .gridworld import Dataset, DomainSpec, get_domain
from .vin import EpochStats, VinConfig, VinModel, train_epoch


class TransferConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ActionMapping:
    """Pairs of (source action index, target action index)."""

    pairs: tuple[tuple[int, int], ...]

    def validate(self, src: DomainSpec, tgt: DomainSpec) -> None:
        for s, t in self.pairs:
            if not 0 <= s < src.n_actions:
                raise TransferConfigError(f"source action index {s} invalid for {src.name}")
            if not 0 <= t < tgt.n_actions:
                raise TransferConfigError(f"target action index {t} invalid for {tgt.name}")
        for side, idx, dom in ((0, [p[0] for p in self.pairs], src), (1, [p[1] for p in self.pairs], tgt)):
            dup = sorted({dom.actions[i] for i in idx if idx.count(i) > 1})
            if dup:
                which = "source" if side == 0 else "target"
                raise TransferConfigError(
                    f"action mapping must be injective; {which} action(s) {', '.join(dup)} used twice "
                    f"in {self.describe(src, tgt)}")

    def source_of(self) -> dict[int, int]:
        """target index -> source index"""
        return {t: s for s, t in self.pairs}

    def transferred(self) -> list[int]:
        return sorted(t for _, t in self.pairs)

    def new_actions(self, tgt: DomainSpec) -> list[int]:
        mapped = {t for _, t in self.pairs}
        return [a for a in range(tgt.n_actions) if a not in mapped]

    @classmethod
    def parse(cls, text: str, src: DomainSpec, tgt: DomainSpec) -> "ActionMapping":
        """Parse ``"N=N,E=E"``-style name pairs (source=target)."""
        pairs = []
        for item in filter(None, (x.strip() for x in text.split(","))):
            if "=" not in item:
                raise TransferConfigError(f"bad action pair {item!r}; expected SRC=TGT")
            a, b = (x.strip() for x in item.split("=", 1))
            try:
                pairs.append((src.action_index(a), tgt.action_index(b)))
            except KeyError as e:
                raise TransferConfigError(str(e.args[0])) from None
        mapping = cls(tuple(pairs))
        mapping.validate(src, tgt)
        return mapping

    def describe(self, src: DomainSpec, tgt: DomainSpec) -> str:
        return ",".join(f"{src.actions[s]}={tgt.actions[t]}" for s, t in self.pairs)


# Similar-action pairs between domains (source name, target name).
SIMILAR_PAIRS = {
    ("news", "moore"): [("East", "East"), ("West", "West"), ("North", "North"), ("South", "South")],
    ("moore", "news"): [("East", "East"), ("West", "West"), ("North", "North"), ("South", "South")],
    ("news", "drive"): [("North", "MoveForward"), ("East", "TurnLeft"), ("West", "TurnRight")],
    ("drive", "news"): [("MoveForward", "North"), ("TurnLeft", "East"), ("TurnRight", "West")],
}


def default_mapping(src: DomainSpec, tgt: DomainSpec, n_pairs: int | None = None) -> ActionMapping:
    src, tgt = get_domain(src), get_domain(tgt)
    if src.id == tgt.id:
        names = [(a, a) for a in src.actions]
    else:
        try:
            names = SIMILAR_PAIRS[(src.name, tgt.name)]
        except KeyError:
            raise TransferConfigError(f"no default action pairs for {src.name}->{tgt.name}") from None
    if n_pairs is not None:
        names = names[:n_pairs]
    return ActionMapping(tuple((src.action_index(a), tgt.action_index(b)) for a, b in names))


def project_kernel(src_kernel: np.ndarray, tgt_shape: tuple[int, ...]) -> np.ndarray:
    """Carry a per-action VI kernel across orientation layouts.

    Kernels are (r, 2r, F, F) with input channels ``[R_0..R_{r-1}, V_0..V_{r-1}]``.
    Going from r=4 to r=1 averages over output orientations and over the
    channels of each input block; going from r=1 to r=4 places the source
    kernel on every orientation's own R and V channel.
    """
    src_kernel = np.asarray(src_kernel)
    r_s, cin_s, F_s, _ = src_kernel.shape
    r_t, cin_t, F_t, _ = tgt_shape
    if F_s != F_t:
        raise TransferConfigError(f"kernel size mismatch: source F={F_s}, target F={F_t}")
    if cin_s != 2 * r_s or cin_t != 2 * r_t:
        raise TransferConfigError("kernels must have 2r input channels")
    if (r_s, cin_s) == (r_t, cin_t):
        return src_kernel.copy()
    if r_t == 1:
        out = np.empty((1, 2, F_t, F_t), dtype=src_kernel.dtype)
        out[0, 0] = src_kernel[:, :r_s].mean(axis=(0, 1))
        out[0, 1] = src_kernel[:, r_s:].mean(axis=(0, 1))
        return out
    if r_s == 1:
        out = np.zeros(tgt_shape, dtype=src_kernel.dtype)
        for o in range(r_t):
            out[o, o] = src_kernel[0, 0]
            out[o, r_t + o] = src_kernel[0, 1]
        return out
    raise TransferConfigError(f"cannot project kernel from r={r_s} to r={r_t}")


def _project_reward_conv(conv_r: np.ndarray, r_t: int) -> np.ndarray:
    r_s = conv_r.shape[0]
    if r_s == r_t:
        return conv_r.copy()
    if r_t == 1:
        return conv_r.mean(axis=0, keepdims=True)
    if r_s == 1:
        return np.repeat(conv_r, r_t, axis=0)
    raise TransferConfigError(f"cannot project reward conv from r={r_s} to r={r_t}")


class TvinModel(VinModel):
    """Target planner assembled from a frozen source VIN."""

    def __init__(self, source: VinModel, tgt: DomainSpec, mapping: ActionMapping, cfg: VinConfig,
                 freeze_reward: bool = True, theta_init: float = 1.0,
                 rng: np.random.Generator | None = None):
        tgt = get_domain(tgt)
        mapping.validate(source.domain, tgt)
        if cfg.F != source.F:
            raise TransferConfigError(f"kernel size mismatch: source F={source.F}, target F={cfg.F}")
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.domain = tgt
        self.source_domain = source.domain
        self.mapping = mapping
        self.K = cfg.K
        self.F = cfg.F
        self.h = source.h
        c_s, c_t = source.domain.obs_channels, tgt.obs_channels
        if c_s == c_t:
            enc = np.eye(c_s, dtype=dk.dtype()).reshape(c_s, c_t, 1, 1)
        else:
            enc = dk.init_uniform(rng, (c_s, c_t, 1, 1), c_t)
        self.encoder_w = dk.Param(enc, "enc.w")
        self.encoder_b = dk.Param(np.zeros(c_s), "enc.b")
        self.conv_h = dk.Param(source.conv_h.data.copy(), "fr.conv_h", frozen=freeze_reward)
        self.conv_h_b = dk.Param(source.conv_h_b.data.copy(), "fr.conv_h_b", frozen=freeze_reward)
        self.conv_r = dk.Param(source.conv_r.data.copy(), "fr.conv_r", frozen=freeze_reward)
        r_t = tgt.orientation_count
        shape = (r_t, 2 * r_t, cfg.F, cfg.F)
        src_of = mapping.source_of()
        self.q_pre: dict[int, dk.Param] = {}
        self.theta: dict[int, dk.Param] = {}
        self.q_new: dict[int, dk.Param] = {}
        for a, name in enumerate(tgt.actions):
            if a in src_of:
                k = project_kernel(source.q[src_of[a]].data, shape)
                self.q_pre[a] = dk.Param(k, f"q_pre.{name}", frozen=True)
                self.theta[a] = dk.Param(np.array(theta_init), f"theta.{name}")
            else:
                fan = 2 * r_t * cfg.F * cfg.F
                self.q_new[a] = dk.Param(dk.init_uniform(rng, shape, fan), f"q_new.{name}")
        A = tgt.n_actions
        self.head_w = dk.Param(dk.init_uniform(rng, (A, A), A), "head.w")
        self.head_b = dk.Param(np.zeros(A), "head.b")

    @property
    def q(self) -> list[dk.Tensor]:
        return [self.effective_kernel(a) for a in range(self.domain.n_actions)]

    def effective_kernel(self, a: int) -> dk.Tensor:
        if a in self.q_pre:
            return dk.scalar_scale(self.q_pre[a], self.theta[a])
        return self.q_new[a]

    def q_block(self) -> dk.Tensor:
        return dk.concat(self.q, axis=0)

    def encode(self, obs: dk.Tensor) -> dk.Tensor:
        return dk.conv2d(obs, self.encoder_w, self.encoder_b)

    def reward_map(self, obs: dk.Tensor) -> dk.Tensor:
        x = self.encode(obs)
        hid = dk.relu(dk.conv2d(x, self.conv_h, self.conv_h_b))
        R = dk.conv2d(hid, self.conv_r)
        r_s, r_t = self.source_domain.orientation_count, self.domain.orientation_count
        if r_s == r_t:
            return R
        if r_t == 1:
            return dk.channel_mean(R)
        return dk.repeat_channels(R, r_t)

    def reward_params(self) -> list[dk.Param]:
        return [self.encoder_w, self.encoder_b, self.conv_h, self.conv_h_b, self.conv_r]

    def kernel_params(self) -> list[dk.Param]:
        out = []
        for a in range(self.domain.n_actions):
            out.extend([self.q_pre[a], self.theta[a]] if a in self.q_pre else [self.q_new[a]])
        return out

    def params(self) -> list[dk.Param]:
        return self.reward_params() + self.kernel_params() + self.head_params()

    def frozen_params(self) -> list[dk.Param]:
        return [p for p in self.params() if p.frozen]

    def theta_values(self) -> dict[str, float]:
        return {self.domain.actions[a]: float(p.data) for a, p in sorted(self.theta.items())}


def build_tvin(source: VinModel, src_spec: DomainSpec, tgt_spec: DomainSpec, mapping: ActionMapping,
               cfg: VinConfig, freeze_reward: bool = True, theta_init: float = 1.0) -> TvinModel:
    if get_domain(src_spec).id != source.domain.id:
        raise TransferConfigError(f"source model is {source.domain.name}, not {get_domain(src_spec).name}")
    return TvinModel(source, tgt_spec, mapping, cfg, freeze_reward=freeze_reward, theta_init=theta_init)


def build_vin_init(source: VinModel, tgt_spec: DomainSpec, mapping: ActionMapping,
                   cfg: VinConfig) -> VinModel:
    """Target VIN initialised from the source (nothing frozen, no transfer weights).

    Shares the TVIN initialiser: fresh parameters are drawn from the same
    seeded stream, in the same order, as :class:`TvinModel` draws them.
    """
    tgt = get_domain(tgt_spec)
    tv = TvinModel(source, tgt, mapping, cfg)
    model = VinModel(VinConfig(tgt, K=cfg.K, F=cfg.F, h=source.h, seed=cfg.seed))
    r_t = tgt.orientation_count
    if source.domain.obs_channels == tgt.obs_channels:
        model.conv_h.data = source.conv_h.data.copy()
        model.conv_h_b.data = source.conv_h_b.data.copy()
    model.conv_r.data = _project_reward_conv(source.conv_r.data, r_t)
    for a in range(tgt.n_actions):
        src_k = tv.q_pre[a] if a in tv.q_pre else tv.q_new[a]
        model.q[a].data = src_k.data.copy()
    model.head_w.data = tv.head_w.data.copy()
    model.head_b.data = tv.head_b.data.copy()
    for p in model.params():
        p.frozen = False
        p.zero_grad()
    return model


@dataclass
class TransferReport:
    actions: list[str]
    theta_history: list[list[float]] = field(default_factory=list)
    epochs: list[EpochStats] = field(default_factory=list)
    n_frozen: int = 0
    n_trainable: int = 0

    def write_csv(self, out: TextIO) -> None:
        w = csv.writer(out)
        w.writerow(["epoch"] + [f"theta_{a}" for a in self.actions])
        for e, row in enumerate(self.theta_history):
            w.writerow([e] + [f"{v:.6f}" for v in row])


class FrozenDriftError(AssertionError):
    pass


def _frozen_snapshot(model: TvinModel) -> dict[str, bytes]:
    return {p.name: p.data.tobytes() for p in model.frozen_params()}


def train_tvin(model: TvinModel, dataset: Dataset, cfg: VinConfig, csv_out: TextIO | None = None,
               on_epoch=None) -> TransferReport:
    if dataset.domain.id != model.domain.id:
        raise TransferConfigError(f"dataset domain {dataset.domain.name} != target {model.domain.name}")
    actions = [model.domain.actions[a] for a in sorted(model.theta)]
    report = TransferReport(
        actions,
        n_frozen=sum(p.data.size for p in model.frozen_params()),
        n_trainable=sum(p.data.size for p in model.trainable()),
    )
    snap = _frozen_snapshot(model)
    report.theta_history.append([float(model.theta[a].data) for a in sorted(model.theta)])
    writer = None
    if csv_out is not None:
        writer = csv.writer(csv_out)
        writer.writerow(["epoch", "mean_loss", "train_acc", "wall_ms"])
    for epoch in range(1, cfg.epochs + 1):
        stats = train_epoch(model, dataset, cfg, epoch)
        if _frozen_snapshot(model) != snap:
            raise FrozenDriftError(f"frozen parameters changed during epoch {epoch}")
        report.epochs.append(stats)
        report.theta_history.append([float(model.theta[a].data) for a in sorted(model.theta)])
        if writer is not None:
            writer.writerow(stats.csv_row())
        if on_epoch is not None:
            on_epoch(stats)
    return report


def mapping_for_domains(src: str | DomainSpec, tgt: str | DomainSpec, pairs: str | None,
                        n_pairs: int | None = None) -> ActionMapping:
    src, tgt = get_domain(src), get_domain(tgt)
    if pairs:
        return ActionMapping.parse(pairs, src, tgt)
    return default_mapping(src, tgt, n_pairs)
