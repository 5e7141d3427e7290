"""Experiment pipeline: data -> source VIN -> target models -> evaluation.

Every artifact lives under ``<workdir>/cache`` named by a hash of the stage
spec that produced it, so presets sharing a workdir reuse each other's
datasets and models.  The manifest is rewritten after every stage; if a
stage fails, the manifest lists what completed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import evaluation as ev
from .. import gridworld as gw
from .. import transfer as tr
from .. import vin
from .presets import ExperimentPreset
from .store import file_hash, load_model, save_model

log = logging.getLogger(__name__)

CSV_NOTE = "epochs={epochs}, final-epoch metrics (no model selection)"
ROW_FIELDS = ["preset", "seed", "model", "N", "K", "F", "pairs", "source", "target", "pct_opt", "pct_suc"]
TABLE_FIELDS = ["model", "N", "K", "F", "pairs", "n_seeds", "pct_opt", "pct_suc"]


@dataclass
class StageRecord:
    name: str
    key: str
    path: str
    sha256: str
    seconds: float
    reused: bool


@dataclass
class RunManifest:
    preset: str
    config: dict
    reference: bool
    stages: list[StageRecord] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)  # file name -> sha256
    wall_clock_s: float = 0.0
    complete: bool = False

    def artifact_hashes(self) -> dict[str, str]:
        out = {s.key: s.sha256 for s in self.stages}
        out.update(self.outputs)
        return out

    def write(self, path: Path) -> None:
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2) + "\n")
        tmp.replace(path)

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        d["stages"] = [StageRecord(**s) for s in d["stages"]]
        return cls(**d)


def data_seed(*parts) -> int:
    return zlib.crc32("/".join(map(str, parts)).encode())


def _spec_key(spec: dict) -> str:
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Row:
    seed: int
    model: str
    N: int
    K: int
    F: int
    pairs: int
    report: ev.EvalReport


class Runner:
    def __init__(self, preset: ExperimentPreset, workdir: str | Path, reference: bool = False,
                 progress: Callable[[str], None] | None = None):
        self.p = preset
        self.workdir = Path(workdir)
        self.cache = self.workdir / "cache"
        self.cache.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(preset.name, preset.to_dict(), reference)
        self.manifest_path = self.workdir / f"manifest-{preset.name}.json"
        self.progress = progress or (lambda msg: log.info(msg))
        self._mem: dict[str, object] = {}
        self._recorded: set[str] = set()

    # -- stage plumbing

    def _stage(self, name: str, spec: dict, ext: str, produce: Callable[[Path, Path], None]) -> tuple[Path, str]:
        """Run ``produce(tmp, final)`` unless the artifact is cached; returns (path, key)."""
        key = _spec_key({"stage": name, **spec})
        path = self.cache / f"{name}-{key}{ext}"
        t0 = time.perf_counter()
        reused = path.exists()
        if not reused:
            self.progress(f"[{name}] {json.dumps(spec, sort_keys=True)}")
            tmp = path.with_name(path.name + ".partial")
            produce(tmp, path)
            side = Path(str(tmp) + ".json")
            if side.exists():
                side.replace(Path(str(path) + ".json"))
            tmp.replace(path)
        if key not in self._recorded:
            self._recorded.add(key)
            self.manifest.stages.append(StageRecord(name, key, str(path.relative_to(self.workdir)),
                                                    file_hash(path), time.perf_counter() - t0, reused))
            self.manifest.write(self.manifest_path)
        return path, key

    def _dataset(self, role: str, d: gw.DomainSpec, m: int, n_maps: int, seed: int,
                 trajs: int) -> tuple[gw.Dataset, str]:
        p = self.p
        spec = dict(role=role, domain=d.name, m=m, n_maps=n_maps, trajs=trajs, density=p.density,
                    kind=p.maze_kind, seed=seed)
        split = "test" if role.endswith("test") else "train"

        def produce(tmp: Path, final: Path):
            gen = gw.MapGen(m, kind=p.maze_kind, density=p.density)
            ds = gw.sample_dataset(d, n_maps, trajs, gen, data_seed(seed, role, d.name, m, p.density, p.maze_kind),
                                   split=split)
            gw.save_dataset(ds, tmp)

        path, key = self._stage(f"data-{role}", spec, ".bin", produce)
        if key not in self._mem:
            self._mem[key] = gw.load_dataset(path, split)
        return self._mem[key], key  # type: ignore[return-value]

    # -- pipeline pieces

    def source_model(self, seed: int, F: int) -> tuple[vin.VinModel, str]:
        p = self.p
        d = gw.get_domain(p.source.domain)
        data, data_key = self._dataset("source-train", d, p.source.m, p.source.n_maps, seed, p.trajs_per_map)
        cfg = vin.VinConfig(d, K=p.source_K, F=F, h=p.h, lr=p.source_lr, batch_size=p.batch_size,
                            epochs=p.epochs, seed=seed, clip=p.clip)
        spec = dict(model="source", data=data_key, K=cfg.K, F=F, h=p.h, lr=cfg.lr, clip=cfg.clip,
                    batch=cfg.batch_size, epochs=cfg.epochs, seed=seed)

        def produce(tmp: Path, final: Path):
            model = vin.VinModel(cfg)
            with open(str(final) + ".csv", "w", newline="") as f:
                vin.train(model, data, cfg, csv_out=f)
            save_model(model, tmp)

        path, key = self._stage("source", spec, ".ck", produce)
        return load_model(path), key

    def target_model(self, kind: str, seed: int, N: int, K: int, F: int, n_pairs: int) -> vin.VinModel:
        p = self.p
        d = gw.get_domain(p.target.domain)
        pool, pool_key = self._dataset("target-train", d, p.target.m, p.target.n_maps, seed, p.trajs_per_map)
        data = pool.subset_maps(N)
        cfg = vin.VinConfig(d, K=K, F=F, h=p.h, lr=p.lr, batch_size=p.batch_size, epochs=p.epochs, seed=seed,
                            clip=p.clip)
        spec = dict(model=kind, data=pool_key, N=N, K=K, F=F, h=p.h, lr=cfg.lr, clip=cfg.clip, batch=cfg.batch_size,
                    epochs=cfg.epochs, seed=seed)
        if kind != "VIN":
            source, src_key = self.source_model(seed, F)
            src_dom = gw.get_domain(p.source.domain)
            mapping = tr.default_mapping(src_dom, d, n_pairs)
            spec.update(source=src_key, pairs=mapping.describe(src_dom, d))

        def produce(tmp: Path, final: Path):
            with open(str(final) + ".csv", "w", newline="") as f:
                if kind == "VIN":
                    model = vin.VinModel(cfg)
                    vin.train(model, data, cfg, csv_out=f)
                elif kind == "VIN_i":
                    model = tr.build_vin_init(source, d, mapping, cfg)
                    vin.train(model, data, cfg, csv_out=f)
                else:
                    model = tr.build_tvin(source, src_dom, d, mapping, cfg)
                    report = tr.train_tvin(model, data, cfg, csv_out=f)
            if kind == "TVIN":
                with open(str(final) + ".theta.csv", "w", newline="") as f:
                    report.write_csv(f)
            save_model(model, tmp)

        path, _ = self._stage(f"target-{kind}", spec, ".ck", produce)
        return load_model(path)

    def test_set(self, seed: int) -> gw.Dataset:
        p = self.p
        d = gw.get_domain(p.target.domain)
        return self._dataset("target-test", d, p.target.m, p.test_maps, seed, p.trajs_per_map)[0]

    # -- whole run

    def cells(self):
        """(seed, model, N, K, F, pairs); VIN transfers nothing, so it gets pairs=0 and one row per cell."""
        p = self.p
        n_all = len(tr.default_mapping(gw.get_domain(p.source.domain), gw.get_domain(p.target.domain)).pairs)
        for seed in p.seeds:
            for F in p.F:
                for K in p.ks:
                    for N in p.target_n:
                        for k, pc in enumerate(p.pair_counts):
                            for model in p.models:
                                if model == "VIN":
                                    if k == 0:
                                        yield seed, model, N, K, F, 0
                                else:
                                    yield seed, model, N, K, F, n_all if pc is None else pc

    def run(self) -> list[Row]:
        t0 = time.perf_counter()
        rows = []
        tests: dict[int, gw.Dataset] = {}
        for seed, model, N, K, F, pc in self.cells():
            m = self.target_model(model, seed, N, K, F, pc)
            if seed not in tests:
                tests[seed] = self.test_set(seed)
            rep = ev.evaluate(vin.ModelPolicy(m), tests[seed])
            self.progress(f"seed={seed} {model} N={N} K={K} F={F} pairs={pc}: "
                          f"%Opt {rep.pct_opt:.1f} %Suc {rep.pct_suc:.1f}")
            rows.append(Row(seed, model, N, K, F, pc, rep))
        self._write_outputs(rows)
        self.manifest.wall_clock_s = time.perf_counter() - t0
        self.manifest.complete = True
        self.manifest.write(self.manifest_path)
        return rows

    def _write_outputs(self, rows: list[Row]) -> None:
        p = self.p
        note = "# " + CSV_NOTE.format(epochs=p.epochs) + "\n"
        src = f"{p.source.domain}-{p.source.m}"
        tgt = f"{p.target.domain}-{p.target.m}"
        rows_path = self.workdir / f"{p.name}-rows.csv"
        with open(rows_path, "w", newline="") as f:
            f.write(note)
            w = csv.writer(f)
            w.writerow(ROW_FIELDS)
            for r in rows:
                w.writerow([p.name, r.seed, r.model, r.N, r.K, r.F, r.pairs, src, tgt,
                            f"{r.report.pct_opt:.2f}", f"{r.report.pct_suc:.2f}"])
        table_path = self.workdir / f"{p.name}-table.csv"
        with open(table_path, "w", newline="") as f:
            f.write(note)
            w = csv.writer(f)
            w.writerow(TABLE_FIELDS)
            for key, (opt, suc) in summarize(rows).items():
                model, N, K, F, pairs = key
                w.writerow([model, N, K, F, pairs, len(opt), f"{np.mean(opt):.2f}", f"{np.mean(suc):.2f}"])
        for path in (rows_path, table_path):
            self.manifest.outputs[path.name] = file_hash(path)


def summarize(rows: list[Row]) -> dict[tuple, tuple[list[float], list[float]]]:
    """Group rows by (model, N, K, F, pairs); values are per-seed metric lists."""
    out: dict[tuple, tuple[list[float], list[float]]] = defaultdict(lambda: ([], []))
    for r in rows:
        opt, suc = out[(r.model, r.N, r.K, r.F, r.pairs)]
        opt.append(r.report.pct_opt)
        suc.append(r.report.pct_suc)
    return dict(out)


def run_experiment(preset: ExperimentPreset, workdir: str | Path, reference: bool = False,
                   progress: Callable[[str], None] | None = None) -> tuple[list[Row], RunManifest]:
    runner = Runner(preset, workdir, reference, progress)
    rows = runner.run()
    return rows, runner.manifest


def replay(manifest_path: str | Path, workdir: str | Path,
           progress: Callable[[str], None] | None = None) -> dict[str, tuple[str, str]]:
    """Re-run a manifest's preset in ``workdir``; returns mismatching hashes (empty = reproduced)."""
    old = RunManifest.read(manifest_path)
    preset = ExperimentPreset.from_dict(old.config)
    _, new = run_experiment(preset, workdir, old.reference, progress)
    a, b = old.artifact_hashes(), new.artifact_hashes()
    return {k: (a.get(k, ""), b.get(k, "")) for k in set(a) | set(b) if a.get(k) != b.get(k)}


def thread_limit(reference: bool):
    """Context manager pinning BLAS threads (1 in reference mode, else TVIN_THREADS)."""
    from threadpoolctl import threadpool_limits

    if reference:
        return threadpool_limits(1)
    env = os.environ.get("TVIN_THREADS")
    return threadpool_limits(int(env) if env else None)
