"""Command-line entry point: ``tvin <command> [flags]``.

Exit codes: 0 ok, 2 bad flags or configuration, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from .. import checks
from .. import diffkit as dk
from .. import evaluation as ev
from .. import gridworld as gw
from .. import transfer as tr
from .. import vin
from .config import ConfigError, apply_config, read_config
from .presets import PRESETS, get_preset
from .runner import replay, run_experiment, thread_limit
from .store import file_hash, load_model, save_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("tvin")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_data(path: str, split: str = "train") -> gw.Dataset:
    try:
        return gw.load_dataset(path, split)
    except FileNotFoundError:
        raise DataError(f"dataset not found: {path}") from None
    except gw.DatasetFormatError as e:
        raise DataError(f"{path}: {e}") from None


def _load_model(path: str) -> vin.VinModel:
    try:
        return load_model(path)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    except (ValueError, KeyError) as e:
        raise DataError(f"{path}: {e}") from None


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(a) -> int:
    dom = gw.get_domain(a.domain)
    gen = gw.MapGen(a.m, kind=a.kind, density=a.density)
    ds = gw.sample_dataset(dom, a.maps, a.trajs, gen, a.seed, split=a.split)
    gw.save_dataset(ds, a.out)
    free_cells = [g.obstacles.size - 1 for g in ds.maps]  # goal cell is never an obstacle
    realized = sum(int(g.obstacles.sum()) for g in ds.maps) / max(1, sum(free_cells))
    print(f"wrote {a.out}: domain={dom.name} m={a.m} maps={len(ds.maps)} samples={len(ds)} "
          f"density={realized:.3f} sha256={file_hash(a.out)[:16]}")
    return EXIT_OK


def cmd_train(a) -> int:
    data = _load_data(a.data)
    K = a.K if a.K is not None else vin.default_k(data.m)
    cfg = vin.VinConfig(data.domain, K=K, F=a.F, h=a.h, lr=a.lr, batch_size=a.batch_size,
                        epochs=a.epochs, seed=a.seed, clip=a.clip)
    model = vin.VinModel(cfg)
    csv_path = a.csv or a.out + ".csv"
    with open(csv_path, "w", newline="") as f:
        vin.train(model, data, cfg, csv_out=f,
                  on_epoch=lambda s: log.info("epoch %d loss %.4f acc %.3f", s.epoch, s.mean_loss,
                                              s.train_accuracy))
    digest = save_model(model, a.out)
    print(f"wrote {a.out} (sha256={digest[:16]}), curve {csv_path}")
    return EXIT_OK


def cmd_transfer(a) -> int:
    source = _load_model(a.source)
    if isinstance(source, tr.TvinModel):
        raise UsageError("--source must be a plain VIN checkpoint")
    data = _load_data(a.data)
    tgt = data.domain
    mapping = tr.mapping_for_domains(source.domain, tgt, a.pairs, a.n_pairs)
    K = a.K if a.K is not None else vin.default_k(data.m)
    cfg = vin.VinConfig(tgt, K=K, F=source.F, h=source.h, lr=a.lr, batch_size=a.batch_size,
                        epochs=a.epochs, seed=a.seed, clip=a.clip)
    csv_path = a.csv or a.out + ".csv"
    if a.mode == "init":
        model = tr.build_vin_init(source, tgt, mapping, cfg)
        with open(csv_path, "w", newline="") as f:
            vin.train(model, data, cfg, csv_out=f)
    else:
        model = tr.build_tvin(source, source.domain, tgt, mapping, cfg,
                              freeze_reward=not a.unfreeze_reward, theta_init=a.theta_init)
        with open(csv_path, "w", newline="") as f:
            report = tr.train_tvin(model, data, cfg, csv_out=f)
        theta_path = a.out + ".theta.csv"
        with open(theta_path, "w", newline="") as f:
            report.write_csv(f)
        print(f"theta: {', '.join(f'{k}={v:.4f}' for k, v in model.theta_values().items())} -> {theta_path}")
    digest = save_model(model, a.out)
    print(f"wrote {a.out} ({a.mode}, pairs {mapping.describe(source.domain, tgt)}, sha256={digest[:16]})")
    return EXIT_OK


def cmd_eval(a) -> int:
    test = _load_data(a.data, "test")
    named = []
    if a.labels:
        named.append(("labels", ev.LabelPolicy(test)))
    for path in filter(None, a.models.split(",")) if a.models else []:
        named.append((Path(path).stem, vin.ModelPolicy(_load_model(path))))
    if not named:
        raise UsageError("nothing to evaluate: give --models and/or --labels")
    try:
        rows = ev.compare(named, test, N=a.N or "", source=a.source_name or "", max_steps=a.max_steps)
    except ValueError as e:
        raise DataError(str(e)) from None
    out = open(a.out, "w", newline="") if a.out else sys.stdout
    try:
        ev.write_compare_csv(rows, out)
    finally:
        if a.out:
            out.close()
    return EXIT_OK


def cmd_experiment(a) -> int:
    if a.list:
        for name, p in PRESETS.items():
            print(f"{name:18s} {p.description}")
        return EXIT_OK
    if a.replay:
        bad = replay(a.replay, a.out, progress=print)
        if bad:
            for k, (old, new) in sorted(bad.items()):
                print(f"MISMATCH {k}: {old[:16]} != {new[:16]}")
            return EXIT_NUMERIC
        print("replay reproduced every artifact hash")
        return EXIT_OK
    if not a.preset:
        raise UsageError("give a preset name (see --list)")
    try:
        preset = get_preset(a.preset)
    except KeyError as e:
        raise UsageError(e.args[0]) from None
    preset = preset.with_overrides(seeds=a.seeds, epochs=a.epochs, target_n=a.N)
    rows, manifest = run_experiment(preset, a.out, a.reference, progress=print)
    print(f"{len(rows)} rows in {manifest.wall_clock_s / 60:.1f} min "
          f"(budget {preset.budget_min:.0f} min); outputs in {a.out}")
    return EXIT_OK


def _report(results, what: str) -> int:
    failed = False
    for name, (err, tol, ok) in checks.summarize(results).items():
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max error {err:.2e} (tol {tol:.0e})")
    print(f"{what}: {'FAILED' if failed else 'passed'} over {len({r.seed for r in results})} seeds")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_grad_check(a) -> int:
    return _report(checks.gradient_suite(range(a.seeds)), "gradient suite")


def cmd_oracle_check(a) -> int:
    return _report(checks.oracle_suite(range(a.seeds)), "exact-VI equivalence")


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tvin", description="Train, transfer and evaluate value iteration networks.")
    ap.add_argument("--reference", action="store_true", default=None,
                    help="single-threaded bitwise-reproducible mode")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key = value file; flags take precedence")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate an expert-trajectory dataset")
    p.add_argument("--domain", choices=sorted(gw.DOMAINS))
    p.add_argument("--m", type=int)
    p.add_argument("--maps", type=int)
    p.add_argument("--trajs", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--kind", choices=["obstacles", "maze"])
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--out")
    p.set_defaults(_defaults=dict(domain="news", m=9, maps=1000, trajs=7, density=0.3, kind="obstacles",
                                  seed=0, split="train"), _required=("out",))

    train_defaults = dict(F=3, h=150, lr=0.005, clip=1.0, batch_size=128, epochs=30, seed=0)
    p = add("train", cmd_train, "train a VIN from scratch")
    p.add_argument("--data")
    p.add_argument("--K", type=int, help="recurrence depth (default follows maze size)")
    p.add_argument("--F", type=int)
    p.add_argument("--h", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip", type=float, help="global gradient-norm cap per step; 0 disables (default 1)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--csv", help="per-epoch curve (default <out>.csv)")
    p.add_argument("--out")
    p.set_defaults(_defaults=train_defaults, _required=("data", "out"))

    p = add("transfer", cmd_transfer, "build and train TVIN (or the VIN_i baseline) from a source VIN")
    p.add_argument("--source")
    p.add_argument("--data")
    p.add_argument("--pairs", help="source=target action pairs, e.g. N=N,S=S")
    p.add_argument("--n-pairs", type=int, help="use the first n default similar-action pairs")
    p.add_argument("--mode", choices=["tvin", "init"])
    p.add_argument("--unfreeze-reward", action="store_true", default=None)
    p.add_argument("--theta-init", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip", type=float, help="global gradient-norm cap per step; 0 disables (default 1)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--csv")
    p.add_argument("--out")
    p.set_defaults(_defaults=dict(mode="tvin", unfreeze_reward=False, theta_init=1.0, lr=0.005, clip=1.0,
                                  batch_size=128, epochs=30, seed=0), _required=("source", "data", "out"))

    p = add("eval", cmd_eval, "compare checkpoints on a test dataset (CSV)")
    p.add_argument("--data")
    p.add_argument("--models", help="comma-separated checkpoint paths")
    p.add_argument("--labels", action="store_true", default=None, help="also score the dataset's own labels")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--N", type=int, help="training-set size to record in the N column")
    p.add_argument("--source-name")
    p.add_argument("--out")
    p.set_defaults(_defaults=dict(labels=False), _required=("data",))

    p = add("experiment", cmd_experiment, "run a preset pipeline")
    p.add_argument("preset", nargs="?")
    p.add_argument("--out")
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--N", type=_int_list, help="override target training sizes")
    p.add_argument("--epochs", type=int)
    p.add_argument("--replay", help="re-run a manifest and compare artifact hashes")
    p.add_argument("--list", action="store_true", default=None)
    p.set_defaults(_defaults=dict(out="runs", list=False), _required=())

    p = add("grad-check", cmd_grad_check, "finite-difference gradient suite")
    p.add_argument("--seeds", type=int)
    p.set_defaults(_defaults=dict(seeds=20), _required=())

    p = add("oracle-check", cmd_oracle_check, "value iteration vs tabular solver")
    p.add_argument("--seeds", type=int)
    p.set_defaults(_defaults=dict(seeds=50), _required=())
    return ap


def _resolve(a: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    sub = next(act for act in parser._actions if isinstance(act, argparse._SubParsersAction))
    subparser = sub.choices[a.command]
    if a.config:
        apply_config(a, subparser, read_config(a.config))
    for k, v in a._defaults.items():
        if getattr(a, k, None) is None:
            setattr(a, k, v)
    missing = [k for k in a._required if getattr(a, k, None) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)  # exits with 2 on malformed flags
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        _resolve(a, parser)
        with thread_limit(bool(a.reference)):
            return a.fn(a)
    except (UsageError, ConfigError, tr.TransferConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, gw.MapGenerationError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except dk.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
