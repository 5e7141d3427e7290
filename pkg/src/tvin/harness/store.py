"""Checkpoints with a JSON sidecar describing how to rebuild the model.

The binary checkpoint holds only named parameters; ``<path>.json`` records
model kind, domains, K, F, h and (for TVIN) the action mapping.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .. import diffkit as dk
from .. import gridworld as gw
from .. import transfer as tr
from .. import vin


def meta_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def model_meta(model: vin.VinModel) -> dict:
    meta = {"kind": "vin", "domain": model.domain.name, "K": model.K, "F": model.F, "h": model.h}
    if isinstance(model, tr.TvinModel):
        meta.update(kind="tvin", source_domain=model.source_domain.name,
                    pairs=model.mapping.describe(model.source_domain, model.domain))
    return meta


def save_model(model: vin.VinModel, path: str | Path, **extra) -> str:
    """Write checkpoint + sidecar; returns the checkpoint's sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = dk.checkpoint_bytes(model.params())
    path.write_bytes(raw)
    meta = model_meta(model) | extra
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return hashlib.sha256(raw).hexdigest()


def load_model(path: str | Path) -> vin.VinModel:
    path = Path(path)
    try:
        meta = json.loads(meta_path(path).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"missing model description {meta_path(path)}") from None
    params = dk.load_checkpoint(path)
    domain = gw.get_domain(meta["domain"])
    cfg = vin.VinConfig(domain, K=meta["K"], F=meta["F"], h=meta["h"])
    if meta["kind"] == "tvin":
        src_dom = gw.get_domain(meta["source_domain"])
        shell = vin.VinModel(vin.VinConfig(src_dom, K=meta["K"], F=meta["F"], h=meta["h"]))
        mapping = tr.ActionMapping.parse(meta["pairs"], src_dom, domain)
        model: vin.VinModel = tr.TvinModel(shell, domain, mapping, cfg)
    elif meta["kind"] == "vin":
        model = vin.VinModel(cfg)
    else:
        raise ValueError(f"unknown model kind {meta['kind']!r} in {meta_path(path)}")
    model.load_params(params)
    return model


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
