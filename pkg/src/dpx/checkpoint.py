"""Parameter checkpoints: a directory of DPTF tensor files plus a manifest.

``manifest.json`` maps dotted parameter names to the tensor files holding
them, so a checkpoint can be inspected or loaded parameter by parameter.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import DomainError
from .nn import ParamModule
from .tensor import load_dptf, save_dptf

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "dpx-checkpoint/1"


def _filename(param_name: str) -> str:
    return param_name.replace(".", "__") + ".dptf"


def save_checkpoint(directory: str | Path, module: ParamModule,
                    meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = {}
    for name, t in module.named_params():
        fname = _filename(name)
        save_dptf(directory / fname, t)
        params[name] = fname
    manifest = {"format": MANIFEST_FORMAT, "params": params}
    if meta:
        manifest["meta"] = meta
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory / MANIFEST_NAME


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DomainError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(directory: str | Path, module: ParamModule) -> None:
    """Load every parameter named in the manifest into ``module``."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    have = dict(module.named_params())
    for name, fname in manifest["params"].items():
        if name not in have:
            raise DomainError(f"checkpoint parameter {name!r} unknown to the model")
        t = load_dptf(directory / fname)
        if t.shape != have[name].shape:
            raise DomainError(
                f"checkpoint parameter {name!r} has shape {t.shape}, "
                f"model expects {have[name].shape}"
            )
        module.set_param(name, t)
    missing = set(have) - set(manifest["params"])
    if missing:
        raise DomainError(f"checkpoint missing parameters: {sorted(missing)[:5]}...")
