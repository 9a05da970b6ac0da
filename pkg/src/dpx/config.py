"""Run configuration: parsing, serialization, ablation switches, presets.

A RunConfig is a JSON-serializable key-value tree; ``config_to_dict`` and
``config_from_dict`` round-trip it exactly. Ablation tokens modify the
encoder configuration the way the architecture study does:

    no-paca               drop the inter-modal module entirely
    no-similarity         drop the similarity-gated key/value entry
    no-difference         drop the difference-gated key/value entry
    no-learning-factor    freeze the per-channel fusion factors at 1
    sigmoid-discriminator use the sigmoid discriminator variant
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .encoder import EncoderConfig, PatchSpec, StageConfig, preset_config, PRESETS, MODEL_VARIANTS
from .errors import ConfigError
from .tensor import RngState

ABLATION_TOKENS = ("no-paca", "no-similarity", "no-difference",
                   "no-learning-factor", "sigmoid-discriminator")

COMMANDS = ("cost", "shapes", "gradcheck", "smoke-train", "metrics", "gen-scene")


@dataclass(frozen=True)
class RunConfig:
    command: str = ""
    preset: str = "default"
    variant: str = "dsim"
    ablation: tuple[str, ...] = ()
    seed: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = 4
    decoder_dim: int = 64
    steps: int = 500
    lr: float = 0.1
    num_shapes: int = 3
    out_dir: str = "dpx-out"
    encoder: EncoderConfig | None = None

    def __post_init__(self):
        if self.command and self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; valid: {sorted(PRESETS)}")
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; valid: {MODEL_VARIANTS}")
        for tok in self.ablation:
            if tok not in ABLATION_TOKENS:
                raise ConfigError(
                    f"unknown ablation {tok!r}; valid: {ABLATION_TOKENS}")


def apply_ablation(cfg: EncoderConfig, tokens) -> EncoderConfig:
    for tok in tokens:
        if tok == "no-paca":
            cfg = replace(cfg, enable_paca=False)
        elif tok == "no-similarity":
            cfg = replace(cfg, enable_similarity=False)
        elif tok == "no-difference":
            cfg = replace(cfg, enable_difference=False)
        elif tok == "no-learning-factor":
            cfg = replace(cfg, enable_learning_factor=False)
        elif tok == "sigmoid-discriminator":
            cfg = replace(cfg, discriminator_variant="mlp2_sigmoid")
        else:
            raise ConfigError(f"unknown ablation {tok!r}; valid: {ABLATION_TOKENS}")
    return cfg


def resolve_encoder_config(run: RunConfig) -> EncoderConfig:
    base = run.encoder if run.encoder is not None else preset_config(run.preset)
    base = replace(base, variant=run.variant)
    return apply_ablation(base, run.ablation)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _encoder_to_dict(cfg: EncoderConfig) -> dict:
    d = asdict(cfg)
    d["stages"] = [asdict(s) for s in cfg.stages]
    return d


def _encoder_from_dict(d: dict) -> EncoderConfig:
    stages = tuple(
        StageConfig(s["depth"], s["dim"], s["heads"], PatchSpec(**s["patch"]))
        for s in d["stages"]
    )
    rest = {k: v for k, v in d.items() if k != "stages"}
    return EncoderConfig(stages=stages, **rest)


def config_to_dict(run: RunConfig) -> dict:
    d = asdict(run)
    d["ablation"] = list(run.ablation)
    d["encoder"] = _encoder_to_dict(run.encoder) if run.encoder is not None else None
    return d


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    d["ablation"] = tuple(d.get("ablation") or ())
    enc = d.get("encoder")
    d["encoder"] = _encoder_from_dict(enc) if enc is not None else None
    return RunConfig(**d)


def load_config(path: str | Path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(path: str | Path, run: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(run), fh, indent=2)
        fh.write("\n")


def random_config(rng: RngState) -> RunConfig:
    """A random valid RunConfig (serialization round-trip testing)."""
    n_abl = int(rng.integers(0, 4))
    tokens = []
    for _ in range(n_abl):
        tok = ABLATION_TOKENS[int(rng.integers(0, len(ABLATION_TOKENS)))]
        if tok not in tokens:
            tokens.append(tok)
    enc = None
    if int(rng.integers(0, 2)):
        enc = preset_config(["default", "toy"][int(rng.integers(0, 2))],
                            n_noise=int(rng.integers(0, 3)),
                            window=int(rng.integers(1, 8)))
    return RunConfig(
        command="",
        preset=["default", "toy", "mit-b3-like"][int(rng.integers(0, 3))],
        variant=MODEL_VARIANTS[int(rng.integers(0, len(MODEL_VARIANTS)))],
        ablation=tuple(tokens),
        seed=int(rng.integers(0, 2**31)),
        height=int(rng.integers(1, 5)) * 32,
        width=int(rng.integers(1, 5)) * 32,
        num_classes=int(rng.integers(2, 12)),
        decoder_dim=int(rng.choice((32, 64, 128))),
        steps=int(rng.integers(0, 1000)),
        lr=round(float(rng.uniform((1,), 0.01, 0.5).data[0]), 6),
        num_shapes=int(rng.integers(1, 6)),
        out_dir="dpx-out",
        encoder=enc,
    )
