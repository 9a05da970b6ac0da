"""Command-line entry point.

    dpx <cost|shapes|gradcheck|smoke-train|metrics|gen-scene>
        [--config FILE] [--seed N] [--preset NAME] [--variant NAME]
        [--ablation LIST] [--out DIR] [command-specific options]

Precedence: values from --config are overridden by explicit flags; the
DPX_SEED environment variable overrides the seed from either source.
Exit status 0 means every check the command ran passed; 1 means a check
failed or a run diverged; 2 is a usage/configuration error. All reports
are UTF-8 JSONL or CSV, with a rendered figure written alongside.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import reportio
from .attention import AttentionConfig
from .checkpoint import save_checkpoint
from .config import (
    ABLATION_TOKENS, RunConfig, config_to_dict, load_config, resolve_encoder_config,
)
from .costmodel import (
    compare_reports, count_attention, count_model, load_published,
    published_reductions,
)
from .encoder import MODEL_VARIANTS, preset_config, stage_geometries
from .errors import ConfigError, DpxError
from .gradcheck import run_gradcheck_battery, run_property_suite
from .metrics import SegmentationMap, confusion, macc, miou, pixel_acc
from .scene import SceneParams, generate_scene
from .tensor import RngState
from .train import Segmenter, smoke_train

COST_SCHEMA = "dpx.cost/1"
SHAPES_SCHEMA = "dpx.shapes/1"
TRAIN_SCHEMA = "dpx.train/1"
METRICS_SCHEMA = "dpx.metrics/1"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpx",
        description="cost reports, shape/gradient checks, metrics, and "
                    "synthetic-scene smoke training for the differential "
                    "pixel-aware RGB-D fusion stack",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, help="JSON run-config file")
        p.add_argument("--seed", type=int, help="RNG seed (DPX_SEED overrides)")
        p.add_argument("--preset", type=str, help="encoder preset name")
        p.add_argument("--variant", "--variants", dest="variant", type=str,
                       help="attention variant (comma list where applicable)")
        p.add_argument("--ablation", type=str,
                       help=f"comma list of {', '.join(ABLATION_TOKENS)}")
        p.add_argument("--out", type=str, help="output directory")
        p.add_argument("--height", type=int, help="input height")
        p.add_argument("--width", type=int, help="input width")
        p.add_argument("--classes", type=int, dest="num_classes")

    p = sub.add_parser("cost", help="parameter/FLOP reports and comparisons")
    common(p)
    p = sub.add_parser("shapes", help="encoder geometry walk for the config")
    common(p)
    p = sub.add_parser("gradcheck", help="finite-difference and property suites")
    common(p)
    p.add_argument("--quick", action="store_true",
                   help="property suite only (skip the FD battery)")
    p = sub.add_parser("smoke-train", help="overfit one synthetic scene")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--shapes", type=int, dest="num_shapes")
    p.add_argument("--stop-at-miou", type=float, default=0.95,
                   help="stop once mIoU reaches this value (>=1.01 disables)")
    p = sub.add_parser("metrics", help="segmentation metrics for two label maps")
    common(p)
    p.add_argument("--gt", type=str, required=True, help="DPTF int32 label map")
    p.add_argument("--pred", type=str, required=True, help="DPTF int32 label map")
    p = sub.add_parser("gen-scene", help="generate and save a synthetic scene")
    common(p)
    p.add_argument("--shapes", type=int, dest="num_shapes")
    return parser


def _resolve_run(args) -> RunConfig:
    run = load_config(args.config) if args.config else RunConfig()
    updates = {"command": args.command.replace("_", "-")}
    for field_name in ("seed", "preset", "variant", "height", "width",
                       "num_classes", "out_dir"):
        flag = getattr(args, field_name, None) if field_name != "out_dir" else args.out
        if flag is not None:
            updates[field_name] = flag
    if getattr(args, "ablation", None):
        updates["ablation"] = tuple(t for t in args.ablation.split(",") if t)
    for extra in ("steps", "lr", "num_shapes"):
        v = getattr(args, extra, None)
        if v is not None:
            updates[extra] = v
    variant = updates.get("variant", run.variant)
    if "," in variant:
        updates["variant"] = variant.split(",")[0]
    run = replace(run, **updates)
    env_seed = os.environ.get("DPX_SEED")
    if env_seed is not None:
        run = replace(run, seed=int(env_seed))
    return run


def _variant_list(args, run: RunConfig) -> list[str]:
    raw = args.variant if getattr(args, "variant", None) else run.variant
    variants = [v for v in raw.split(",") if v]
    for v in variants:
        if v not in MODEL_VARIANTS:
            raise ConfigError(
                f"unknown variant {v!r}; valid variants: {', '.join(MODEL_VARIANTS)}"
            )
    return variants


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_cost(args, run: RunConfig) -> int:
    out = Path(run.out_dir)
    variants = _variant_list(args, run)
    reports = []
    records = []
    for v in variants:
        cfg = resolve_encoder_config(replace(run, variant=v))
        rep = count_model(cfg, run.height, run.width, run.num_classes, run.decoder_dim)
        reports.append(rep)
        rows = rep.rows()
        reportio.write_csv(out / f"cost_{v}.csv", rows,
                           ["variant", "component", "params", "flops"])
        for r in rows:
            records.append({"schema": COST_SCHEMA, "height": run.height,
                            "width": run.width, **r})
    reportio.write_jsonl(out / "cost_records.jsonl", records)

    base = next((r for r in reports if r.variant == "ca"), reports[0])
    comparison = compare_reports(base, [r for r in reports if r is not base])
    pub = load_published()
    red = published_reductions(pub)
    comp_rows = [
        {"source": "computed", "baseline": c["baseline"], "variant": c["variant"],
         "param_reduction_pct": round(100 * c["param_reduction"], 2),
         "flop_reduction_pct": round(100 * c["flop_reduction"], 2)}
        for c in comparison
    ]
    for geom, r in red["flops"].items():
        comp_rows.append({
            "source": f"published@{geom}", "baseline": pub["baseline_variant"],
            "variant": pub["proposed_variant"],
            "param_reduction_pct": round(100 * red["params"], 2),
            "flop_reduction_pct": round(100 * r, 2),
        })
    reportio.write_csv(out / "cost_comparison.csv", comp_rows)

    reportio.fig_cost_comparison(reports, out / "cost_comparison.png")
    acfg = AttentionConfig(dim=32, heads=8, window=4, radius=1, n_noise=1)
    scaling = {}
    for v in ("ca", "dsim"):
        pts = []
        for n_side in (4, 8, 16, 32):
            rep = count_attention(v, acfg, n_side, n_side)
            pts.append((n_side * n_side, rep.component("attention_core").flops))
        scaling[v] = pts
    reportio.fig_flops_scaling(scaling, out / "flops_scaling.png")

    for rep in reports:
        print(f"{rep.variant}: params={rep.total_params:,} flops={rep.total_flops:,}")
    for c in comparison:
        print(f"computed {c['baseline']}->{c['variant']}: "
              f"params -{100 * c['param_reduction']:.2f}%, "
              f"flops -{100 * c['flop_reduction']:.2f}%")
    print(f"published {pub['baseline_variant']}->{pub['proposed_variant']}: "
          f"params -{100 * red['params']:.2f}%")
    for geom, r in red["flops"].items():
        print(f"published {pub['baseline_variant']}->{pub['proposed_variant']} "
              f"@{geom}: flops -{100 * r:.2f}%")
    return 0


def cmd_shapes(args, run: RunConfig) -> int:
    out = Path(run.out_dir)
    cfg = resolve_encoder_config(run)
    geoms = stage_geometries(cfg, run.height, run.width)
    records = []
    h, w = run.height, run.width
    for i, ((gh, gw), st) in enumerate(zip(geoms, cfg.stages)):
        records.append({
            "schema": SHAPES_SCHEMA, "stage": i + 1, "in_h": h, "in_w": w,
            "out_h": gh, "out_w": gw, "dim": st.dim, "heads": st.heads,
            "depth": st.depth, "tokens": gh * gw,
        })
        h, w = gh, gw
        print(f"stage {i + 1}: {records[-1]['in_h']}x{records[-1]['in_w']} -> "
              f"{gh}x{gw} tokens={gh * gw} dim={st.dim}")
    reportio.write_jsonl(out / "shapes_records.jsonl", records)
    return 0


def cmd_gradcheck(args, run: RunConfig) -> int:
    out = Path(run.out_dir)
    props = run_property_suite(run.seed, out / "property_records.jsonl")
    all_ok = all(p.passed for p in props)
    for p in props:
        print(f"property {p.name}: {'pass' if p.passed else 'FAIL'} ({p.detail})")
    if not args.quick:
        records = run_gradcheck_battery(run.seed)
        reportio.write_jsonl(out / "gradcheck_records.jsonl",
                             [r.to_json() for r in records])
        reportio.fig_gradcheck(records, out / "gradcheck_errors.png")
        failed = [r for r in records if not r.passed]
        worst = max((r.max_rel for r in records), default=0.0)
        print(f"gradcheck: {len(records)} parameter groups, "
              f"{len(failed)} failures, worst rel err {worst:.2e}")
        all_ok = all_ok and not failed
    return 0 if all_ok else 1


def cmd_smoke_train(args, run: RunConfig) -> int:
    out = Path(run.out_dir)
    scene = generate_scene(SceneParams(
        height=run.height, width=run.width, num_classes=run.num_classes,
        num_shapes=run.num_shapes, seed=run.seed,
    ))
    cfg = resolve_encoder_config(run)
    rng = RngState(run.seed)
    model = Segmenter.init(rng, cfg, run.num_classes, run.decoder_dim)
    result = smoke_train(model, scene, run.steps, run.lr,
                         stop_at_miou=args.stop_at_miou)
    reportio.write_jsonl(out / "train_log.jsonl", [
        {"schema": TRAIN_SCHEMA, "step": r.step, "loss": r.loss,
         "miou": r.miou, "pixel_acc": r.pixel_acc}
        for r in result.records
    ])
    reportio.fig_training_curves(result.records, out / "training_curves.png")
    save_checkpoint(out / "checkpoint", model,
                    meta={"config": config_to_dict(run), "steps": result.steps_run})
    print(f"smoke-train: {result.steps_run} steps, final loss "
          f"{result.records[-1].loss:.4f}, mIoU {result.final_miou:.4f}, "
          f"pixel acc {result.final_pixel_acc:.4f}")
    return 0


def cmd_metrics(args, run: RunConfig) -> int:
    out = Path(run.out_dir)
    gt = SegmentationMap.load(args.gt)
    pred = SegmentationMap.load(args.pred)
    k = run.num_classes
    k = max(k, int(gt.labels.max()) + 1, int(pred.labels.max()) + 1)
    cm = confusion(gt, pred, k)
    vals = {"miou": miou(cm), "macc": macc(cm), "pixel_acc": pixel_acc(cm)}
    reportio.write_csv(out / "metrics.csv",
                       [{"metric": name, "value": v} for name, v in vals.items()])
    reportio.write_jsonl(out / "metrics_records.jsonl",
                         [{"schema": METRICS_SCHEMA, "num_classes": k, **vals}])
    reportio.fig_confusion(cm, out / "confusion.png")
    for name, v in vals.items():
        print(f"{name}: {v:.6f}")
    return 0


def cmd_gen_scene(args, run: RunConfig) -> int:
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(SceneParams(
        height=run.height, width=run.width, num_classes=run.num_classes,
        num_shapes=run.num_shapes, seed=run.seed,
    ))
    from .tensor import save_dptf

    save_dptf(out / "scene_rgb.dptf", scene.rgb)
    save_dptf(out / "scene_depth.dptf", scene.depth)
    scene.labels.save(out / "scene_labels.dptf")
    reportio.fig_scene(scene, out / "scene_preview.png")
    print(f"scene: {run.height}x{run.width}, {run.num_classes} classes, "
          f"{run.num_shapes} shapes -> {out}")
    return 0


COMMAND_FNS = {
    "cost": cmd_cost,
    "shapes": cmd_shapes,
    "gradcheck": cmd_gradcheck,
    "smoke-train": cmd_smoke_train,
    "metrics": cmd_metrics,
    "gen-scene": cmd_gen_scene,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        run = _resolve_run(args)
        code = COMMAND_FNS[args.command](args, run)
    except (ConfigError, DpxError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
