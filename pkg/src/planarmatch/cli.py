"""Command-line surface: scene generation, pipeline runs, ablations, benchmarks.

Exit codes: 0 success, 1 usage or validation error, 2 runtime/IO failure.
Every command is reproducible byte-for-byte for a fixed config and seed;
wall-clock figures go to a separate ``*_timing.txt`` file so the deterministic
artifacts stay comparable.  The default output directory comes from
``PLANARMATCH_OUT_DIR`` (falling back to the current directory).
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from .config import RunConfig, VARIANTS, derive_seed
from .errors import EstimationFailed, GenerationFailed, PlanarMatchError
from .evaluation import (
    MetricReport,
    estimate_relative_pose,
    pose_error,
    point_accuracy,
    run_ablation,
)
from .pipeline import prepare_bundle, run_variant, supervision_losses
from .refinement import attention_cost
from .scene import generate_scene, project_correspondences
from . import storage

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(USAGE_EXIT)


def _out_dir(args) -> str:
    out = args.out or os.environ.get("PLANARMATCH_OUT_DIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _parse_image_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise ValueError(f"image size must look like 640x480, got {text!r}") from exc


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        with open(args.config) as handle:
            cfg = RunConfig.from_ini_text(handle.read())
    overrides = {}
    for name in (
        "seed",
        "n_planes",
        "noise_sigma",
        "baseline_scale",
        "descriptor_dim",
        "theta1",
        "variant",
        "seg_mode",
        "ransac_threshold_px",
        "gt_stride",
        "min_confidence",
    ):
        if hasattr(args, name):
            overrides[name] = getattr(args, name)
    if getattr(args, "image_size", None):
        overrides["image_width"], overrides["image_height"] = _parse_image_size(args.image_size)
    if getattr(args, "fronto_parallel", False):
        overrides["fronto_parallel"] = True
    cfg.apply_overrides(overrides)
    cfg.validate()
    return cfg


def _maybe_emit_config(cfg: RunConfig, args, out: str) -> None:
    if getattr(args, "emit_effective_config", False):
        storage.atomic_write_text(os.path.join(out, "effective_config.ini"), cfg.to_ini_text())


def cmd_gen_scene(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args)
    scene = generate_scene(
        seed=cfg.seed,
        n_planes=cfg.n_planes,
        image_size=cfg.image_size,
        baseline_scale=cfg.baseline_scale,
        fronto_parallel=cfg.fronto_parallel,
    )
    field = project_correspondences(scene, stride=cfg.gt_stride)
    storage.save_scene(scene, os.path.join(out, "scene.json"))
    storage.save_field(field, os.path.join(out, "gt_field.bin"))
    _maybe_emit_config(cfg, args, out)
    counts = np.bincount(field.plane_id[field.plane_id >= 0], minlength=len(scene.planes))
    print(f"scene seed={cfg.seed} planes={len(scene.planes)} image={cfg.image_width}x{cfg.image_height}")
    for k, frac in enumerate(counts / field.plane_id.size):
        print(f"  plane {k}: visible over {100 * frac:.1f}% of pixels")
    print(f"  valid correspondences: {100 * field.valid.mean():.1f}%")
    print(f"wrote {out}/scene.json, {out}/gt_field.bin")
    return 0


def cmd_run_pipeline(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args)
    scene = storage.load_scene(args.scene)
    field = storage.load_field(args.gt_field) if args.gt_field else None

    t0 = time.perf_counter()
    bundle = prepare_bundle(scene, cfg)
    output = run_variant(bundle, cfg.variant, cfg)
    losses = supervision_losses(bundle, output, cfg)
    elapsed = time.perf_counter() - t0

    storage.save_matches(
        output.p_s,
        output.p_t,
        output.confidence,
        os.path.join(out, "matches.txt"),
        os.path.join(out, "matches.bin"),
        scene.image_size,
    )

    from .evaluation import evaluate_output

    row = evaluate_output(scene, output, cfg)
    report = MetricReport(
        variant=cfg.variant,
        n_scenes=1,
        n_matches=row["n_matches"],
        auc5=max(0.0, 1.0 - row["pose_err_deg"] / 5.0) if np.isfinite(row["pose_err_deg"]) else 0.0,
        auc10=max(0.0, 1.0 - row["pose_err_deg"] / 10.0) if np.isfinite(row["pose_err_deg"]) else 0.0,
        auc20=max(0.0, 1.0 - row["pose_err_deg"] / 20.0) if np.isfinite(row["pose_err_deg"]) else 0.0,
        median_endpoint_px=row["median_endpoint_px"],
        point_accuracy_1px=row["point_accuracy"],
        corner_frac_1px=None,
        corner_frac_3px=None,
        corner_frac_5px=None,
        inner_products=output.counter.inner_products,
        attention_queries=output.counter.queries,
    )
    if field is not None and output.p_s.shape[0]:
        try:
            report.point_accuracy_1px = point_accuracy(
                output.p_s, output.p_t, field, cfg.point_accuracy_threshold_px
            )
        except ValueError:
            pass  # matches off the field grid; analytic accuracy already set
    sections = {
        "stages": output.stats,
        "losses": losses,
        "pose": {
            "rot_err_deg": row["rot_err_deg"],
            "trans_err_deg": row["trans_err_deg"],
            "inliers": row["pose_inliers"],
        },
    }
    storage.atomic_write_text(
        os.path.join(out, "report.txt"), storage.report_to_text(report, sections)
    )
    storage.atomic_write_text(
        os.path.join(out, "report_timing.txt"), f"wall_time_s = {elapsed!r}\n"
    )
    _maybe_emit_config(cfg, args, out)
    print(f"variant={cfg.variant} matches={row['n_matches']} "
          f"median_err={row['median_endpoint_px']:.3f}px accuracy@1px={row['point_accuracy']:.3f}")
    print(f"wrote {out}/matches.txt, {out}/matches.bin, {out}/report.txt")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args)
    seeds = list(range(args.first_seed, args.first_seed + args.scenes))
    t0 = time.perf_counter()
    reports, rows = run_ablation(seeds, cfg)
    elapsed = time.perf_counter() - t0
    storage.atomic_write_text(os.path.join(out, "ablation.csv"), storage.metrics_csv(rows))
    text = []
    for variant in VARIANTS:
        text.append(storage.report_to_text(reports[variant]))
    storage.atomic_write_text(os.path.join(out, "ablation_report.txt"), "\n".join(text))
    storage.atomic_write_text(
        os.path.join(out, "ablation_timing.txt"), f"wall_time_s = {elapsed!r}\n"
    )
    _maybe_emit_config(cfg, args, out)
    for variant in VARIANTS:
        r = reports[variant]
        print(
            f"{variant:16s} median={r.median_endpoint_px:8.3f}px "
            f"auc5={r.auc5:.3f} auc10={r.auc10:.3f} auc20={r.auc20:.3f}"
        )
    print(f"wrote {out}/ablation.csv, {out}/ablation_report.txt")
    return 0


def cmd_bench_attn(args) -> int:
    uni = attention_cost("unidirectional_7x7")
    bi = attention_cost("bidirectional_5x5_selfcross")
    ratio = bi / uni
    lines = [
        "[attention_cost]",
        f"queries = {args.queries}",
        f"unidirectional_7x7_per_match = {uni}",
        f"bidirectional_5x5_selfcross_per_match = {bi}",
        f"unidirectional_total = {uni * args.queries}",
        f"bidirectional_total = {bi * args.queries}",
        f"ratio = {ratio!r}",
    ]
    if args.time:
        rng = np.random.default_rng(0)
        q = rng.normal(size=(args.queries, 64))
        keys = rng.normal(size=(49, 64))
        t0 = time.perf_counter()
        _ = q @ keys.T
        uni_t = time.perf_counter() - t0
        tokens = rng.normal(size=(50, 64))
        t0 = time.perf_counter()
        for _ in range(args.queries):
            _ = tokens @ tokens.T
        bi_t = time.perf_counter() - t0
        lines += ["[timing]", f"unidirectional_s = {uni_t!r}", f"bidirectional_s = {bi_t!r}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _out_dir(args)
        storage.atomic_write_text(os.path.join(out, "attention_cost.txt"), text)
        print(f"wrote {out}/attention_cost.txt")
    print(text, end="")
    return 0


def cmd_eval_pose(args) -> int:
    cfg = _config_from_args(args)
    scene = storage.load_scene(args.scene)
    with open(args.matches, "rb") as handle:
        data = handle.read()
    if data[:4] == storage.MAGIC:
        p_s, p_t, conf = storage.matches_from_bytes(data)
    else:
        p_s, p_t, conf = storage.matches_from_text(data.decode())
    try:
        est = estimate_relative_pose(
            p_s,
            p_t,
            scene.cam1.intrinsics,
            scene.cam2.intrinsics,
            cfg.ransac_threshold_px,
            seed=derive_seed(cfg.seed, "eval-pose"),
        )
    except EstimationFailed as exc:
        print(f"pose estimation failed: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    rot_err, trans_err = pose_error(est, scene.cam2.pose)
    print(f"matches = {len(p_s)}")
    print(f"inliers = {est.inliers}")
    print(f"rotation_error_deg = {rot_err!r}")
    print(f"translation_error_deg = {trans_err!r}")
    print(f"translation_degenerate = {est.translation_degenerate}")
    return 0


def cmd_report(args) -> int:
    with open(args.metrics) as handle:
        lines = handle.read().strip().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
    by_variant: dict[str, list[float]] = {}
    for row in rows:
        med = row.get("median_endpoint_px")
        if med:
            by_variant.setdefault(row["variant"], []).append(float(med))
    print(f"{'variant':16s} {'scenes':>6s} {'median_px':>10s} {'best_px':>10s} {'worst_px':>10s}")
    for variant in sorted(by_variant):
        vals = np.array(by_variant[variant])
        print(
            f"{variant:16s} {len(vals):6d} {np.median(vals):10.3f} "
            f"{vals.min():10.3f} {vals.max():10.3f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="planarmatch", description=__doc__)
    parser.add_argument("--version", action="version", version=f"planarmatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_config=True):
        p.add_argument("--out", help="output directory (default: $PLANARMATCH_OUT_DIR or .)")
        p.add_argument("--seed", type=int, default=None, help="root seed")
        if with_config:
            p.add_argument("--config", help="INI config file; flags override it")
            p.add_argument(
                "--emit-effective-config",
                action="store_true",
                help="write the merged config next to the outputs",
            )

    p = sub.add_parser("gen-scene", help="generate a synthetic scene and its ground truth")
    add_common(p)
    p.add_argument("--planes", dest="n_planes", type=int, default=None)
    p.add_argument("--image-size", default=None, help="WxH, divisible by 32")
    p.add_argument("--baseline", dest="baseline_scale", type=float, default=None)
    p.add_argument("--fronto-parallel", action="store_true")
    p.add_argument("--stride", dest="gt_stride", type=int, default=None)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("run-pipeline", help="run a matching variant against a scene")
    add_common(p)
    p.add_argument("--scene", required=True, help="scene.json path")
    p.add_argument("--gt-field", dest="gt_field", default=None, help="gt_field.bin path")
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--noise", dest="noise_sigma", type=float, default=None)
    p.add_argument("--seg-mode", dest="seg_mode", default=None)
    p.set_defaults(func=cmd_run_pipeline)

    p = sub.add_parser("ablate", help="run all variants over a seeded scene set")
    add_common(p)
    p.add_argument("--scenes", type=int, default=50, help="number of scenes")
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--planes", dest="n_planes", type=int, default=None)
    p.add_argument("--noise", dest="noise_sigma", type=float, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-attn", help="report attention inner-product counts")
    p.add_argument("--queries", type=int, default=1)
    p.add_argument("--time", action="store_true", help="also measure wall time")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("eval-pose", help="relative pose from a matches file")
    add_common(p)
    p.add_argument("--matches", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--ransac-threshold", dest="ransac_threshold_px", type=float, default=None)
    p.set_defaults(func=cmd_eval_pose)

    p = sub.add_parser("report", help="summarize an ablation metrics CSV")
    p.add_argument("--metrics", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except GenerationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    except (OSError, PlanarMatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
