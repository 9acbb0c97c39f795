"""Command-line surface: transform, synth, grid, train, eval, explain.

Every command writes a run manifest next to its outputs and exits 0 on
success, 2 on configuration errors, 3 on data errors and 4 when a NaN/Inf
surfaces anywhere in the numerics.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import SynthConfig, load_dataset, synth_generate
from .errors import ConfigError, DataError
from .explain import explain_samples, importance_report, importance_to_cartesian
from .geometry import (CartesianImage, normalize_laterality, read_faz_sidecar,
                       to_polar, write_faz_sidecar)
from .grids import GridSpec, build_grid, load_prior, polar_region_rects
from .imageio import ImageFormatError, read_pgm, write_pgm, write_ppm
from .model import ModelConfig
from .tensor import NumericError
from .training import (TrainConfig, load_checkpoint, predict_samples,
                       prepare_samples, subject_level_metrics, train)
from .data import metrics as compute_metrics
from . import reports

log = logging.getLogger("polarnet")


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


class Manifest:
    """Run record: command, config hash, seed, timestamps, outputs."""

    def __init__(self, command, config_payload, seed=None):
        self.data = {
            "command": command,
            "config_hash": config_hash(config_payload),
            "seed": seed,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            "outputs": [],
            "tool_version": __version__,
        }

    def add(self, *paths):
        self.data["outputs"].extend(str(p) for p in paths)

    def write(self, path):
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc


def _parse_center(text):
    try:
        u, v = (float(c) for c in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--center must be 'u,v', got {text!r}") from exc
    return u, v


# ---------------------------------------------------------------------------
# commands

def cmd_transform(args):
    center, laterality = None, args.laterality
    if args.sidecar:
        center, side_lat = read_faz_sidecar(args.sidecar)
        laterality = laterality or side_lat
    if args.center:
        center = _parse_center(args.center)
    if center is None:
        raise ConfigError("no FAZ center: pass --center u,v or --sidecar")
    laterality = laterality or "unknown"

    plane = read_pgm(args.infile)
    img = CartesianImage(plane, center=center, laterality=laterality)
    img = normalize_laterality(img)
    polar = to_polar(img, args.theta, args.r, start_angle=args.start_angle,
                     radius_override=args.radius)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, polar.plane)
    sidecar_path = out.with_suffix(".json")
    write_faz_sidecar(sidecar_path, polar.origin, img.laterality,
                      extra={"R": polar.R, "start_angle": polar.start_angle,
                             "theta_samples": polar.theta_samples,
                             "r_samples": polar.r_samples})
    manifest = Manifest("transform", vars(args))
    manifest.add(out, sidecar_path)
    manifest.write(out.parent / f"{out.stem}_manifest.json")
    return 0


def cmd_synth(args):
    raw = _load_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SynthConfig.from_dict(raw)
    out = reports.ensure_dir(args.out)
    subjects = synth_generate(cfg, out)
    manifest = Manifest("synth", cfg.to_dict(), seed=cfg.seed)
    manifest.add(out)
    manifest.write(out / "run_manifest.json")
    print(f"wrote {len(subjects)} subjects to {out}")
    return 0


def cmd_grid(args):
    spec = (GridSpec(args.kind) if args.kind != "Hemispheric"
            else GridSpec(args.kind, radii_fractions=(1.0,)))
    size = args.size
    center = ((size - 1) / 2.0, (size - 1) / 2.0)
    radius = args.radius if args.radius else (size - 1) / 2.0
    mask = build_grid(spec, radius, center, size, size)
    out = reports.ensure_dir(args.out)
    step = 255 // len(mask.names)
    write_pgm(out / f"grid_{args.kind}.pgm",
              (mask.label_map * step).astype(np.uint8))
    reports.save_grid_figure(mask.label_map, mask.names,
                             out / f"grid_{args.kind}.png")
    with open(out / f"grid_{args.kind}.json", "w", encoding="utf-8") as fh:
        json.dump({"kind": spec.kind, "names": mask.names,
                   "radius": mask.radius, "origin": list(mask.origin),
                   "polar_rects": {n: r for n, r in
                                   polar_region_rects(spec, args.theta, args.r)}},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest = Manifest("grid", vars(args))
    manifest.add(out)
    manifest.write(out / "run_manifest.json")
    return 0


def _model_config_from(raw_train_cfg, override_path):
    if override_path:
        return ModelConfig.from_dict(_load_json(override_path))
    if "model" in raw_train_cfg:
        return ModelConfig.from_dict(raw_train_cfg["model"])
    return ModelConfig()


def cmd_train(args):
    raw = _load_json(args.config)
    model_cfg = _model_config_from(raw, args.model_config)
    cfg = TrainConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    subjects = load_dataset(args.data)
    out = reports.ensure_dir(args.out)
    result = train(subjects, model_cfg, cfg, out_dir=out, jobs=args.jobs)
    payload = result["payload"]
    reports.save_training_curves(payload, out / "training_curves.png")
    fold_rows = [{"fold": f["fold"], **f["test"]} for f in payload["folds"]]
    reports.write_metrics_csv(fold_rows, payload["summary"], out / "metrics.csv")
    for key in ("ACC", "AUROC", "Kappa"):
        s = payload["summary"][key]
        print(f"{key}\t{s['mean']:.4f}±{s['std']:.4f}")
    manifest = Manifest("train", {"train": cfg.to_dict(),
                                  "model": model_cfg.to_dict(),
                                  "data": str(args.data)}, seed=cfg.seed)
    manifest.add(out)
    manifest.write(out / "run_manifest.json")
    return 0


def _fold_checkpoints(run_dir):
    run = Path(run_dir)
    paths = sorted(run.glob("fold*.ckpt"))
    if not paths:
        raise DataError(f"no fold checkpoints under {run}")
    return paths


def _samples_by_subject(samples):
    by_id = {}
    for s in samples:
        by_id.setdefault(s.subject_id, []).append(s)
    return by_id


def cmd_eval(args):
    subjects = load_dataset(args.data)
    out = reports.ensure_dir(args.out or args.run)
    fold_rows = []
    subj_rows = []
    prior = load_prior(args.prior) if args.prior else None
    samples_cache = {}
    for path in _fold_checkpoints(args.run):
        model, manifest = load_checkpoint(path)
        key = tuple(model.config.input_size)
        if key not in samples_cache:
            samples_cache[key] = prepare_samples(subjects, model.config.input_size)
        by_id = _samples_by_subject(samples_cache[key])
        test_ids = manifest.get("test_subjects") or sorted(by_id)
        test_samples = [s for sid in test_ids for s in by_id.get(sid, [])]
        if not test_samples:
            raise DataError(f"{path.name}: none of its test subjects are in {args.data}")
        scores, labels, sids = predict_samples(model, test_samples, prior=prior)
        m = compute_metrics(labels, scores)
        fold_rows.append({"fold": manifest.get("fold"), **m})
        sm = subject_level_metrics(sids, labels, scores)
        if sm:
            subj_rows.append({"fold": manifest.get("fold"), **sm})
    summary = _summary_of(fold_rows)
    for key in ("ACC", "AUROC", "Kappa"):
        print(f"{key}\t{summary[key]['mean']:.4f}±{summary[key]['std']:.4f}")
    reports.write_metrics_csv(fold_rows, summary, out / "eval_metrics.csv")
    reports.save_eval_figure(fold_rows, summary, out / "eval_summary.png")
    payload = {"folds": fold_rows, "summary": summary,
               "per_subject": subj_rows}
    with open(out / "eval.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest = Manifest("eval", {"run": str(args.run), "data": str(args.data),
                                 "prior": args.prior})
    manifest.add(out / "eval_metrics.csv", out / "eval_summary.png")
    manifest.write(out / "eval_manifest.json")
    return 0


def _summary_of(rows):
    out = {}
    for key in ("ACC", "AUROC", "Kappa"):
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def cmd_explain(args):
    subjects = load_dataset(args.data)
    out = reports.ensure_dir(args.out)
    spec = GridSpec(args.grid)
    prior = load_prior(args.prior) if args.prior else None
    per_fold = []
    agg = {}
    agg_global = []
    agg_cam = []
    samples_cache = {}
    for path in _fold_checkpoints(args.run):
        model, manifest = load_checkpoint(path)
        if prior is not None:
            model.prior = prior
        key = tuple(model.config.input_size)
        if key not in samples_cache:
            samples_cache[key] = prepare_samples(subjects, model.config.input_size)
        by_id = _samples_by_subject(samples_cache[key])
        test_ids = manifest.get("test_subjects") or sorted(by_id)
        test_samples = [s for sid in test_ids for s in by_id.get(sid, [])]
        if not test_samples:
            raise DataError(f"{path.name}: none of its test subjects are in {args.data}")
        projections, global_imp, mean_cam = explain_samples(
            model, test_samples, class_index=args.class_index, spec=spec)
        best = max(projections, key=lambda n: projections[n].matrix.max())
        per_fold.append({
            "fold": manifest.get("fold"),
            "projections": {n: m.matrix.tolist() for n, m in projections.items()},
            "centers": {n: m.center for n, m in projections.items()},
            "global": global_imp.matrix.tolist(),
            "argmax": {"projection": best,
                       "cell": [int(i) for i in projections[best].argmax_cell()]},
        })
        for name, imp in projections.items():
            agg.setdefault(name, []).append(imp)
        agg_global.append(global_imp)
        agg_cam.append(mean_cam)

    from .explain import ImportanceMatrix
    mean_imp = {name: ImportanceMatrix(
        matrix=np.mean([m.matrix for m in mats], axis=0),
        center=float(np.mean([m.center for m in mats])),
        class_index=args.class_index, grid=spec.kind)
        for name, mats in agg.items()}
    global_imp = ImportanceMatrix(
        matrix=np.mean([m.matrix for m in agg_global], axis=0),
        center=float(np.mean([m.center for m in agg_global])),
        class_index=args.class_index, grid=spec.kind)
    report = importance_report(mean_imp, global_imp)
    report["folds"] = per_fold
    with open(out / "importance.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    size = args.render_size
    origin = ((size - 1) / 2.0, (size - 1) / 2.0)
    radius = (size - 1) / 2.0
    heatmaps = {}
    written = [out / "importance.json"]
    for name, imp in mean_imp.items():
        hm = importance_to_cartesian(imp.normalized(), radius, origin,
                                     (size, size), spec)
        heatmaps[name] = hm
        write_ppm(out / f"heatmap_{name}.ppm", hm.rgb)
        written.append(out / f"heatmap_{name}.ppm")
    cam_hm = importance_to_cartesian(np.mean(agg_cam, axis=0), radius, origin,
                                     (size, size))
    heatmaps["fusion"] = cam_hm
    write_ppm(out / "heatmap_fusion_cam.ppm", cam_hm.rgb)
    write_pgm(out / "heatmap_mask.pgm",
              (cam_hm.mask * 255).astype(np.uint8))
    reports.save_importance_figure(heatmaps, mean_imp, out / "importance.png")
    written += [out / "heatmap_fusion_cam.ppm", out / "heatmap_mask.pgm",
                out / "importance.png"]
    manifest = Manifest("explain", {"run": str(args.run), "data": str(args.data),
                                    "class": args.class_index,
                                    "grid": args.grid, "prior": args.prior})
    manifest.add(*written)
    manifest.write(out / "run_manifest.json")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="polarnet",
        description="FAZ-centered polar transformation, region grids and an "
                    "interpretable multi-branch classifier for OCTA projections.")
    parser.add_argument("--verbose", "-v", action="store_true",
                        help="per-epoch progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform", help="polar-transform one PGM image")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--center", help="FAZ center as 'u,v' (pixel coordinates)")
    p.add_argument("--sidecar", help="JSON sidecar with center/laterality")
    p.add_argument("--laterality", choices=["OD", "OS", "unknown"])
    p.add_argument("--theta", type=int, default=224)
    p.add_argument("--r", type=int, default=224)
    p.add_argument("--start-angle", type=float, default=0.0)
    p.add_argument("--radius", type=float, help="override the transform radius")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("grid", help="write region-mask images for a grid")
    p.add_argument("--kind", choices=["ETDRS", "IE", "Hemispheric"],
                   default="ETDRS")
    p.add_argument("--size", type=int, default=448)
    p.add_argument("--radius", type=float)
    p.add_argument("--theta", type=int, default=224)
    p.add_argument("--r", type=int, default=224)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("train", help="k-fold cross-validated training")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True,
                   help="JSON: {lr, batch_size, epochs, seed, folds, "
                        "augment_deg, prior_path}; optional 'model' object")
    p.add_argument("--model-config", help="separate ModelConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score fold checkpoints on their test folds")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--prior")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="region importance + heatmaps")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class", dest="class_index", type=int, default=1)
    p.add_argument("--grid", choices=["ETDRS", "IE"], default="ETDRS")
    p.add_argument("--prior")
    p.add_argument("--render-size", type=int, default=384)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ImageFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
