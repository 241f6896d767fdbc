"""Command-line interface: one executable, one subcommand per pipeline
stage.

Subcommands: train-head, parcelize, fit-segments, segment, eval-dice,
index-views, classify-views, render-overlay. Every subcommand accepts
--seed and --threads; with --threads 1 (the default; execution is
single-threaded regardless) and a fixed seed all artifacts are bitwise
reproducible.

Exit codes: 0 success, 2 configuration error (bad flags, missing
top-level inputs), 3 data error (malformed or inconsistent files),
4 numeric failure. Set ALAN_LOG=DEBUG|INFO|WARNING for verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from alan import metrics_eval, parcel2segment, trainer, view_knn
from alan.errors import ConfigError, DataError, NumericError
from alan.feature_store import (
    MaskRaster,
    frame_image_path,
    read_features,
    read_manifest,
    read_mask,
    read_parcel_map,
    read_pgm,
    write_mask,
    write_parcel_map,
)
from alan.raptor_head import infer_parcel_map, load_checkpoint
from alan.stego_objective import LossConfig
from alan.trainer import TrainConfig

logger = logging.getLogger(__name__)

_TRAIN_KEYS = (
    "learning_rate", "epochs", "frames_per_clip", "frame_stride", "K",
    "seed", "adam_beta1", "adam_beta2", "adam_eps", "batch_sequences",
    "standardize_features",
)
_LOSS_KEYS = (
    "lambda_self", "lambda_similar", "lambda_repulsive",
    "b_self", "b_similar", "b_repulsive", "center_features",
)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def _setup_logging():
    level = os.environ.get("ALAN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alan",
        description="Parcelization, segmentation and view classification "
                    "over precomputed patch-feature tensors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="master seed for all randomness (default 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads; 1 guarantees bitwise "
                             "determinism (default 1; execution is "
                             "currently single-threaded regardless)")

    p = sub.add_parser("train-head", parents=[common],
                       help="train the projection head on a manifest")
    p.add_argument("--manifest", required=True, help="dataset manifest (YAML)")
    p.add_argument("--config", help="training config file (YAML), keys as in "
                                    "--help; flags override the file")
    p.add_argument("--out", default=".", help="output directory (default .)")
    defaults = TrainConfig(K=2)
    p.add_argument("--k", "--K", dest="K", type=int,
                   help="K: number of parcel classes (required here or in "
                        "the config file)")
    p.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float,
                   help=f"learning_rate (default {defaults.learning_rate})")
    p.add_argument("--epochs", type=int,
                   help=f"epochs (default {defaults.epochs})")
    p.add_argument("--frames-per-clip", dest="frames_per_clip", type=int,
                   help=f"frames_per_clip (default {defaults.frames_per_clip})")
    p.add_argument("--frame-stride", dest="frame_stride", type=int,
                   help=f"frame_stride (default {defaults.frame_stride})")
    p.add_argument("--adam-beta1", dest="adam_beta1", type=float,
                   help=f"adam_beta1 (default {defaults.adam_beta1})")
    p.add_argument("--adam-beta2", dest="adam_beta2", type=float,
                   help=f"adam_beta2 (default {defaults.adam_beta2})")
    p.add_argument("--adam-eps", dest="adam_eps", type=float,
                   help=f"adam_eps (default {defaults.adam_eps})")
    p.add_argument("--batch-sequences", dest="batch_sequences", type=int,
                   help=f"batch_sequences (default "
                        f"{defaults.batch_sequences}; only 2 is supported)")
    p.add_argument("--standardize-features", dest="standardize_features",
                   action=argparse.BooleanOptionalAction, default=None,
                   help=f"standardize_features (default "
                        f"{defaults.standardize_features})")
    loss_defaults = LossConfig()
    p.add_argument("--lambda-self", dest="lambda_self", type=float,
                   help=f"lambda_self (default {loss_defaults.lambda_self})")
    p.add_argument("--lambda-similar", dest="lambda_similar", type=float,
                   help=f"lambda_similar (default {loss_defaults.lambda_similar})")
    p.add_argument("--lambda-repulsive", dest="lambda_repulsive", type=float,
                   help=f"lambda_repulsive (default "
                        f"{loss_defaults.lambda_repulsive})")
    p.add_argument("--b-self", dest="b_self", type=float,
                   help=f"b_self (default {loss_defaults.b_self})")
    p.add_argument("--b-similar", dest="b_similar", type=float,
                   help=f"b_similar (default {loss_defaults.b_similar})")
    p.add_argument("--b-repulsive", dest="b_repulsive", type=float,
                   help=f"b_repulsive (default {loss_defaults.b_repulsive})")
    p.add_argument("--center-features", dest="center_features",
                   action=argparse.BooleanOptionalAction, default=None,
                   help=f"center_features (default "
                        f"{loss_defaults.center_features})")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("parcelize", parents=[common],
                       help="write per-frame parcel-label rasters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="ALANHEAD file")
    p.add_argument("--frames", default="all",
                   help="frame selector: 'all', 'masks' (annotated frames "
                        "only) or a comma list of indices (default all)")
    p.add_argument("--feature-stats",
                   help="standardization stats file written by train-head; "
                        "apply before inference")
    p.add_argument("--out", default=".", help="output directory (default .)")
    p.set_defaults(func=cmd_parcelize)

    p = sub.add_parser("fit-segments", parents=[common],
                       help="learn the interior parcel set for one region")
    p.add_argument("--manifest", required=True,
                   help="manifest with ground-truth mask references")
    p.add_argument("--parcels", required=True,
                   help="directory of ALANPMAP files from parcelize")
    p.add_argument("--region", required=True, help="region label, e.g. LV")
    spec_defaults = parcel2segment.SegmenterSpec(K=2, region_label="")
    snake_defaults = parcel2segment.SnakeParams()
    p.add_argument("--overlap-frac", type=float,
                   default=spec_defaults.overlap_frac,
                   help=f"per-frame overlap threshold (default "
                        f"{spec_defaults.overlap_frac})")
    p.add_argument("--hit-rate", type=float, default=spec_defaults.hit_rate,
                   help=f"fraction of present frames that must clear the "
                        f"overlap threshold (default {spec_defaults.hit_rate})")
    p.add_argument("--presence-rate", type=float,
                   default=spec_defaults.presence_rate,
                   help=f"fraction of all frames the parcel must appear in "
                        f"(default {spec_defaults.presence_rate})")
    p.add_argument("--enclave-cutoff", type=int,
                   default=spec_defaults.enclave_cutoff,
                   help=f"enclave outside-adjacency cutoff (default "
                        f"{spec_defaults.enclave_cutoff})")
    p.add_argument("--closing-radius", type=int,
                   default=spec_defaults.closing_radius,
                   help=f"closing disk radius (default "
                        f"{spec_defaults.closing_radius})")
    p.add_argument("--snake-alpha", type=float, default=snake_defaults.alpha,
                   help=f"snake continuity weight (default "
                        f"{snake_defaults.alpha})")
    p.add_argument("--snake-beta", type=float, default=snake_defaults.beta,
                   help=f"snake curvature weight (default "
                        f"{snake_defaults.beta})")
    p.add_argument("--snake-gamma", type=float, default=snake_defaults.gamma,
                   help=f"snake step size (default {snake_defaults.gamma})")
    p.add_argument("--snake-iters", type=int, default=snake_defaults.max_iters,
                   help=f"snake iterations (default "
                        f"{snake_defaults.max_iters})")
    p.add_argument("--snake-w-edge", type=float, default=snake_defaults.w_edge,
                   help=f"snake edge attraction (default "
                        f"{snake_defaults.w_edge})")
    p.add_argument("--out", default="segmenter.yaml",
                   help="output spec path (default segmenter.yaml)")
    p.set_defaults(func=cmd_fit_segments)

    p = sub.add_parser("segment", parents=[common],
                       help="apply a segmenter spec to parcel maps")
    p.add_argument("--parcels", required=True,
                   help="directory of ALANPMAP files")
    p.add_argument("--spec", required=True, help="ALANSEG spec file")
    p.add_argument("--manifest",
                   help="optional manifest: entries with image_path supply "
                        "the snake's edge frames")
    p.add_argument("--out", default=".", help="output directory (default .)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval-dice", parents=[common],
                       help="score predicted masks against the manifest's "
                            "annotations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True,
                   help="directory of predicted ALANMASK files")
    p.add_argument("--region", required=True)
    p.add_argument("--bin-width", type=float, default=0.05,
                   help="histogram bin width (default 0.05)")
    p.add_argument("--out", default=".", help="output directory (default .)")
    p.set_defaults(func=cmd_eval_dice)

    p = sub.add_parser("index-views", parents=[common],
                       help="build a view-classification index from global "
                            "descriptors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="views.alanknn",
                   help="output index path (default views.alanknn)")
    p.set_defaults(func=cmd_index_views)

    p = sub.add_parser("classify-views", parents=[common],
                       help="classify echo views with the weighted kNN")
    p.add_argument("--index", required=True, help="ALANKNN index file")
    p.add_argument("--manifest", required=True,
                   help="manifest of query sequences")
    knn_defaults = view_knn.KnnConfig()
    p.add_argument("--k", type=int, default=knn_defaults.k,
                   help=f"neighbor count (default {knn_defaults.k})")
    p.add_argument("--tau", "--temperature", dest="temperature", type=float,
                   default=knn_defaults.temperature,
                   help=f"vote temperature (default "
                        f"{knn_defaults.temperature})")
    p.add_argument("--out", default="predictions.txt",
                   help="predictions file (default predictions.txt)")
    p.set_defaults(func=cmd_classify_views)

    p = sub.add_parser("render-overlay", parents=[common],
                       help="render a prediction/annotation overlay as PPM")
    p.add_argument("--pred", required=True, help="predicted ALANMASK file")
    p.add_argument("--gt", help="optional ground-truth ALANMASK file")
    p.add_argument("--frame", help="optional grayscale PGM background")
    p.add_argument("--parcels", help="optional ALANPMAP for parcel borders")
    p.add_argument("--out", default="overlay.ppm",
                   help="output image path (default overlay.ppm)")
    p.set_defaults(func=cmd_render_overlay)
    return parser


# ---------------------------------------------------------------------------
# Helpers

def _require_file(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pmap_name(seq_id: str, frame_idx: int) -> str:
    return f"{seq_id}_f{frame_idx:05d}"


def _select_frames(spec: str, t: int, entry) -> list[int]:
    if spec == "all":
        return list(range(t))
    if spec == "masks":
        return sorted({m.frame_idx for m in entry.masks})
    try:
        frames = [int(s) for s in spec.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --frames selector '{spec}'") from exc
    for idx in frames:
        if not 0 <= idx < t:
            raise DataError(
                f"frame {idx} out of range for '{entry.seq_id}' (T={t})"
            )
    return frames


# ---------------------------------------------------------------------------
# Subcommands

def cmd_train_head(args) -> int:
    manifest = read_manifest(_require_file(args.manifest, "manifest"))
    cfg = _assemble_train_config(args)
    out = _out_dir(args)
    checkpoint = out / "head.alanhead"
    stats_path = out / "feature_stats.yaml" if cfg.standardize_features else None
    params, report = trainer.train_from_manifest(
        manifest, cfg, checkpoint_path=checkpoint, stats_path=stats_path,
    )
    trainer.write_train_report(report, out / "train_report.txt")
    print(f"checkpoint: {checkpoint}")
    print(f"final epoch loss: {report.epoch_losses[-1]:.6f}")
    return 0


def _assemble_train_config(args) -> TrainConfig:
    doc: dict = {}
    if args.config:
        cfg_path = _require_file(args.config, "config file")
        with open(cfg_path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{cfg_path}: config must be a mapping")
    loss_doc = doc.pop("loss", {}) or {}
    unknown = set(doc) - set(_TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    unknown = set(loss_doc) - set(_LOSS_KEYS)
    if unknown:
        raise ConfigError(f"unknown loss config keys: {sorted(unknown)}")
    kwargs = dict(doc)
    loss_kwargs = dict(loss_doc)
    for key in _TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            kwargs[key] = value
    for key in _LOSS_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            loss_kwargs[key] = value
    if "K" not in kwargs:
        raise ConfigError("K (parcel class count) must be given via --k or "
                          "the config file")
    kwargs.setdefault("seed", args.seed)
    try:
        return TrainConfig(loss=LossConfig(**loss_kwargs), **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def cmd_parcelize(args) -> int:
    manifest = read_manifest(_require_file(args.manifest, "manifest"))
    params = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    stats = None
    if args.feature_stats:
        stats = trainer.load_feature_stats(
            _require_file(args.feature_stats, "feature stats"))
    out = _out_dir(args)
    n_written = 0
    for entry in manifest:
        seq = read_features(entry.feature_path)
        if seq.C != params.C:
            raise DataError(
                f"'{entry.seq_id}' has C={seq.C} but checkpoint expects "
                f"C={params.C}"
            )
        patches = seq.patches.astype(np.float64)
        if stats is not None:
            patches = trainer.apply_standardize(patches, *stats)
        for idx in _select_frames(args.frames, seq.T, entry):
            labels = infer_parcel_map(patches[idx], params, seq.img_h, seq.img_w)
            write_parcel_map(
                labels, params.K,
                out / f"{_pmap_name(entry.seq_id, idx)}.alanpmap",
            )
            n_written += 1
    print(f"wrote {n_written} parcel maps to {out}")
    return 0


def cmd_fit_segments(args) -> int:
    manifest = read_manifest(_require_file(args.manifest, "manifest"))
    parcels_dir = _require_file(args.parcels, "parcels directory")
    maps = []
    masks = []
    k = None
    for entry in manifest:
        for ref in entry.masks:
            if ref.region_label != args.region:
                continue
            pmap_path = parcels_dir / f"{_pmap_name(entry.seq_id, ref.frame_idx)}.alanpmap"
            if not pmap_path.exists():
                raise DataError(f"missing parcel map {pmap_path}")
            labels, file_k = read_parcel_map(pmap_path)
            if k is None:
                k = file_k
            elif k != file_k:
                raise DataError(
                    f"{pmap_path}: K={file_k} disagrees with earlier K={k}"
                )
            mask = read_mask(ref.mask_path, seq_id=entry.seq_id,
                             frame_idx=ref.frame_idx,
                             region_label=ref.region_label)
            if mask.pixels.shape != labels.shape:
                raise DataError(
                    f"{pmap_path}: geometry {labels.shape} does not match "
                    f"mask {mask.pixels.shape}"
                )
            maps.append(labels)
            masks.append(mask.pixels)
    if not maps:
        raise DataError(
            f"no '{args.region}' masks referenced by manifest "
            f"'{args.manifest}'"
        )
    interior = parcel2segment.fit_interior(
        maps, masks, k, overlap_frac=args.overlap_frac,
        hit_rate=args.hit_rate, presence_rate=args.presence_rate,
    )
    spec = parcel2segment.SegmenterSpec(
        K=k,
        region_label=args.region,
        interior_ids=frozenset(interior),
        overlap_frac=args.overlap_frac,
        hit_rate=args.hit_rate,
        presence_rate=args.presence_rate,
        enclave_cutoff=args.enclave_cutoff,
        closing_radius=args.closing_radius,
        snake=parcel2segment.SnakeParams(
            alpha=args.snake_alpha, beta=args.snake_beta,
            gamma=args.snake_gamma, max_iters=args.snake_iters,
            w_edge=args.snake_w_edge,
        ),
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    parcel2segment.save_spec(spec, args.out)
    print(f"interior ids for {args.region}: {sorted(interior)}")
    print(f"spec: {args.out}")
    return 0


def _frame_for(manifest, seq_id: str, frame_idx: int):
    if manifest is None:
        return None
    try:
        entry = manifest.get(seq_id)
    except DataError:
        return None
    if entry.image_path is None:
        return None
    path = frame_image_path(entry.image_path, frame_idx)
    if not path.exists():
        logger.warning("no frame image %s; snake falls back to mask edges", path)
        return None
    return read_pgm(path).astype(np.float64)


def cmd_segment(args) -> int:
    parcels_dir = _require_file(args.parcels, "parcels directory")
    spec = parcel2segment.load_spec(_require_file(args.spec, "spec file"))
    manifest = None
    if args.manifest:
        manifest = read_manifest(_require_file(args.manifest, "manifest"))
    out = _out_dir(args)
    pmap_files = sorted(parcels_dir.glob("*.alanpmap"))
    if not pmap_files:
        raise DataError(f"no .alanpmap files under {parcels_dir}")
    for pmap_path in pmap_files:
        labels, k = read_parcel_map(pmap_path)
        if k != spec.K:
            raise DataError(
                f"{pmap_path}: K={k} does not match spec K={spec.K}"
            )
        seq_id, frame_idx = _parse_pmap_name(pmap_path.stem)
        frame = _frame_for(manifest, seq_id, frame_idx)
        mask = parcel2segment.segment(labels, spec, frame=frame)
        write_mask(
            MaskRaster(seq_id=seq_id, frame_idx=frame_idx,
                       region_label=spec.region_label, pixels=mask),
            out / f"{pmap_path.stem}.alanmask",
        )
    print(f"wrote {len(pmap_files)} masks to {out}")
    return 0


def _parse_pmap_name(stem: str) -> tuple[str, int]:
    seq_id, sep, frame = stem.rpartition("_f")
    if not sep or not frame.isdigit():
        raise DataError(
            f"cannot parse sequence/frame from file name '{stem}' "
            f"(expected <seq_id>_f<idx>)"
        )
    return seq_id, int(frame)


def cmd_eval_dice(args) -> int:
    manifest = read_manifest(_require_file(args.manifest, "manifest"))
    pred_dir = _require_file(args.pred, "prediction directory")
    out = _out_dir(args)
    records = []
    for entry in manifest:
        for ref in entry.masks:
            if ref.region_label != args.region:
                continue
            pred_path = pred_dir / f"{_pmap_name(entry.seq_id, ref.frame_idx)}.alanmask"
            if not pred_path.exists():
                raise DataError(f"missing predicted mask {pred_path}")
            pred = read_mask(pred_path)
            gt = read_mask(ref.mask_path)
            score = metrics_eval.dice(pred.pixels, gt.pixels)
            records.append(metrics_eval.DiceRecord(
                seq_id=entry.seq_id, frame_idx=ref.frame_idx,
                region_label=ref.region_label, phase=ref.phase, dice=score,
            ))
    if not records:
        raise DataError(f"no '{args.region}' annotations in manifest")
    report = metrics_eval.aggregate(records, bin_width=args.bin_width)
    metrics_eval.write_eval_report(report, out / "dice_report.txt")
    metrics_eval.write_histogram_csv(report, out / "dice_hist.csv")
    for (region, phase), stats in report.groups.items():
        print(f"mean DICE {region} {phase or '-'}: "
              f"{stats.mean:.4f} +- {stats.std:.4f} (n={stats.n})")
    return 0


def cmd_index_views(args) -> int:
    manifest = read_manifest(_require_file(args.manifest, "manifest"))
    descriptors = []
    labels = []
    for entry in manifest:
        if entry.view_label is None:
            logger.warning("skipping '%s': no view label", entry.seq_id)
            continue
        seq = read_features(entry.feature_path)
        if seq.global_desc is None:
            raise DataError(
                f"'{entry.seq_id}' has no global descriptor block"
            )
        for t in range(seq.T):
            descriptors.append(seq.global_desc[t])
            labels.append(entry.view_label)
    if not descriptors:
        raise DataError("no labeled sequences with global descriptors")
    index = view_knn.build_index(np.stack(descriptors), labels)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    view_knn.save_index(index, args.out)
    print(f"indexed {index.M} frames into {args.out}")
    return 0


def cmd_classify_views(args) -> int:
    index = view_knn.load_index(_require_file(args.index, "index file"))
    manifest = read_manifest(_require_file(args.manifest, "manifest"))
    cfg = view_knn.KnnConfig(k=args.k, temperature=args.temperature)
    lines = []
    n_correct = 0
    n_labeled = 0
    for entry in manifest:
        seq = read_features(entry.feature_path)
        if seq.global_desc is None:
            raise DataError(f"'{entry.seq_id}' has no global descriptor block")
        for t in range(seq.T):
            pred = view_knn.classify(seq.global_desc[t], index, cfg)
            line = f"{entry.seq_id} {t} {pred.label}"
            if entry.view_label is not None:
                n_labeled += 1
                n_correct += pred.label == entry.view_label
                line += f" {entry.view_label}"
            lines.append(line)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print(f"classified {len(lines)} frames")
    if n_labeled:
        print(f"accuracy: {n_correct / n_labeled:.4f} "
              f"({n_correct}/{n_labeled})")
    return 0


def cmd_render_overlay(args) -> int:
    pred = read_mask(_require_file(args.pred, "prediction")).pixels
    gt = None
    if args.gt:
        gt = read_mask(_require_file(args.gt, "ground truth")).pixels
    frame = None
    if args.frame:
        frame = read_pgm(_require_file(args.frame, "frame"))
    parcel_map = None
    if args.parcels:
        parcel_map, _ = read_parcel_map(_require_file(args.parcels, "parcel map"))
    img = metrics_eval.render_overlay(pred, gt=gt, frame=frame,
                                      parcel_map=parcel_map)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    metrics_eval.write_ppm(img, args.out)
    print(f"overlay: {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
