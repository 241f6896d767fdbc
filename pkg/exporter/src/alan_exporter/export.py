"""Export loop: frames in, ALANFEAT tensors + manifest fragment out.

Per sequence directory the backbone produces a [T, Hp, Wp, C] patch
tensor and a [T, C] class-token block (the global descriptor for view
classification). Frames are grayscale, scaled to [0, 1], standardized
with mean/std fitted once over the whole input set (or loaded from a
stats file for reuse on validation/test splits) and replicated to three
channels for the RGB-pretrained backbone. Every choice is recorded in
export_meta.yaml next to the outputs. Exports are bit-reproducible:
torch runs single-threaded in eval mode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from alan.feature_store import (
    DatasetManifest,
    FeatureSequence,
    ManifestEntry,
    MaskRaster,
    MaskRef,
    read_pgm,
    write_features,
    write_manifest,
    write_mask,
)

from alan_exporter.vit import load_backbone

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ExportConfig:
    input_dir: Path
    out_dir: Path
    model: str = "random:0"   # state-dict path, or random:<seed>
    image_size: int = 112
    patch_size: int = 4
    stats: str = "compute"    # "compute" or path to a stats YAML
    split_tag: str = "train"
    labels_file: Path | None = None   # YAML: seq_id -> view label
    masks_dir: Path | None = None     # per-seq mask images to convert
    batch_size: int = 8

    def __post_init__(self):
        self.input_dir = Path(self.input_dir)
        self.out_dir = Path(self.out_dir)
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size "
                f"{self.patch_size}"
            )
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def load_frame(path: Path) -> np.ndarray:
    """Grayscale uint8 frame from PGM (native) or Pillow-readable files."""
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    from PIL import Image
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def discover_sequences(input_dir: Path) -> list[tuple[str, list[Path]]]:
    """(seq_id, sorted frame paths) per sequence subdirectory; a flat
    directory of frames is one sequence named after the directory."""
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise FileNotFoundError(f"input directory not found: {input_dir}")
    subdirs = sorted(p for p in input_dir.iterdir() if p.is_dir())
    if not subdirs:
        frames = _frames_in(input_dir)
        if not frames:
            raise FileNotFoundError(f"no frames under {input_dir}")
        return [(input_dir.name, frames)]
    sequences = []
    for sub in subdirs:
        frames = _frames_in(sub)
        if frames:
            sequences.append((sub.name, frames))
        else:
            logger.warning("skipping %s: no frame images", sub)
    if not sequences:
        raise FileNotFoundError(f"no frames under {input_dir}")
    return sequences


def _frames_in(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES)


def fit_stats(sequences, image_size: int) -> tuple[float, float]:
    """Mean/std of [0, 1]-scaled pixels over the whole input set."""
    total = 0.0
    total_sq = 0.0
    count = 0
    for _, frames in sequences:
        for path in frames:
            img = _resized(load_frame(path), image_size)
            total += float(img.sum())
            total_sq += float((img * img).sum())
            count += img.size
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    return mean, float(np.sqrt(var))


def _resized(frame: np.ndarray, image_size: int) -> np.ndarray:
    """[0, 1] float frame at the model's input size (bilinear)."""
    scaled = frame.astype(np.float32) / 255.0
    if scaled.shape == (image_size, image_size):
        return scaled
    t = torch.from_numpy(scaled)[None, None]
    out = torch.nn.functional.interpolate(
        t, size=(image_size, image_size), mode="bilinear",
        align_corners=False)
    return out[0, 0].numpy()


def export(cfg: ExportConfig) -> Path:
    """Run the frozen backbone over every sequence; returns the manifest
    fragment path."""
    torch.set_num_threads(1)  # bit-reproducible re-exports
    sequences = discover_sequences(cfg.input_dir)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.stats == "compute":
        mean, std = fit_stats(sequences, cfg.image_size)
    else:
        with open(cfg.stats, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
        mean, std = float(doc["mean"]), float(doc["std"])
    scale = std if std > 1e-12 else 1.0

    labels = {}
    if cfg.labels_file is not None:
        with open(cfg.labels_file, "r", encoding="utf-8") as f:
            labels = yaml.safe_load(f) or {}

    model = load_backbone(cfg.model, cfg.image_size, cfg.patch_size)
    entries = []
    for seq_id, frame_paths in sequences:
        feature_path = cfg.out_dir / f"{seq_id}.alanfeat"
        seq = _export_sequence(seq_id, frame_paths, model, cfg, mean, scale)
        write_features(seq, feature_path)
        mask_refs = _convert_masks(cfg, seq_id, seq)
        entries.append(ManifestEntry(
            seq_id=seq_id,
            feature_path=feature_path,
            view_label=labels.get(seq_id),
            masks=tuple(mask_refs),
        ))
        logger.info("exported %s: T=%d grid=%dx%d", seq_id, seq.T, seq.Hp,
                    seq.Wp)

    manifest_path = cfg.out_dir / "manifest.yaml"
    write_manifest(DatasetManifest(split_tag=cfg.split_tag,
                                   entries=tuple(entries)), manifest_path)
    stats_path = cfg.out_dir / "feature_stats.yaml"
    with open(stats_path, "w", encoding="utf-8") as f:
        yaml.safe_dump({"mean": mean, "std": std}, f)
    with open(cfg.out_dir / "export_meta.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump({
            "model": cfg.model,
            "image_size": cfg.image_size,
            "patch_size": cfg.patch_size,
            "global_descriptor": "class_token",
            "grayscale_to_rgb": "replicated",
            "standardization": {"mean": mean, "std": std,
                                "source": cfg.stats},
        }, f, sort_keys=False)
    return manifest_path


def _export_sequence(seq_id: str, frame_paths, model, cfg: ExportConfig,
                     mean: float, scale: float) -> FeatureSequence:
    patch_blocks = []
    global_blocks = []
    for start in range(0, len(frame_paths), cfg.batch_size):
        chunk = frame_paths[start:start + cfg.batch_size]
        arr = np.stack([_resized(load_frame(p), cfg.image_size)
                        for p in chunk])
        batch = torch.from_numpy((arr - mean) / scale)[:, None]
        batch = batch.repeat(1, 3, 1, 1)  # grayscale -> RGB replication
        cls, patches = model.forward_features(batch)
        patch_blocks.append(patches.numpy())
        global_blocks.append(cls.numpy())
    return FeatureSequence(
        seq_id=seq_id,
        patches=np.concatenate(patch_blocks).astype(np.float32),
        patch_size=cfg.patch_size,
        img_h=cfg.image_size,
        img_w=cfg.image_size,
        global_desc=np.concatenate(global_blocks).astype(np.float32),
    )


def _convert_masks(cfg: ExportConfig, seq_id: str,
                   seq: FeatureSequence) -> list[MaskRef]:
    """Convert per-sequence annotation images (masks_dir/<seq_id>/
    f<idx>_<REGION>.<ext>, nonzero = foreground) to ALANMASK files."""
    if cfg.masks_dir is None:
        return []
    seq_dir = Path(cfg.masks_dir) / seq_id
    if not seq_dir.is_dir():
        return []
    refs = []
    for path in sorted(p for p in seq_dir.iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES):
        stem = path.stem
        if not stem.startswith("f") or "_" not in stem:
            logger.warning("skipping %s: expected f<idx>_<REGION> naming", path)
            continue
        idx_part, _, region = stem[1:].partition("_")
        try:
            frame_idx = int(idx_part)
        except ValueError:
            logger.warning("skipping %s: bad frame index", path)
            continue
        img = load_frame(path)
        pixels = _resized(img, cfg.image_size) > 0.5
        out_path = cfg.out_dir / f"{seq_id}_f{frame_idx:05d}_{region}.alanmask"
        write_mask(MaskRaster(seq_id=seq_id, frame_idx=frame_idx,
                              region_label=region,
                              pixels=pixels.astype(np.uint8)), out_path)
        refs.append(MaskRef(frame_idx=frame_idx, region_label=region,
                            mask_path=out_path))
    return refs
