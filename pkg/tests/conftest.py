"""Shared fixtures: synthetic feature sequences with known latent regions."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from alan.feature_store import (
    DatasetManifest,
    FeatureSequence,
    ManifestEntry,
    MaskRaster,
    MaskRef,
    write_features,
    write_manifest,
    write_mask,
)


def make_region_grid(hp: int, wp: int, rng: np.random.Generator) -> np.ndarray:
    """Patch-grid of 3 latent regions: a random disk (region 1) over a
    left/right split background (regions 0 and 2)."""
    cy = rng.uniform(0.35 * hp, 0.65 * hp)
    cx = rng.uniform(0.35 * wp, 0.65 * wp)
    radius = rng.uniform(0.22 * hp, 0.32 * hp)
    yy, xx = np.mgrid[0:hp, 0:wp]
    disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    return np.where(disk, 1, np.where(xx < wp / 2, 0, 2)).astype(np.int32)


def make_synthetic_sequence(seq_id: str, grid: np.ndarray, t: int, c: int,
                            patch_size: int, noise: float,
                            rng: np.random.Generator) -> FeatureSequence:
    """Features = one-hot of the region id (in C dims) + Gaussian noise."""
    hp, wp = grid.shape
    base = np.eye(c, dtype=np.float64)[grid]  # [hp, wp, c]
    patches = base[None] + noise * rng.standard_normal((t, hp, wp, c))
    return FeatureSequence(
        seq_id=seq_id,
        patches=patches.astype(np.float32),
        patch_size=patch_size,
        img_h=hp * patch_size,
        img_w=wp * patch_size,
    )


def region_mask(grid: np.ndarray, region: int, patch_size: int) -> np.ndarray:
    """Pixel-resolution ground truth: nearest upsample of a region id."""
    return np.kron((grid == region).astype(np.uint8),
                   np.ones((patch_size, patch_size), dtype=np.uint8))


def make_synthetic_dataset(n_seqs: int = 8, t: int = 40, hp: int = 16,
                           wp: int = 16, c: int = 8, patch_size: int = 4,
                           noise: float = 0.05, seed: int = 1234):
    """Sequences plus their region grids (geometry fixed per sequence)."""
    rng = np.random.default_rng(seed)
    sequences = []
    grids = []
    for i in range(n_seqs):
        grid = make_region_grid(hp, wp, rng)
        sequences.append(make_synthetic_sequence(
            f"synth{i:03d}", grid, t, c, patch_size, noise, rng))
        grids.append(grid)
    return sequences, grids


def write_dataset(root: Path, sequences, grids, region: str = "LV",
                  mask_frames=(0, 20), view_labels=None,
                  split_tag: str = "train") -> Path:
    """Materialize sequences (+ GT masks for the disk region) on disk and
    return the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (seq, grid) in enumerate(zip(sequences, grids)):
        feat_path = root / f"{seq.seq_id}.alanfeat"
        write_features(seq, feat_path)
        refs = []
        for j, frame_idx in enumerate(m for m in mask_frames if m < seq.T):
            pixels = region_mask(grid, 1, seq.patch_size)
            mask_path = root / f"{seq.seq_id}_f{frame_idx:05d}_{region}.alanmask"
            write_mask(MaskRaster(seq_id=seq.seq_id, frame_idx=frame_idx,
                                  region_label=region, pixels=pixels),
                       mask_path)
            refs.append(MaskRef(frame_idx=frame_idx, region_label=region,
                                mask_path=mask_path,
                                phase="ES" if j % 2 == 0 else "ED"))
        entries.append(ManifestEntry(
            seq_id=seq.seq_id,
            feature_path=feat_path,
            view_label=None if view_labels is None else view_labels[i],
            masks=tuple(refs),
        ))
    manifest = DatasetManifest(split_tag=split_tag, entries=tuple(entries))
    manifest_path = root / "manifest.yaml"
    write_manifest(manifest, manifest_path)
    return manifest_path


@pytest.fixture(scope="session")
def small_dataset():
    """Cheap dataset for fast pipeline tests (not the acceptance run)."""
    return make_synthetic_dataset(n_seqs=4, t=36, hp=8, wp=8, c=6,
                                  patch_size=2, seed=7)
