"""Binary feature-tensor / mask formats and the dataset manifest.

All other modules consume data through this one. Three binary formats are
defined here, all little-endian with an 8-byte ASCII magic:

ALANFEAT (patch-feature tensor per video)
    "ALANFEAT" | u16 version=1 | u16 flags (bit0: global block present)
    | u32 T, Hp, Wp, C, patch_size, img_h, img_w
    | u16 seq_id length + UTF-8 bytes
    | f32 patch payload, row-major [T, Hp, Wp, C]
    | optional f32 global payload [T, C]

ALANMASK (binary raster)
    "ALANMASK" | u16 version=1 | u32 img_h, img_w | u8 payload (0/1)

ALANPMAP (parcel-label raster; ALANMASK-style with the class count K
in the header so readers can validate labels)
    "ALANPMAP" | u16 version=1 | u32 K, img_h, img_w | u16 payload

The manifest is a YAML file: a ``split_tag`` plus one entry per sequence
with ``seq_id``, ``feature_path`` and optional ``view_label``, ``masks``
(list of ``{frame_idx, region_label, mask_path, phase}``) and
``image_path`` (directory of raw PGM frames). Relative paths resolve
against the manifest's directory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from alan.errors import DataError

FEAT_MAGIC = b"ALANFEAT"
MASK_MAGIC = b"ALANMASK"
PMAP_MAGIC = b"ALANPMAP"
FORMAT_VERSION = 1

VIEW_LABELS = ("A2C", "A4C", "PLAX", "PSAX")


@dataclass(frozen=True)
class FeatureSequence:
    """Per-video tensor of backbone patch features plus geometry metadata.

    ``patches`` is [T, Hp, Wp, C] float32; ``global_desc`` is an optional
    [T, C] per-frame descriptor used by view classification.
    """

    seq_id: str
    patches: np.ndarray
    patch_size: int
    img_h: int
    img_w: int
    global_desc: np.ndarray | None = None

    def __post_init__(self):
        patches = np.ascontiguousarray(self.patches, dtype=np.float32)
        object.__setattr__(self, "patches", patches)
        if self.global_desc is not None:
            g = np.ascontiguousarray(self.global_desc, dtype=np.float32)
            object.__setattr__(self, "global_desc", g)
        self._validate()
        self.patches.setflags(write=False)
        if self.global_desc is not None:
            self.global_desc.setflags(write=False)

    def _validate(self):
        if self.patches.ndim != 4:
            raise DataError(
                f"patches must be [T, Hp, Wp, C], got shape {self.patches.shape}"
            )
        t, hp, wp, c = self.patches.shape
        if t < 1 or c < 1:
            raise DataError(f"need T >= 1 and C >= 1, got T={t}, C={c}")
        if self.patch_size < 1:
            raise DataError(f"patch_size must be >= 1, got {self.patch_size}")
        if hp * self.patch_size != self.img_h or wp * self.patch_size != self.img_w:
            raise DataError(
                f"geometry mismatch: grid {hp}x{wp} at patch_size "
                f"{self.patch_size} does not cover {self.img_h}x{self.img_w}"
            )
        if not np.isfinite(self.patches).all():
            raise DataError(f"non-finite value in patches of '{self.seq_id}'")
        if self.global_desc is not None:
            if self.global_desc.shape != (t, c):
                raise DataError(
                    f"global descriptor must be [T, C]=({t}, {c}), "
                    f"got {self.global_desc.shape}"
                )
            if not np.isfinite(self.global_desc).all():
                raise DataError(
                    f"non-finite value in global descriptors of '{self.seq_id}'"
                )

    @property
    def T(self) -> int:
        return self.patches.shape[0]

    @property
    def Hp(self) -> int:
        return self.patches.shape[1]

    @property
    def Wp(self) -> int:
        return self.patches.shape[2]

    @property
    def C(self) -> int:
        return self.patches.shape[3]


@dataclass(frozen=True)
class MaskRaster:
    """Binary raster annotation for one frame of a sequence."""

    seq_id: str
    frame_idx: int
    region_label: str
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        object.__setattr__(self, "pixels", pixels)
        if pixels.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {pixels.shape}")
        bad = pixels > 1
        if bad.any():
            raise DataError(
                f"mask values must be 0/1, found {int(pixels[bad][0])}"
            )
        self.pixels.setflags(write=False)


@dataclass(frozen=True)
class MaskRef:
    frame_idx: int
    region_label: str
    mask_path: Path
    phase: str = ""


@dataclass(frozen=True)
class ManifestEntry:
    seq_id: str
    feature_path: Path
    view_label: str | None = None
    masks: tuple[MaskRef, ...] = ()
    image_path: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    split_tag: str
    entries: tuple[ManifestEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, seq_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.seq_id == seq_id:
                return e
        raise DataError(f"seq_id '{seq_id}' not in manifest")


# ---------------------------------------------------------------------------
# ALANFEAT

def write_features(seq: FeatureSequence, path) -> None:
    """Write a FeatureSequence in ALANFEAT format (bit-exact round trip)."""
    path = Path(path)
    flags = 1 if seq.global_desc is not None else 0
    sid = seq.seq_id.encode("utf-8")
    header = FEAT_MAGIC + struct.pack(
        "<HH7I",
        FORMAT_VERSION,
        flags,
        seq.T,
        seq.Hp,
        seq.Wp,
        seq.C,
        seq.patch_size,
        seq.img_h,
        seq.img_w,
    ) + struct.pack("<H", len(sid)) + sid
    payload = seq.patches.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        if seq.global_desc is not None:
            f.write(seq.global_desc.astype("<f4", copy=False).tobytes())


def read_features(path) -> FeatureSequence:
    """Read an ALANFEAT file, validating magic, version, sizes and geometry."""
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:8] != FEAT_MAGIC:
        raise DataError(f"{path}: bad magic, not an ALANFEAT file")
    fixed = struct.calcsize("<HH7I")
    if len(data) < 8 + fixed + 2:
        raise DataError(f"{path}: truncated header")
    version, flags, t, hp, wp, c, patch_size, img_h, img_w = struct.unpack_from(
        "<HH7I", data, 8
    )
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    off = 8 + fixed
    (sid_len,) = struct.unpack_from("<H", data, off)
    off += 2
    if len(data) < off + sid_len:
        raise DataError(f"{path}: truncated seq_id")
    seq_id = data[off:off + sid_len].decode("utf-8")
    off += sid_len
    n_patch = t * hp * wp * c
    n_global = t * c if flags & 1 else 0
    expected = off + 4 * (n_patch + n_global)
    if len(data) != expected:
        raise DataError(
            f"{path}: size mismatch, header implies {expected} bytes, "
            f"file has {len(data)}"
        )
    patches = np.frombuffer(data, dtype="<f4", count=n_patch, offset=off)
    patches = patches.reshape(t, hp, wp, c)
    global_desc = None
    if flags & 1:
        global_desc = np.frombuffer(
            data, dtype="<f4", count=n_global, offset=off + 4 * n_patch
        ).reshape(t, c)
    # FeatureSequence validation covers geometry and finiteness.
    return FeatureSequence(
        seq_id=seq_id,
        patches=patches,
        patch_size=patch_size,
        img_h=img_h,
        img_w=img_w,
        global_desc=global_desc,
    )


# ---------------------------------------------------------------------------
# ALANMASK

def write_mask(mask: MaskRaster, path) -> None:
    path = Path(path)
    h, w = mask.pixels.shape
    with open(path, "wb") as f:
        f.write(MASK_MAGIC + struct.pack("<HII", FORMAT_VERSION, h, w))
        f.write(mask.pixels.tobytes())


def read_mask(path, seq_id: str = "", frame_idx: int = 0,
              region_label: str = "") -> MaskRaster:
    """Read an ALANMASK file; sequence metadata comes from the manifest."""
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:8] != MASK_MAGIC:
        raise DataError(f"{path}: bad magic, not an ALANMASK file")
    fixed = struct.calcsize("<HII")
    if len(data) < 8 + fixed:
        raise DataError(f"{path}: truncated header")
    version, h, w = struct.unpack_from("<HII", data, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if len(data) != 8 + fixed + h * w:
        raise DataError(f"{path}: size mismatch against declared {h}x{w}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=8 + fixed).reshape(h, w)
    return MaskRaster(seq_id=seq_id, frame_idx=frame_idx,
                      region_label=region_label, pixels=pixels)


# ---------------------------------------------------------------------------
# ALANPMAP

def write_parcel_map(labels: np.ndarray, k: int, path) -> None:
    """Write an integer parcel-label raster with its class count K."""
    labels = np.ascontiguousarray(labels)
    if labels.ndim != 2:
        raise DataError(f"parcel map must be 2-D, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise DataError(f"parcel labels must lie in [0, {k})")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(PMAP_MAGIC + struct.pack("<HIII", FORMAT_VERSION, k, h, w))
        f.write(labels.astype("<u2").tobytes())


def read_parcel_map(path) -> tuple[np.ndarray, int]:
    """Read an ALANPMAP file, returning (labels [h, w] int32, K)."""
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:8] != PMAP_MAGIC:
        raise DataError(f"{path}: bad magic, not an ALANPMAP file")
    fixed = struct.calcsize("<HIII")
    if len(data) < 8 + fixed:
        raise DataError(f"{path}: truncated header")
    version, k, h, w = struct.unpack_from("<HIII", data, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if len(data) != 8 + fixed + 2 * h * w:
        raise DataError(f"{path}: size mismatch against declared {h}x{w}")
    labels = np.frombuffer(data, dtype="<u2", offset=8 + fixed)
    labels = labels.reshape(h, w).astype(np.int32)
    if labels.max(initial=0) >= k:
        raise DataError(f"{path}: label >= K={k}")
    return labels, k


# ---------------------------------------------------------------------------
# Manifest

def read_manifest(path) -> DatasetManifest:
    """Load and validate a dataset manifest.

    Relative paths are resolved against the manifest's directory; every
    referenced file must exist at load time.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise DataError(f"{path}: manifest must be a mapping")
    base = path.parent
    split_tag = str(raw.get("split_tag", ""))
    entries = []
    seen = set()
    for item in raw.get("entries", []) or []:
        seq_id = str(item["seq_id"])
        if seq_id in seen:
            raise DataError(f"{path}: duplicate seq_id '{seq_id}'")
        seen.add(seq_id)
        feature_path = _resolve(base, item["feature_path"])
        if not feature_path.exists():
            raise DataError(f"{path}: missing feature file {feature_path}")
        view_label = item.get("view_label")
        if view_label is not None:
            view_label = str(view_label)
            if view_label not in VIEW_LABELS:
                raise DataError(
                    f"{path}: unknown view_label '{view_label}' "
                    f"(expected one of {', '.join(VIEW_LABELS)})"
                )
        masks = []
        for m in item.get("masks", []) or []:
            mask_path = _resolve(base, m["mask_path"])
            if not mask_path.exists():
                raise DataError(f"{path}: missing mask file {mask_path}")
            masks.append(MaskRef(
                frame_idx=int(m["frame_idx"]),
                region_label=str(m["region_label"]),
                mask_path=mask_path,
                phase=str(m.get("phase", "")),
            ))
        image_path = None
        if item.get("image_path") is not None:
            image_path = _resolve(base, item["image_path"])
            if not image_path.exists():
                raise DataError(f"{path}: missing image path {image_path}")
        entries.append(ManifestEntry(
            seq_id=seq_id,
            feature_path=feature_path,
            view_label=view_label,
            masks=tuple(masks),
            image_path=image_path,
        ))
    return DatasetManifest(split_tag=split_tag, entries=tuple(entries))


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Serialize a manifest; paths are written relative to the output dir
    when possible."""
    path = Path(path)
    base = path.parent
    entries = []
    for e in manifest.entries:
        item: dict = {
            "seq_id": e.seq_id,
            "feature_path": _relativize(base, e.feature_path),
        }
        if e.view_label is not None:
            item["view_label"] = e.view_label
        if e.masks:
            item["masks"] = [
                {
                    "frame_idx": m.frame_idx,
                    "region_label": m.region_label,
                    "mask_path": _relativize(base, m.mask_path),
                    **({"phase": m.phase} if m.phase else {}),
                }
                for m in e.masks
            ]
        if e.image_path is not None:
            item["image_path"] = _relativize(base, e.image_path)
        entries.append(item)
    doc = {"split_tag": manifest.split_tag, "entries": entries}
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else (base / p).resolve()


def _relativize(base: Path, p: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


# ---------------------------------------------------------------------------
# Raw grayscale frames (binary PGM, P5): the codec-free carrier for the
# optional per-frame images used by snake refinement and overlays.

def read_pgm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PGM not supported")
    if len(data) < pos + h * w:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8, count=h * w,
                         offset=pos).reshape(h, w)


def write_pgm(img: np.ndarray, path) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise DataError(f"PGM image must be 2-D, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def frame_image_path(image_dir: Path, frame_idx: int) -> Path:
    """Canonical file name for frame ``frame_idx`` under a sequence's
    image directory."""
    return Path(image_dir) / f"f{frame_idx:05d}.pgm"
