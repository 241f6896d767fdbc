"""Rule-based conversion of parcel maps into one clean anatomical mask.

Fitting scans a validation split and marks a parcel ID as *interior* to
the target region when (i) at least 75% of its pixels fall inside the
ground-truth mask in at least 50% of the frames where it appears, and
(ii) it appears in at least 30% of all frames. Segmentation then unites
the interior parcels and cleans the result with a fixed chain: keep the
connected component containing the most interior parcels, absorb
enclaves whose borders touch (almost) nothing but interior area, apply
a morphological closing, and refine the outline with an active contour.

Connectivity is 4-connected throughout.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

from alan.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

# 4-connectivity structuring element for component labelling.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class SnakeParams:
    alpha: float = 0.01
    beta: float = 0.2
    gamma: float = 0.01
    max_iters: int = 10
    w_edge: float = 1.0


@dataclass
class SegmenterSpec:
    """Learned interior-parcel set plus every post-processing parameter."""

    K: int
    region_label: str
    interior_ids: frozenset = frozenset()
    overlap_frac: float = 0.75
    hit_rate: float = 0.50
    presence_rate: float = 0.30
    enclave_cutoff: int = 8
    closing_radius: int = 10
    snake: SnakeParams = field(default_factory=SnakeParams)

    def __post_init__(self):
        object.__setattr__(self, "interior_ids", frozenset(int(i) for i in self.interior_ids))
        if any(i < 0 or i >= self.K for i in self.interior_ids):
            raise ConfigError(f"interior ids must lie in [0, {self.K})")
        for name in ("overlap_frac", "hit_rate", "presence_rate"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ConfigError(f"{name} must be in (0, 1], got {value}")
        if self.enclave_cutoff < 0 or self.closing_radius < 0:
            raise ConfigError("enclave_cutoff and closing_radius must be >= 0")
        if self.snake.max_iters < 0:
            raise ConfigError("snake.max_iters must be >= 0")


@dataclass
class OverlapStats:
    """Per-parcel presence/hit counts over a split of frames.

    ``presence[p]``: frames where parcel p occupies at least one pixel;
    ``hits[p]``: frames where at least ``overlap_frac`` of its pixels lie
    inside the ground-truth mask.
    """

    presence: np.ndarray
    hits: np.ndarray
    total: int


def overlap_stats(parcel_maps, masks, k: int,
                  overlap_frac: float = 0.75) -> OverlapStats:
    """Accumulate presence and hit counts over aligned (map, mask) frames."""
    if len(parcel_maps) == 0 or len(parcel_maps) != len(masks):
        raise DataError("need a non-empty, aligned list of parcel maps and masks")
    presence = np.zeros(k, dtype=np.int64)
    hits = np.zeros(k, dtype=np.int64)
    for pm, mask in zip(parcel_maps, masks):
        pm = np.asarray(pm)
        mask = np.asarray(mask)
        if pm.shape != mask.shape:
            raise DataError(
                f"geometry mismatch: parcel map {pm.shape} vs mask {mask.shape}"
            )
        area = np.bincount(pm.ravel(), minlength=k)[:k]
        inside = np.bincount(pm[mask > 0].ravel(), minlength=k)[:k]
        present = area > 0
        presence += present
        hits += present & (inside >= overlap_frac * area)
    return OverlapStats(presence=presence, hits=hits, total=len(parcel_maps))


def select_interior(stats: OverlapStats, hit_rate: float = 0.50,
                    presence_rate: float = 0.30) -> set[int]:
    """Apply the hit-rate and presence-rate rules to accumulated stats."""
    interior = set()
    for p in range(len(stats.presence)):
        if stats.presence[p] == 0:
            continue
        if stats.hits[p] < hit_rate * stats.presence[p]:
            continue
        if stats.presence[p] < presence_rate * stats.total:
            continue
        interior.add(p)
    return interior


def fit_interior(parcel_maps, masks, k: int, overlap_frac: float = 0.75,
                 hit_rate: float = 0.50, presence_rate: float = 0.30) -> set[int]:
    """Interior parcel IDs for a target region over a validation split."""
    stats = overlap_stats(parcel_maps, masks, k, overlap_frac)
    return select_interior(stats, hit_rate, presence_rate)


def union_mask(parcel_map: np.ndarray, interior_ids) -> np.ndarray:
    """Binary mask of all pixels whose parcel ID is interior."""
    parcel_map = np.asarray(parcel_map)
    return np.isin(parcel_map, list(interior_ids)).astype(np.uint8)


def largest_interior_component(mask: np.ndarray, parcel_map: np.ndarray,
                               interior_ids) -> np.ndarray:
    """Keep the 4-connected component intersecting the most distinct
    interior parcel IDs (ties: larger area, then first pixel in row-major
    order)."""
    mask = np.asarray(mask)
    labels, n = ndimage.label(mask, structure=_CROSS)
    if n == 0:
        logger.warning("largest_interior_component: mask is empty")
        return mask.astype(np.uint8).copy()
    interior = set(int(i) for i in interior_ids)
    best_key = None
    best = None
    flat = labels.ravel()
    for comp in range(1, n + 1):
        comp_mask = labels == comp
        ids = {int(v) for v in np.unique(np.asarray(parcel_map)[comp_mask])}
        n_ids = len(ids & interior)
        area = int(comp_mask.sum())
        first = int(np.argmax(flat == comp))
        key = (n_ids, area, -first)
        if best_key is None or key > best_key:
            best_key = key
            best = comp_mask
    return best.astype(np.uint8)


def absorb_enclaves(mask: np.ndarray, parcel_map: np.ndarray,
                    cutoff: int = 8) -> np.ndarray:
    """Flip enclosed exterior parcel regions into the mask.

    A region is a 4-connected run of non-mask pixels sharing one parcel
    ID. Only regions that actually border the mask qualify (enclaves are
    surrounded by it; detached specks are not). The outside-adjacency
    count is the number of region pixels that lie on the image border or
    touch exterior pixels of another region; the region is absorbed when
    that count is <= cutoff. All regions are evaluated against the input
    mask and flipped simultaneously, so a single-component mask stays a
    single component.
    """
    mask = np.asarray(mask).astype(bool)
    parcel_map = np.asarray(parcel_map)
    outside = ~mask
    result = mask.copy()
    if not outside.any():
        return result.astype(np.uint8)
    border = np.zeros_like(mask)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    next_to_mask = _touches(mask)
    for pid in np.unique(parcel_map[outside]):
        pid_outside = outside & (parcel_map == pid)
        regions, n = ndimage.label(pid_outside, structure=_CROSS)
        for comp in range(1, n + 1):
            region = regions == comp
            if not (region & next_to_mask).any():
                continue
            foreign = outside & ~region
            bad = region & (border | _touches(foreign))
            if int(bad.sum()) <= cutoff:
                result |= region
    return result.astype(np.uint8)


def _touches(target: np.ndarray) -> np.ndarray:
    """Pixels 4-adjacent to a True pixel of ``target``."""
    out = np.zeros_like(target)
    out[:-1, :] |= target[1:, :]
    out[1:, :] |= target[:-1, :]
    out[:, :-1] |= target[:, 1:]
    out[:, 1:] |= target[:, :-1]
    return out


def disk_element(radius: int) -> np.ndarray:
    """Discrete disk: offsets at Euclidean distance <= radius."""
    if radius < 0:
        raise ConfigError("radius must be >= 0")
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    return (dy * dy + dx * dx) <= radius * radius


def morph_close(mask: np.ndarray, radius: int = 10) -> np.ndarray:
    """Dilation followed by erosion with a disk element.

    The mask is padded by the radius with background first, so the result
    equals closing against an infinite background: extensive and
    idempotent even at image borders.
    """
    mask = np.asarray(mask).astype(bool)
    if radius == 0:
        return mask.astype(np.uint8)
    se = disk_element(radius)
    padded = np.pad(mask, radius, constant_values=False)
    dilated = ndimage.binary_dilation(padded, structure=se)
    eroded = ndimage.binary_erosion(dilated, structure=se, border_value=False)
    return eroded[radius:-radius, radius:-radius].astype(np.uint8)


# ---------------------------------------------------------------------------
# Active contour refinement

# Moore neighborhood scanned clockwise in screen coordinates (y down).
_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def trace_boundary(mask: np.ndarray) -> np.ndarray:
    """Outer boundary of the mask's first component as an ordered closed
    polyline of pixel coordinates (Moore-neighbor tracing)."""
    mask = np.asarray(mask).astype(bool)
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise DataError("cannot trace the boundary of an empty mask")
    start = (int(ys[0]), int(xs[0]))  # row-major first pixel: W/N neighbors clear
    contour = [start]
    backtrack = (start[0], start[1] - 1)
    current = start
    first_move = None
    for _ in range(4 * mask.size):
        begin = _MOORE.index((backtrack[0] - current[0], backtrack[1] - current[1]))
        found = None
        for step in range(1, 9):
            dy, dx = _MOORE[(begin + step) % 8]
            ny, nx = current[0] + dy, current[1] + dx
            if 0 <= ny < mask.shape[0] and 0 <= nx < mask.shape[1] and mask[ny, nx]:
                found = (ny, nx)
                break
            backtrack = (ny, nx)
        if found is None:
            break  # isolated single pixel
        if first_move is None:
            first_move = (found, backtrack)
        elif (found, backtrack) == first_move:
            break  # the entry move repeated: contour is closed
        contour.append(found)
        current = found
    if len(contour) > 1 and contour[-1] == contour[0]:
        contour.pop()
    return np.array(contour, dtype=np.float64)


def evolve_contour(points: np.ndarray, edge_image: np.ndarray,
                   params: SnakeParams) -> np.ndarray:
    """Iterate the semi-implicit active-contour update.

    x <- (I + gamma*A)^-1 (x + gamma * w_edge * grad E(x)) with A the
    circulant continuity/curvature operator built from alpha and beta.
    Points are clamped to the image rectangle after each iteration.
    """
    pts = np.asarray(points, dtype=np.float64).copy()
    n = len(pts)
    if n < 3:
        raise DataError("contour needs at least 3 points")
    h, w = edge_image.shape
    row = np.zeros(n)
    row[0] = 2 * params.alpha + 6 * params.beta
    row[1 % n] += -params.alpha - 4 * params.beta
    row[-1 % n] += -params.alpha - 4 * params.beta
    row[2 % n] += params.beta
    row[-2 % n] += params.beta
    idx = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n
    system = np.eye(n) + params.gamma * row[idx]
    inv = np.linalg.inv(system)
    gy, gx = np.gradient(np.asarray(edge_image, dtype=np.float64))
    for _ in range(params.max_iters):
        fy = _bilinear_sample(gy, pts)
        fx = _bilinear_sample(gx, pts)
        force = np.stack([fy, fx], axis=1)
        pts = inv @ (pts + params.gamma * params.w_edge * force)
        pts[:, 0] = np.clip(pts[:, 0], 0, h - 1)
        pts[:, 1] = np.clip(pts[:, 1], 0, w - 1)
    return pts


def _bilinear_sample(img: np.ndarray, pts: np.ndarray) -> np.ndarray:
    h, w = img.shape
    y = np.clip(pts[:, 0], 0, h - 1)
    x = np.clip(pts[:, 1], 0, w - 1)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.floor(x).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = y - y0
    fx = x - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def rasterize_contour(points: np.ndarray, shape) -> np.ndarray:
    """Filled mask of a closed polyline: even-odd scanline fill at pixel
    centers, unioned with the (rounded) polyline pixels."""
    h, w = shape
    pts = np.asarray(points, dtype=np.float64)
    out = np.zeros((h, w), dtype=np.uint8)
    y1 = pts[:, 0]
    x1 = pts[:, 1]
    y2 = np.roll(y1, -1)
    x2 = np.roll(x1, -1)
    keep = y1 != y2
    for y in range(h):
        spans = keep & (((y1 <= y) & (y < y2)) | ((y2 <= y) & (y < y1)))
        if not spans.any():
            continue
        t = (y - y1[spans]) / (y2[spans] - y1[spans])
        crossings = np.sort(x1[spans] + t * (x2[spans] - x1[spans]))
        for a, b in zip(crossings[0::2], crossings[1::2]):
            lo = int(np.ceil(a))
            hi = int(np.floor(b))
            if hi >= lo:
                out[y, max(lo, 0):min(hi, w - 1) + 1] = 1
    ry = np.clip(np.round(pts[:, 0]).astype(int), 0, h - 1)
    rx = np.clip(np.round(pts[:, 1]).astype(int), 0, w - 1)
    out[ry, rx] = 1
    return out


def refine_snake(mask: np.ndarray, frame: np.ndarray | None = None,
                 params: SnakeParams | None = None) -> np.ndarray:
    """Refine the mask outline with an active contour.

    The edge image is the gradient magnitude of ``frame`` when given,
    otherwise the Gaussian-smoothed (sigma=2) gradient magnitude of the
    mask itself. Degenerate boundaries return the input unchanged.
    """
    params = params or SnakeParams()
    mask = np.asarray(mask)
    bool_mask = mask.astype(bool)
    if bool_mask.sum() == 0:
        logger.warning("refine_snake: empty mask, returning unchanged")
        return mask.astype(np.uint8).copy()
    points = trace_boundary(bool_mask)
    if len(points) < 3:
        logger.warning("refine_snake: degenerate boundary, returning unchanged")
        return mask.astype(np.uint8).copy()
    if frame is not None:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != bool_mask.shape:
            raise DataError(
                f"frame shape {frame.shape} does not match mask {bool_mask.shape}"
            )
        edge = _gradient_magnitude(frame)
    else:
        edge = ndimage.gaussian_filter(
            _gradient_magnitude(bool_mask.astype(np.float64)), sigma=2.0
        )
    points = evolve_contour(points, edge, params)
    return rasterize_contour(points, bool_mask.shape)


def _gradient_magnitude(img: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(img)
    return np.sqrt(gy * gy + gx * gx)


def segment(parcel_map: np.ndarray, spec: SegmenterSpec,
            frame: np.ndarray | None = None) -> np.ndarray:
    """Full chain: union -> best component -> enclaves -> closing -> snake.

    Always returns a single 4-connected component or an all-zero mask.
    A zero snake iteration count disables the snake stage entirely.
    """
    parcel_map = np.asarray(parcel_map)
    if parcel_map.max(initial=0) >= spec.K:
        raise DataError(f"parcel label >= K={spec.K}")
    mask = union_mask(parcel_map, spec.interior_ids)
    if mask.sum() == 0:
        logger.warning("segment: empty interior union for region '%s'",
                       spec.region_label)
        return mask
    mask = largest_interior_component(mask, parcel_map, spec.interior_ids)
    mask = absorb_enclaves(mask, parcel_map, spec.enclave_cutoff)
    mask = morph_close(mask, spec.closing_radius)
    if spec.snake.max_iters > 0:
        mask = refine_snake(mask, frame, spec.snake)
        # Rasterization of a wild contour could split the mask; keep the
        # dominant piece so the single-component contract always holds.
        mask = largest_interior_component(mask, parcel_map, spec.interior_ids)
    return mask


# ---------------------------------------------------------------------------
# Spec serialization ("ALANSEG spec")

def save_spec(spec: SegmenterSpec, path) -> None:
    doc = {
        "format": "ALANSEG",
        "version": 1,
        "K": spec.K,
        "region_label": spec.region_label,
        "interior_ids": sorted(spec.interior_ids),
        "thresholds": {
            "overlap_frac": spec.overlap_frac,
            "hit_rate": spec.hit_rate,
            "presence_rate": spec.presence_rate,
        },
        "postproc": {
            "enclave_cutoff": spec.enclave_cutoff,
            "closing_radius": spec.closing_radius,
            "snake": asdict(spec.snake),
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def load_spec(path) -> SegmenterSpec:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict) or doc.get("format") != "ALANSEG":
        raise DataError(f"{path}: not an ALANSEG spec file")
    if doc.get("version") != 1:
        raise DataError(f"{path}: unsupported version {doc.get('version')}")
    thresholds = doc.get("thresholds", {})
    postproc = doc.get("postproc", {})
    snake = SnakeParams(**postproc.get("snake", {}))
    return SegmenterSpec(
        K=int(doc["K"]),
        region_label=str(doc["region_label"]),
        interior_ids=frozenset(int(i) for i in doc.get("interior_ids", [])),
        overlap_frac=float(thresholds.get("overlap_frac", 0.75)),
        hit_rate=float(thresholds.get("hit_rate", 0.50)),
        presence_rate=float(thresholds.get("presence_rate", 0.30)),
        enclave_cutoff=int(postproc.get("enclave_cutoff", 8)),
        closing_radius=int(postproc.get("closing_radius", 10)),
        snake=snake,
    )
