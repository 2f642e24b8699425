"""Synthetic glyph dataset, manifests, label preprocessing, splits, batching.

The synthetic dataset renders 5 glyph prototypes (class label) under 6
independent binary attributes. Every attribute controls exactly one
rendering parameter, so ground truth is recoverable by construction and a
rule-based oracle classifies clean renders with 100% accuracy:

index  name               0                      1
0      fill-hue           red fill               blue fill
1      stroke-width       thin strokes           thick strokes
2      background-bright  dark background        bright background
3      h-flip             as drawn               mirrored horizontally
4      large-scale        10 px glyph box        16 px glyph box
5      upper-half         vertically centered    centered in upper half

Glyphs are horizontally asymmetric so the mirror bit is always visible, and
the glyph box is horizontally centered so mirroring the image equals
toggling the h-flip bit. Vertical jitter of +-1 px keeps the task from
degenerating into single-pixel lookups.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

ATTRIBUTE_NAMES = (
    "fill-hue",
    "stroke-width",
    "background-bright",
    "h-flip",
    "large-scale",
    "upper-half",
)
N_SYNTH_CLASSES = 5
N_SYNTH_ATTRIBUTES = len(ATTRIBUTE_NAMES)

_SMALL, _LARGE = 10, 16
_ROW_UPPER, _ROW_MID = 10, 16
_FILL_RED = np.array([0.85, 0.25, 0.20], dtype=np.float32)
_FILL_BLUE = np.array([0.20, 0.30, 0.85], dtype=np.float32)
_FILL_GRAY = (0.35, 0.62)  # single-channel stand-ins for the two hues
_BG_DARK, _BG_BRIGHT = 0.10, 0.85
_MASK_THRESHOLD = 0.15
_THIN_W, _THICK_W = 0.14, 0.30


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = N_SYNTH_CLASSES
    samples_per_class: int = 200
    image_size: int = 32
    channels: int = 3
    seed: int = 0

    def validate(self):
        if self.n_classes < 1 or self.n_classes > N_SYNTH_CLASSES:
            raise DataError(f"n_classes must be in 1..{N_SYNTH_CLASSES}")
        if self.image_size < 24:
            raise DataError("image_size too small to render the glyph boxes")
        if self.channels not in (1, 3):
            raise DataError("channels must be 1 (grayscale) or 3 (RGB)")
        if self.samples_per_class < 2 or self.samples_per_class % 2:
            raise DataError("samples_per_class must be even (balanced attribute bits)")


@dataclass(frozen=True)
class ManifestRow:
    filename: str
    y: int
    z: tuple[float, ...]
    split: str = ""


@dataclass
class Manifest:
    root: Path
    rows: list[ManifestRow] = field(default_factory=list)

    @property
    def n_attributes(self) -> int:
        return len(self.rows[0].z) if self.rows else 0

    @property
    def n_classes(self) -> int:
        return max(r.y for r in self.rows) + 1 if self.rows else 0

    def subset(self, split: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == split]

    def save(self, path: Path | str):
        path = Path(path)
        n = self.n_attributes
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["filename", "y"] + [f"z_{i}" for i in range(n)] + ["split"])
            for r in self.rows:
                writer.writerow([r.filename, r.y] + [_fmt_z(v) for v in r.z] + [r.split])

    @classmethod
    def load(cls, path: Path | str) -> "Manifest":
        path = Path(path)
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header[:2] != ["filename", "y"] or header[-1] != "split":
                raise DataError(f"bad manifest header in {path}: {header}")
            n = len(header) - 3
            rows = [
                ManifestRow(rec[0], int(rec[1]), tuple(float(v) for v in rec[2 : 2 + n]), rec[-1])
                for rec in reader
            ]
        return cls(root=path.parent, rows=rows)

    def check_files(self):
        for r in self.rows:
            if not (self.root / r.filename).exists():
                raise DataError(f"manifest references missing file {r.filename}")


def _fmt_z(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


# ---------------------------------------------------------------------------
# glyph rendering


def glyph_mask(cls: int, size: int, thick: bool, flipped: bool) -> np.ndarray:
    """Boolean glyph mask at ``size`` x ``size``; prototypes are drawn in unit
    coordinates and rasterized at pixel centers (no anti-aliasing)."""
    w = _THICK_W if thick else _THIN_W
    v, u = np.meshgrid(
        (np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij"
    )
    bar = u < w
    if cls == 0:  # flag: bar + pennant to the right
        span = np.clip((u - w) / (0.95 - w), 0.0, 1.0)
        pennant = (u >= w) & (u <= 0.95) & (np.abs(v - 0.30) <= 0.25 * (1.0 - span))
        mask = bar | pennant
    elif cls == 1:  # L: bar + foot along the bottom
        mask = bar | ((v >= 1.0 - w) & (u <= 0.90))
    elif cls == 2:  # b: bar + solid ball at the lower right
        mask = bar | ((u - 0.62) ** 2 + (v - 0.68) ** 2 <= 0.26**2)
    elif cls == 3:  # slash + corner dot
        mask = (np.abs(v - (1.0 - u)) <= 0.9 * w) | ((u <= 2 * w) & (v <= 2 * w))
    elif cls == 4:  # comb: bar + two teeth
        tooth1 = (v >= 0.10) & (v <= 0.10 + w) & (u <= 0.85)
        tooth2 = (v >= 0.45) & (v <= 0.45 + w) & (u <= 0.85)
        mask = bar | tooth1 | tooth2
    else:
        raise DataError(f"no glyph prototype for class {cls}")
    if flipped:
        mask = mask[:, ::-1]
    return mask


@dataclass(frozen=True)
class RenderParams:
    dy: int = 0
    fill_jitter: tuple[float, ...] = (0.0, 0.0, 0.0)
    bg_jitter: float = 0.0


def draw_params(rng: np.random.Generator) -> RenderParams:
    return RenderParams(
        dy=int(rng.integers(-1, 2)),
        fill_jitter=tuple(rng.uniform(-0.05, 0.05, size=3)),
        bg_jitter=float(rng.uniform(-0.04, 0.04)),
    )


def render(
    cls: int,
    z: Sequence[float],
    params: RenderParams = RenderParams(),
    image_size: int = 32,
    channels: int = 3,
) -> np.ndarray:
    """Render one sample as a float32 (channels, H, W) image in [0, 1]."""
    bits = [bool(round(v)) for v in z]
    hue, thick, bright, flip, large, upper = bits
    size = _LARGE if large else _SMALL
    cy = _ROW_UPPER if upper else _ROW_MID
    top = cy - size // 2 + params.dy
    left = (image_size - size) // 2  # horizontally centered: mirror == flip bit
    bg = (_BG_BRIGHT if bright else _BG_DARK) + params.bg_jitter
    img = np.full((channels, image_size, image_size), np.clip(bg, 0.02, 0.98), dtype=np.float32)
    if channels == 3:
        fill = np.clip((_FILL_BLUE if hue else _FILL_RED) + np.asarray(params.fill_jitter, dtype=np.float32), 0.02, 0.98)
    else:
        fill = np.clip(np.array([_FILL_GRAY[1] if hue else _FILL_GRAY[0]], dtype=np.float32) + params.fill_jitter[0], 0.02, 0.98)
    mask = glyph_mask(cls, size, thick, flip)
    region = img[:, top : top + size, left : left + size]
    region[:, mask] = fill[:, None]
    return img


def _mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], rows[-1], cols[0], cols[-1]


def classify_oracle(img: np.ndarray) -> tuple[int, tuple[int, ...]]:
    """Rule-based classifier written against the renderer.

    Exact on clean renders; on generated (blurry) images it degrades to a
    nearest-template decision, which is what the editing fidelity metrics
    need.
    """
    channels = img.shape[0]
    border = np.concatenate(
        [img[:, :2, :].reshape(channels, -1), img[:, -2:, :].reshape(channels, -1),
         img[:, :, :2].reshape(channels, -1), img[:, :, -2:].reshape(channels, -1)],
        axis=1,
    )
    bg = np.median(border, axis=1)
    bright = int(bg.mean() > 0.5)
    diff = np.abs(img - bg[:, None, None]).max(axis=0)
    mask = diff > _MASK_THRESHOLD
    if not mask.any():
        return 0, (0, 0, bright, 0, 0, 0)
    r0, r1, c0, c1 = _mask_bbox(mask)
    large = int(max(r1 - r0, c1 - c0) + 1 >= 13)
    upper = int((r0 + r1) / 2 < 13)
    fill = img[:, mask].mean(axis=1)
    if channels == 3:
        hue = int(fill[2] > fill[0])
    else:
        hue = int(abs(fill[0] - _FILL_GRAY[1]) < abs(fill[0] - _FILL_GRAY[0]))
    size = _LARGE if large else _SMALL
    # nearest template over (class, flip, stroke), small shifts, and several
    # mask thresholds: exact on clean renders, tolerant of decoder blur
    best, best_score = (0, 0, 0), -1.0
    h, w = mask.shape
    masks = [mask] + [diff > t for t in (0.25, 0.35)]
    for cls in range(N_SYNTH_CLASSES):
        for flip in (0, 1):
            for thick in (0, 1):
                tmpl = glyph_mask(cls, size, bool(thick), bool(flip))
                tr0, _, tc0, _ = _mask_bbox(tmpl)
                for cand in masks:
                    if not cand.any():
                        continue
                    m0, _, m1, _ = _mask_bbox(cand)
                    for drow in (0, -1, 1):
                        for dcol in (0, -1, 1):
                            top, leftc = m0 - tr0 + drow, m1 - tc0 + dcol
                            if top < 0 or leftc < 0 or top + size > h or leftc + size > w:
                                continue
                            placed = np.zeros_like(mask)
                            placed[top : top + size, leftc : leftc + size] = tmpl
                            inter = np.logical_and(placed, cand).sum()
                            union = np.logical_or(placed, cand).sum()
                            score = inter / union if union else 0.0
                            if score > best_score:
                                best_score, best = score, (cls, flip, thick)
    cls, flip, thick = best
    return cls, (hue, thick, bright, flip, large, upper)


def _balanced_bits(n: int, n_attributes: int, rng: np.random.Generator) -> np.ndarray:
    cols = []
    for _ in range(n_attributes):
        col = np.repeat([0.0, 1.0], n // 2)
        rng.shuffle(col)
        cols.append(col)
    return np.stack(cols, axis=1)


def generate_synthetic(spec: SyntheticSpec, out_dir: Path | str) -> Manifest:
    """Render the dataset to PNG files and return the (untagged) manifest."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for cls in range(spec.n_classes):
        bit_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, cls]))
        bits = _balanced_bits(spec.samples_per_class, N_SYNTH_ATTRIBUTES, bit_rng)
        for i in range(spec.samples_per_class):
            params = draw_params(np.random.default_rng(np.random.SeedSequence([spec.seed, cls, i])))
            img = render(cls, bits[i], params, spec.image_size, spec.channels)
            name = f"c{cls}_{i:05d}.png"
            save_image(img, out_dir / name)
            rows.append(ManifestRow(name, cls, tuple(bits[i].tolist())))
    return Manifest(root=out_dir, rows=rows)


def save_image(img: np.ndarray, path: Path | str):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None, :, :]
    return arr.transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# label preprocessing formulas

NORB_LIGHTING_MAP = (0.6, 0.3, 0.0, 0.7, 0.4, 1.0)
NORB_ELEVATION_CENTERS = (35.0, 50.0, 65.0)
NORB_AZIMUTH_CENTERS = (0.0, 90.0, 180.0, 270.0)


def norb_soft_labels(
    lighting_class: int,
    elevation: float,
    azimuth: float,
    azimuth_divisor: float = 9.0,
) -> np.ndarray:
    """Soft 8-dim attribute vector: [lighting, 3 elevation bins, 4 azimuth bins]."""
    if not 0 <= lighting_class <= 5:
        raise DataError(f"lighting class {lighting_class} outside 0..5")
    if not 30.0 <= elevation <= 70.0:
        raise DataError(f"elevation {elevation} outside [30, 70]")
    if not 0.0 <= azimuth <= 340.0:
        raise DataError(f"azimuth {azimuth} outside [0, 340]")
    z = np.zeros(8, dtype=np.float32)
    z[0] = NORB_LIGHTING_MAP[lighting_class]
    for i, center in enumerate(NORB_ELEVATION_CENTERS):
        z[1 + i] = 1.0 - min(1.0, abs(elevation - center) / 15.0)
    for j, center in enumerate(NORB_AZIMUTH_CENTERS):
        d = abs(azimuth - center)
        d = min(d, 360.0 - d)  # wraparound on the viewing circle
        z[4 + j] = 1.0 - min(1.0, d / azimuth_divisor)
    return z


@dataclass(frozen=True)
class ClusterTable:
    """Maps (elevation, azimuth) cells to lighting-cluster ids 0..n-1."""

    elevation_edges: tuple[float, ...]
    azimuth_edges: tuple[float, ...]
    ids: tuple[tuple[int, ...], ...]  # [elevation cell][azimuth cell]
    n_clusters: int = 14

    def cluster_of(self, elevation: float, azimuth: float) -> int:
        i = np.searchsorted(self.elevation_edges, elevation, side="right") - 1
        j = np.searchsorted(self.azimuth_edges, azimuth, side="right") - 1
        if not (0 <= i < len(self.ids) and 0 <= j < len(self.ids[0])):
            raise DataError(f"angles ({elevation}, {azimuth}) outside the cluster table")
        cid = self.ids[i][j]
        if not 0 <= cid < self.n_clusters:
            raise DataError(f"cluster id {cid} outside 0..{self.n_clusters - 1}")
        return cid


def yale_light_cluster(elevation: float, azimuth: float, table: ClusterTable) -> np.ndarray:
    z = np.zeros(table.n_clusters, dtype=np.float32)
    z[table.cluster_of(elevation, azimuth)] = 1.0
    return z


# ---------------------------------------------------------------------------
# splits and batching

SPLIT_PRESETS = {"celeba": 0.2, "yale": 0.5, "norb": 0.5}


def split(manifest: Manifest, test_fraction: float, val_fraction: float = 0.2, seed: int = 0) -> Manifest:
    """Per-class stratified split into train/val/test tags.

    Stable under row reordering: assignment is keyed on sorted filenames.
    Validation is carved out of the post-test train pool.
    """
    if not 0.0 < test_fraction < 1.0 or not 0.0 < val_fraction < 1.0:
        raise DataError("fractions must lie in (0, 1)")
    by_class: dict[int, list[ManifestRow]] = {}
    for row in manifest.rows:
        by_class.setdefault(row.y, []).append(row)
    tags: dict[str, str] = {}
    for y, rows in sorted(by_class.items()):
        if len(rows) < 3:
            raise DataError(f"class {y} has only {len(rows)} samples; need >= 3 to split")
        names = sorted(r.filename for r in rows)
        rng = np.random.default_rng(np.random.SeedSequence([seed, y]))
        order = rng.permutation(len(names))
        n_test = max(1, round(len(names) * test_fraction))
        rest = len(names) - n_test
        n_val = max(1, round(rest * val_fraction))
        for k, idx in enumerate(order):
            tag = "test" if k < n_test else ("val" if k < n_test + n_val else "train")
            tags[names[idx]] = tag
    return Manifest(root=manifest.root, rows=[replace(r, split=tags[r.filename]) for r in manifest.rows])


@dataclass
class LabeledBatch:
    x: torch.Tensor  # (B, C, H, W) float32 in [0, 1]
    y: torch.Tensor  # (B,) int64
    z: torch.Tensor  # (B, N_z) float32
    mask_y: torch.Tensor  # (B,) bool
    mask_z: torch.Tensor  # (B,) bool


class ImageStore:
    """Caches decoded images by filename."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}

    def get(self, filename: str) -> np.ndarray:
        if filename not in self._cache:
            path = self.root / filename
            try:
                self._cache[filename] = load_image(path)
            except OSError as err:
                raise DataError(f"cannot read image {path}") from err
        return self._cache[filename]


def rows_to_batch(rows: Sequence[ManifestRow], store: ImageStore, labeled: set[str] | None = None) -> LabeledBatch:
    x = torch.from_numpy(np.stack([store.get(r.filename) for r in rows]))
    y = torch.tensor([r.y for r in rows], dtype=torch.int64)
    z = torch.tensor([r.z for r in rows], dtype=torch.float32)
    mask_z = torch.tensor(
        [True if labeled is None else (r.filename in labeled) for r in rows], dtype=torch.bool
    )
    return LabeledBatch(x=x, y=y, z=z, mask_y=torch.ones(len(rows), dtype=torch.bool), mask_z=mask_z)


def load_batches(
    manifest: Manifest,
    split_tag: str,
    batch_size: int,
    shuffle_seed: int | None = None,
    store: ImageStore | None = None,
    labeled: set[str] | None = None,
) -> Iterator[LabeledBatch]:
    """Deterministic batch stream; the final partial batch is kept."""
    rows = sorted(manifest.subset(split_tag), key=lambda r: r.filename)
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        rows = [rows[i] for i in rng.permutation(len(rows))]
    store = store or ImageStore(manifest.root)
    for start in range(0, len(rows), batch_size):
        yield rows_to_batch(rows[start : start + batch_size], store, labeled)


def choose_labeled(manifest: Manifest, fraction: float, seed: int, split_tag: str = "train") -> set[str]:
    """Per-class stratified choice of rows that keep their attribute labels."""
    rows = manifest.subset(split_tag)
    by_class: dict[int, list[str]] = {}
    for r in rows:
        by_class.setdefault(r.y, []).append(r.filename)
    chosen: set[str] = set()
    for y, names in sorted(by_class.items()):
        names = sorted(names)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7919, y]))
        k = max(1, round(len(names) * fraction))
        idx = rng.permutation(len(names))[:k]
        chosen.update(names[i] for i in idx)
    return chosen
