"""Image and manifest data model shared by every pipeline stage.

Pixel currency is a channel-first float raster in [0, 1]; manifests are
line-delimited, tab-separated record files with a `#` header line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    CorruptImageError,
    DuplicateTileIdError,
    ManifestFormatError,
    MissingFileError,
    StainbenchError,
    UnsupportedImageError,
)

HER2_SCORES = ("0", "1+", "2+", "3+")
SPLITS = ("train", "val", "test", "unassigned")
STATUSES = ("pending", "kept", "dropped")

_MANIFEST_FIELDS = (
    "tile_id", "case_id", "her2_score", "path_source", "path_target",
    "split", "status", "artifact_tag",
)


@dataclass(frozen=True)
class ImageTensor:
    """Immutable channel x height x width raster with values in [0, 1]."""

    data: np.ndarray  # float64, shape (c, h, w)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise StainbenchError(f"expected (c, h, w) array, got shape {arr.shape}")
        c, h, w = arr.shape
        if c not in (1, 3):
            raise StainbenchError(f"channels must be 1 or 3, got {c}")
        if h < 1 or w < 1:
            raise StainbenchError(f"height and width must be >= 1, got ({h}, {w})")
        if not np.all(np.isfinite(arr)):
            raise StainbenchError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise StainbenchError("image values must lie in [0, 1]")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class TileRecord:
    tile_id: str
    case_id: str
    her2_score: str
    path_source: str
    path_target: str
    split: str = "unassigned"
    status: str = "pending"
    artifact_tag: str = ""

    def __post_init__(self):
        if not self.tile_id:
            raise StainbenchError("tile_id must be non-empty")
        if self.her2_score not in HER2_SCORES:
            raise StainbenchError(f"invalid her2_score: {self.her2_score!r}")
        if self.split not in SPLITS:
            raise StainbenchError(f"invalid split: {self.split!r}")
        if self.status not in STATUSES:
            raise StainbenchError(f"invalid status: {self.status!r}")
        if self.split != "unassigned" and self.status != "kept":
            raise StainbenchError(
                f"tile {self.tile_id}: split={self.split} requires status=kept"
            )
        for name in ("tile_id", "case_id", "her2_score", "path_source",
                     "path_target", "artifact_tag"):
            value = getattr(self, name)
            if "\t" in value or "\n" in value:
                raise StainbenchError(f"field {name} may not contain tabs or newlines")

    def with_status(self, status: str, artifact_tag: str | None = None) -> "TileRecord":
        split = self.split if status == "kept" else "unassigned"
        tag = self.artifact_tag if artifact_tag is None else artifact_tag
        return replace(self, status=status, split=split, artifact_tag=tag)


@dataclass(frozen=True)
class Manifest:
    records: tuple[TileRecord, ...]
    dataset_name: str = "unnamed"
    microns_per_pixel: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.microns_per_pixel <= 0:
            raise StainbenchError("microns_per_pixel must be positive")
        seen: set[str] = set()
        case_split: dict[str, str] = {}
        for rec in self.records:
            if rec.tile_id in seen:
                raise DuplicateTileIdError(rec.tile_id)
            seen.add(rec.tile_id)
            if rec.split != "unassigned":
                prev = case_split.get(rec.case_id)
                if prev is not None and prev != rec.split:
                    raise StainbenchError(
                        f"case {rec.case_id} appears in splits {prev} and {rec.split}"
                    )
                case_split[rec.case_id] = rec.split

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> dict[str, TileRecord]:
        return {rec.tile_id: rec for rec in self.records}

    def status_counts(self) -> dict[str, int]:
        counts = {status: 0 for status in STATUSES}
        for rec in self.records:
            counts[rec.status] += 1
        return counts

    def split_counts(self) -> dict[str, int]:
        """Tile counts per split, kept tiles only."""
        counts: dict[str, int] = {}
        for rec in self.records:
            if rec.status == "kept" and rec.split != "unassigned":
                counts[rec.split] = counts.get(rec.split, 0) + 1
        return counts


def load_image(path: str | Path) -> ImageTensor:
    """Load an 8-bit grayscale or RGB PNG, scaled to [0, 1] by dividing by 255."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise UnsupportedImageError(f"{path}: only PNG is supported, got {img.format}")
            if img.mode not in ("L", "RGB"):
                raise UnsupportedImageError(
                    f"{path}: only 8-bit L or RGB PNGs are supported, got mode {img.mode}"
                )
            arr = np.asarray(img, dtype=np.float64)
    except UnidentifiedImageError as exc:
        raise CorruptImageError(f"{path}: not a decodable image") from exc
    except UnsupportedImageError:
        raise
    except OSError as exc:
        raise CorruptImageError(f"{path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return ImageTensor(arr / 255.0)


def save_image(image: ImageTensor, path: str | Path) -> None:
    """Write as 8-bit PNG; values are rounded to the nearest of 256 levels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.rint(image.data * 255.0).astype(np.uint8)
    if image.channels == 1:
        pil = Image.fromarray(arr[0], mode="L")
    else:
        pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    pil.save(path, format="PNG")


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write one record per line, tab-separated, with a `#` header line.

    The write is atomic (temp file + rename) so readers never observe a
    partially written manifest.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"#dataset_name={manifest.dataset_name}\t"
        f"microns_per_pixel={manifest.microns_per_pixel!r}"
    ]
    for rec in manifest.records:
        lines.append("\t".join(getattr(rec, name) for name in _MANIFEST_FIELDS))
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a sibling temp file and rename, so the target is never half-written."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    dataset_name = "unnamed"
    mpp = 0.5
    records: list[TileRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                dataset_name, mpp = _parse_header(line, line_no, dataset_name, mpp)
                continue
            parts = line.split("\t")
            if len(parts) != len(_MANIFEST_FIELDS):
                raise ManifestFormatError(
                    f"expected {len(_MANIFEST_FIELDS)} tab-separated fields, got {len(parts)}",
                    line_no,
                )
            kwargs = dict(zip(_MANIFEST_FIELDS, parts))
            if kwargs["tile_id"] in seen:
                raise DuplicateTileIdError(kwargs["tile_id"])
            seen.add(kwargs["tile_id"])
            try:
                records.append(TileRecord(**kwargs))
            except StainbenchError as exc:
                raise ManifestFormatError(str(exc), line_no) from exc
    return Manifest(tuple(records), dataset_name=dataset_name, microns_per_pixel=mpp)


def _parse_header(line: str, line_no: int, dataset_name: str, mpp: float):
    for item in line.lstrip("#").split("\t"):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ManifestFormatError(f"malformed header item {item!r}", line_no)
        key, value = item.split("=", 1)
        if key == "dataset_name":
            dataset_name = value
        elif key == "microns_per_pixel":
            try:
                mpp = float(value)
            except ValueError:
                raise ManifestFormatError(f"bad microns_per_pixel {value!r}", line_no)
    return dataset_name, mpp
