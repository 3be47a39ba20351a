"""Dataset records, JSON-lines manifests and image preprocessing.

A manifest file holds one JSON object per line::

    {"_meta": {"name": "synth", "num_attributes": 4}}      # optional header
    {"path": "img/0001_00.png", "id": 1, "attr": 2, "attr_soft": false, "camera": 0, "split": "train"}

Paths are relative to the manifest's directory. Identities are re-indexed
at load time: train identities map onto ``[0, C)`` in ascending order of
their original id, identities seen only in gallery/probe records follow
from ``C`` upwards. The original ids are kept in ``DatasetManifest.id_map``
and are what :func:`write_manifest` emits.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageError, ManifestError

SPLITS = ("train", "gallery", "probe")

DEFAULT_PIXEL_MEAN = (0.485, 0.456, 0.406)
DEFAULT_PIXEL_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class VehicleRecord:
    image_path: str
    identity: int
    attribute: int | None = None
    attribute_is_soft: bool = False
    camera: int | None = None
    split: str = "train"

    def __post_init__(self):
        if self.identity < 0:
            raise ValueError(f"identity must be >= 0, got {self.identity}")
        if self.attribute is not None and self.attribute < 0:
            raise ValueError(f"attribute must be >= 0, got {self.attribute}")
        if self.attribute_is_soft and self.attribute is None:
            raise ValueError("a soft attribute label requires an attribute value")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def has_hard_attribute(self) -> bool:
        return self.attribute is not None and not self.attribute_is_soft


@dataclass
class DatasetManifest:
    records: list[VehicleRecord]
    num_identities: int
    num_attributes: int
    name: str = ""
    root: Path | None = None
    # original id -> contiguous id
    id_map: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for rec in self.records:
            if rec.attribute is not None and rec.attribute >= self.num_attributes:
                raise ValueError(
                    f"attribute {rec.attribute} of {rec.image_path} outside [0, {self.num_attributes})"
                )
            if rec.split == "train" and rec.identity >= self.num_identities:
                raise ValueError(f"train identity {rec.identity} outside [0, {self.num_identities})")

    def __len__(self):
        return len(self.records)

    def resolve(self, record: VehicleRecord) -> Path:
        p = Path(record.image_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def split(self, *names: str) -> list[VehicleRecord]:
        return [r for r in self.records if r.split in names]

    def original_identity(self, contiguous: int) -> int:
        inverse = {v: k for k, v in self.id_map.items()}
        return inverse[contiguous]

    def with_records(self, records: Sequence[VehicleRecord]) -> "DatasetManifest":
        """New manifest sharing labels/metadata but holding ``records``."""
        return dataclasses.replace(self, records=list(records), id_map=dict(self.id_map))


def reindex(records: Iterable[VehicleRecord]) -> tuple[list[VehicleRecord], int, dict[int, int]]:
    """Map original identities to contiguous ids; see module docstring."""
    records = list(records)
    train_ids = sorted({r.identity for r in records if r.split == "train"})
    other_ids = sorted({r.identity for r in records} - set(train_ids))
    id_map = {orig: i for i, orig in enumerate(train_ids + other_ids)}
    out = [dataclasses.replace(r, identity=id_map[r.identity]) for r in records]
    return out, len(train_ids), id_map


def build_manifest(
    records: Iterable[VehicleRecord],
    name: str = "",
    num_attributes: int | None = None,
    root: Path | str | None = None,
) -> DatasetManifest:
    """Build a manifest from records carrying *original* identity labels."""
    records, num_ids, id_map = reindex(records)
    if num_attributes is None:
        attrs = [r.attribute for r in records if r.attribute is not None]
        num_attributes = max(attrs) + 1 if attrs else 0
    return DatasetManifest(
        records=records,
        num_identities=num_ids,
        num_attributes=num_attributes,
        name=name,
        root=Path(root) if root is not None else None,
        id_map=id_map,
    )


def _parse_record(obj, path, lineno) -> VehicleRecord:
    if not isinstance(obj, dict):
        raise ManifestError("expected a JSON object", path, lineno)
    missing = [k for k in ("path", "id") if k not in obj]
    if missing:
        raise ManifestError(f"missing field(s) {missing}", path, lineno)
    try:
        return VehicleRecord(
            image_path=str(obj["path"]),
            identity=int(obj["id"]),
            attribute=None if obj.get("attr") is None else int(obj["attr"]),
            attribute_is_soft=bool(obj.get("attr_soft", False)),
            camera=None if obj.get("camera") is None else int(obj["camera"]),
            split=obj.get("split", "train"),
        )
    except (TypeError, ValueError) as exc:
        raise ManifestError(str(exc), path, lineno) from exc


def load_manifest(path: str | os.PathLike, check_images: bool = True) -> DatasetManifest:
    """Read a JSON-lines manifest.

    With ``check_images`` every referenced image must exist on disk;
    pass ``False`` to defer that to decode time.
    """
    path = Path(path)
    root = path.parent
    meta = {}
    records = []
    if not path.is_file():
        raise ManifestError("manifest file not found", path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", path, lineno) from exc
            if isinstance(obj, dict) and "_meta" in obj:
                if records or meta:
                    raise ManifestError("metadata header must be the first line", path, lineno)
                meta = obj["_meta"]
                continue
            rec = _parse_record(obj, path, lineno)
            if check_images:
                img = Path(rec.image_path)
                img = img if img.is_absolute() else root / img
                if not img.exists():
                    raise ManifestError(f"image not found: {img}", path, lineno)
            records.append(rec)
    if not records:
        raise ManifestError("manifest contains no records", path)
    try:
        return build_manifest(
            records,
            name=meta.get("name", path.stem),
            num_attributes=meta.get("num_attributes"),
            root=root,
        )
    except ValueError as exc:
        raise ManifestError(str(exc), path) from exc


def record_to_json(rec: VehicleRecord, identity: int, image_path: str) -> dict:
    return {
        "path": image_path,
        "id": identity,
        "attr": rec.attribute,
        "attr_soft": rec.attribute_is_soft,
        "camera": rec.camera,
        "split": rec.split,
    }


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    """Write ``manifest`` as JSON lines with original identity labels.

    Relative image paths are rewritten so they stay valid from the new
    manifest location.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    inverse = {v: k for k, v in manifest.id_map.items()}
    lines = [json.dumps({"_meta": {"name": manifest.name, "num_attributes": manifest.num_attributes}})]
    for rec in manifest.records:
        p = Path(rec.image_path)
        if not p.is_absolute() and manifest.root is not None:
            full = manifest.root / p
            p_str = os.path.relpath(full, path.parent)
        else:
            p_str = rec.image_path
        lines.append(json.dumps(record_to_json(rec, inverse.get(rec.identity, rec.identity), p_str.replace(os.sep, "/"))))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- images


@dataclass
class ImageTensor:
    """Preprocessed image, ``(size, size, 3)`` float32, ``(x/255 - mean) / std``."""

    data: np.ndarray
    source: str | None = None


def load_image(path: str | os.PathLike) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageError(f"cannot decode image {path}: {exc}") from exc


def preprocess(
    image,
    size: int = 256,
    flip: bool = False,
    mean: Sequence[float] = DEFAULT_PIXEL_MEAN,
    std: Sequence[float] = DEFAULT_PIXEL_STD,
) -> ImageTensor:
    """Resize to ``size`` x ``size``, normalize per channel, optionally mirror.

    ``image`` may be a path, a PIL image, or a uint8 HxWx3 array.
    """
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    source = None
    if isinstance(image, (str, os.PathLike)):
        source = str(image)
        image = load_image(image)
    elif isinstance(image, np.ndarray):
        image = Image.fromarray(np.asarray(image, dtype=np.uint8))
    image = image.convert("RGB")
    if image.size != (size, size):
        image = image.resize((size, size), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    if flip:
        arr = hflip(arr)
    return ImageTensor(np.ascontiguousarray(arr, dtype=np.float32), source)


def hflip(arr: np.ndarray) -> np.ndarray:
    """Mirror an (..., H, W, C) array left-right."""
    return np.ascontiguousarray(arr[..., ::-1, :])


def load_images(
    manifest: DatasetManifest,
    records: Sequence[VehicleRecord],
    size: int,
    mean: Sequence[float] = DEFAULT_PIXEL_MEAN,
    std: Sequence[float] = DEFAULT_PIXEL_STD,
) -> np.ndarray:
    """Decode and preprocess ``records`` into an ``(N, size, size, 3)`` array."""
    out = np.empty((len(records), size, size, 3), dtype=np.float32)
    for i, rec in enumerate(records):
        out[i] = preprocess(manifest.resolve(rec), size, False, mean, std).data
    return out
