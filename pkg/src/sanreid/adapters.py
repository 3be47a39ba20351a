"""Readers for the released VehicleID and VeRi directory layouts.

VehicleID (``root`` is the dataset directory)::

    image/<name>.jpg
    train_test_split/train_list.txt        "<name> <vehicle id>" per line
    train_test_split/test_list_<N>.txt     N in {800, 1600, 2400}
    train_test_split/gallery_list_<N>.txt  optional, same format
    attribute/model_attr.txt               "<vehicle id> <model id>", partial

Without a gallery list the first listed image of every test identity is
its gallery image and the rest are probes. Vehicles missing from
``model_attr.txt`` get no attribute.

VeRi::

    image_train/ image_query/ image_test/
    name_train.txt name_query.txt name_test.txt
    train_label.xml                        optional, supplies typeID

Identity and camera come from file names such as ``0002_c002_00030600_0.jpg``.
"""
from __future__ import annotations

import re
from pathlib import Path

from .datamodel import DatasetManifest, VehicleRecord, build_manifest
from .errors import DataError

VEHICLEID_TEST_SIZES = (800, 1600, 2400)
_VERI_NAME = re.compile(r"^(\d+)_c(\d+)_")
_VERI_ITEM = re.compile(rb'imageName="([^"]+)"[^>]*?typeID="(\d+)"')


def _read_pairs(path: Path) -> list[tuple[str, int]]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2 or not parts[1].lstrip("-").isdigit():
                raise DataError(f"{path}:{lineno}: expected '<name> <integer>'")
            out.append((parts[0], int(parts[1])))
    return out


def _require(path: Path) -> Path:
    if not path.is_file():
        raise DataError(f"missing dataset file {path}")
    return path


def _contiguous(values) -> dict[int, int]:
    return {v: i for i, v in enumerate(sorted(set(values)))}


def load_vehicleid(root, test_size: int = 800) -> DatasetManifest:
    if test_size not in VEHICLEID_TEST_SIZES:
        raise ValueError(f"test_size must be one of {VEHICLEID_TEST_SIZES}")
    root = Path(root)
    split_dir = root / "train_test_split"
    train = _read_pairs(_require(split_dir / "train_list.txt"))
    test = _read_pairs(_require(split_dir / f"test_list_{test_size}.txt"))

    model_of: dict[int, int] = {}
    attr_file = root / "attribute" / "model_attr.txt"
    if attr_file.is_file():
        model_of = {int(k): v for k, v in _read_pairs(attr_file)}
    attr_index = _contiguous(model_of.values())

    def rec(name, vid, split):
        model = model_of.get(vid)
        return VehicleRecord(
            f"image/{name}.jpg", vid, attribute=None if model is None else attr_index[model], split=split
        )

    gallery_file = split_dir / f"gallery_list_{test_size}.txt"
    if gallery_file.is_file():
        gallery_names = {name for name, _ in _read_pairs(gallery_file)}
    else:
        seen: set[int] = set()
        gallery_names = set()
        for name, vid in test:
            if vid not in seen:
                seen.add(vid)
                gallery_names.add(name)

    records = [rec(n, v, "train") for n, v in train]
    records += [rec(n, v, "gallery" if n in gallery_names else "probe") for n, v in test]
    return build_manifest(records, f"vehicleid_{test_size}", len(attr_index), root)


def parse_veri_name(name: str) -> tuple[int, int]:
    """``0002_c002_...jpg`` -> (2, 2)."""
    m = _VERI_NAME.match(Path(name).name)
    if m is None:
        raise DataError(f"cannot parse vehicle / camera id from {name!r}")
    return int(m.group(1)), int(m.group(2))


def _read_names(path: Path) -> list[str]:
    return [line.strip() for line in open(_require(path)) if line.strip()]


def load_veri(root) -> DatasetManifest:
    root = Path(root)
    types: dict[str, int] = {}
    label_xml = root / "train_label.xml"
    if label_xml.is_file():
        # the released file is not valid UTF-8 XML; a byte regex is enough
        types = {k.decode(): int(v) for k, v in _VERI_ITEM.findall(label_xml.read_bytes())}
    type_index = _contiguous(types.values())
    records = []
    for list_name, folder, split in (("name_train.txt", "image_train", "train"),
                                     ("name_test.txt", "image_test", "gallery"),
                                     ("name_query.txt", "image_query", "probe")):
        for name in _read_names(root / list_name):
            vid, cam = parse_veri_name(name)
            t = types.get(name) if split == "train" else None
            records.append(VehicleRecord(
                f"{folder}/{name}", vid, attribute=None if t is None else type_index[t], camera=cam, split=split
            ))
    return build_manifest(records, "veri", len(type_index), root)
