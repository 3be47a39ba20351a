"""Desk-scale synthetic vehicle dataset.

Each identity is a coloured body whose colour and width are keyed to its
attribute class, plus an identity-unique, mirror-symmetric pattern of small
squares drawn in the band of rows ``[size/4, size/2)``. Two identities
sharing an attribute therefore differ only inside that band. Per-image jitter is a brightness
factor, a horizontal offset and low-amplitude pixel noise.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import DatasetManifest, VehicleRecord, build_manifest, write_manifest

NUM_SLOTS = 5
# free digits; the pattern is mirrored so a horizontal flip keeps the identity
_FREE_SLOTS = (NUM_SLOTS + 1) // 2
MARK_COLORS = np.array(
    [[0.95, 0.1, 0.1], [0.1, 0.2, 0.95], [0.95, 0.9, 0.1]], dtype=np.float64
)
BACKGROUND = 0.45


@dataclass(frozen=True)
class Jitter:
    brightness: float = 1.0
    offset: int = 0
    noise_seed: int = 0
    noise_std: float = 0.03


def band_rows(size: int) -> tuple[int, int]:
    return size // 4, size // 2


def attribute_color(attr: int, num_attrs: int) -> np.ndarray:
    hue = attr / max(num_attrs, 1)
    return np.array(colorsys.hsv_to_rgb(hue, 0.65, 0.75))


def mark_code(code: int) -> list[int]:
    """Decode an integer into mirror-symmetric per-slot colours (0 = empty slot)."""
    digits = []
    for _ in range(_FREE_SLOTS):
        digits.append(code % (len(MARK_COLORS) + 1))
        code //= len(MARK_COLORS) + 1
    return digits + digits[: NUM_SLOTS // 2][::-1]


def render_vehicle(attr: int, num_attrs: int, code: int, size: int = 128, jitter: Jitter = Jitter()) -> np.ndarray:
    """Render one image as uint8 ``(size, size, 3)``."""
    img = np.full((size, size, 3), BACKGROUND)
    half_width = int(size * (0.30 + 0.10 * (attr % 3) / 2))
    cx = size // 2 + jitter.offset
    x0, x1 = cx - half_width, cx + half_width
    img[size // 8: size - size // 8, x0:x1] = attribute_color(attr, num_attrs)
    # wheels: dark blobs at the bottom, shared by everyone
    img[size - size // 8 - size // 16: size - size // 8, x0:x0 + size // 8] = 0.1
    img[size - size // 8 - size // 16: size - size // 8, x1 - size // 8:x1] = 0.1

    r0, r1 = band_rows(size)
    side = size // 10
    top = (r0 + r1 - side) // 2
    slot_w = (x1 - x0) // NUM_SLOTS
    for s, colour in enumerate(mark_code(code)):
        if colour == 0:
            continue
        left = x0 + s * slot_w + (slot_w - side) // 2
        img[top:top + side, left:left + side] = MARK_COLORS[colour - 1]

    img = img * jitter.brightness
    if jitter.noise_std > 0:
        rng = np.random.default_rng(jitter.noise_seed)
        img = img + rng.normal(0.0, jitter.noise_std, img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def synth_generate(
    out_dir,
    num_ids: int = 20,
    imgs_per_id: int = 8,
    num_attrs: int = 4,
    seed: int = 0,
    size: int = 128,
    holdout: int = 3,
    num_cameras: int = 4,
    noise_std: float = 0.03,
) -> DatasetManifest:
    """Render a dataset under ``out_dir`` and write ``out_dir/manifest.jsonl``.

    The last ``holdout`` images of every identity are held out: the first of
    them is tagged ``probe``, the rest ``gallery``. Output is a pure function
    of the arguments.
    """
    if num_ids < 2 or imgs_per_id < 2 or num_attrs < 2:
        raise ValueError("synth_generate needs num_ids >= 2, imgs_per_id >= 2, num_attrs >= 2")
    if not 0 <= holdout < imgs_per_id:
        raise ValueError("holdout must leave at least one training image per identity")
    max_codes = (len(MARK_COLORS) + 1) ** _FREE_SLOTS - 1
    if num_ids > max_codes:
        raise ValueError(f"at most {max_codes} identities can carry unique marks")

    rng = np.random.default_rng(seed)
    attrs = rng.permutation(np.arange(num_ids) % num_attrs)
    codes = rng.choice(np.arange(1, max_codes + 1), size=num_ids, replace=False)
    max_offset = max(size // 16, 1)

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for ident in range(num_ids):
        for k in range(imgs_per_id):
            jitter = Jitter(
                brightness=float(rng.uniform(0.85, 1.15)),
                offset=int(rng.integers(-max_offset, max_offset + 1)),
                noise_seed=int(rng.integers(0, 2**31 - 1)),
                noise_std=noise_std,
            )
            pixels = render_vehicle(int(attrs[ident]), num_attrs, int(codes[ident]), size, jitter)
            rel = f"images/{ident:04d}_{k:02d}.png"
            Image.fromarray(pixels).save(out_dir / rel, optimize=False)
            held = k - (imgs_per_id - holdout)
            split = "train" if held < 0 else ("probe" if held == 0 else "gallery")
            records.append(
                VehicleRecord(rel, ident, int(attrs[ident]), False, k % num_cameras, split)
            )
    manifest = build_manifest(records, name=f"synth-{seed}", num_attributes=num_attrs, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    (out_dir / "synth.json").write_text(
        json.dumps(
            {
                "num_ids": num_ids,
                "imgs_per_id": imgs_per_id,
                "num_attrs": num_attrs,
                "seed": seed,
                "size": size,
                "holdout": holdout,
                "codes": [int(c) for c in codes],
            },
            indent=2,
        )
    )
    return manifest
