"""Descriptor extraction, Euclidean matching, CMC / mAP and query protocols."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import kernels
from .datamodel import DEFAULT_PIXEL_MEAN, DEFAULT_PIXEL_STD, DatasetManifest, VehicleRecord, load_images
from .errors import DataError, ProtocolError
from .network import SanModel, to_batch

PROTOCOLS = ("vehicleid", "veri", "plain")
DEFAULT_MAX_RANK = 20


@dataclass
class DescriptorSet:
    features: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray  # -1 where unknown
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != len(self.identities):
            raise ValueError("descriptor matrix and metadata are misaligned")
        if not np.isfinite(self.features).all():
            raise DataError("descriptor matrix contains NaN or Inf")

    def __len__(self):
        return self.features.shape[0]

    def take(self, idx) -> "DescriptorSet":
        idx = np.asarray(idx, dtype=np.int64)
        return DescriptorSet(
            self.features[idx], self.identities[idx], self.cameras[idx], [self.paths[i] for i in idx]
        )

    def save(self, path):
        np.savez(
            path,
            features=self.features,
            identities=self.identities,
            cameras=self.cameras,
            paths=np.array(self.paths, dtype=str),
        )

    @classmethod
    def load(cls, path) -> "DescriptorSet":
        with np.load(path) as z:
            return cls(z["features"], z["identities"], z["cameras"], [str(p) for p in z["paths"]])


def extract_descriptors(
    model: SanModel,
    manifest: DatasetManifest,
    records: Sequence[VehicleRecord],
    batch_size: int = 32,
    mean=DEFAULT_PIXEL_MEAN,
    std=DEFAULT_PIXEL_STD,
    images: np.ndarray | None = None,
) -> DescriptorSet:
    """Run ``model`` in eval mode over ``records``; ``images`` may hold them pre-decoded."""
    model.eval()
    size = model.build_args["input_size"]
    dtype = next(model.parameters()).dtype
    chunks = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            if images is None:
                batch = load_images(manifest, records[start:start + batch_size], size, mean, std)
            else:
                batch = images[start:start + batch_size]
            out = model(to_batch(batch).to(dtype))
            chunks.append(out["descriptors"].numpy())
    feats = np.concatenate(chunks) if chunks else np.zeros((0, model.descriptor_dim), dtype=np.float32)
    return DescriptorSet(
        feats,
        np.array([r.identity for r in records], dtype=np.int64),
        np.array([-1 if r.camera is None else r.camera for r in records], dtype=np.int64),
        [r.image_path for r in records],
    )


def pairwise_distance(Q, G) -> np.ndarray:
    """``|Q| x |G|`` Euclidean distances; accepts arrays or DescriptorSets."""
    Q = Q.features if isinstance(Q, DescriptorSet) else Q
    G = G.features if isinstance(G, DescriptorSet) else G
    return kernels.pairwise_distance(Q, G)


# ------------------------------------------------------------ metrics


def _ranked(dist, q_ids, g_ids, exclusions):
    first, ap, nmatch = kernels.rank_queries(dist, q_ids, g_ids, exclusions)
    valid = nmatch > 0
    if not valid.any():
        raise ProtocolError("no query has a valid gallery match")
    return first, ap, valid


def compute_cmc(dist, q_ids, g_ids, exclusions=None, max_rank: int = DEFAULT_MAX_RANK) -> np.ndarray:
    """Match rate at ranks ``1..max_rank`` over queries with a valid match."""
    first, _, valid = _ranked(dist, q_ids, g_ids, exclusions)
    return cmc_from_first_hits(first[valid], max_rank)


def cmc_from_first_hits(first_hits: np.ndarray, max_rank: int) -> np.ndarray:
    counts = np.bincount(first_hits[first_hits < max_rank], minlength=max_rank)[:max_rank]
    return np.cumsum(counts) / len(first_hits)


def compute_map(dist, q_ids, g_ids, exclusions=None) -> float:
    _, ap, valid = _ranked(dist, q_ids, g_ids, exclusions)
    return float(ap[valid].mean())


@dataclass
class EvalReport:
    cmc: list[float]
    map: float
    protocol: dict
    per_query_ranks: list[int | None]
    num_queries: int
    num_dropped: int
    map_std: float | None = None
    cmc_std: list[float] | None = None

    def __post_init__(self):
        cmc = np.asarray(self.cmc, dtype=np.float64)
        if cmc.ndim != 1 or len(cmc) == 0:
            raise ValueError("CMC must be a non-empty vector")
        if np.any(np.diff(cmc) < 0):
            raise ValueError("CMC curve is not monotone non-decreasing")
        if cmc.min() < 0 or cmc.max() > 1 or not 0 <= self.map <= 1:
            raise ValueError("CMC / mAP outside [0, 1]")

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def save_cmc_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "rate"])
            for k, rate in enumerate(self.cmc, start=1):
                w.writerow([k, rate])
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        try:
            data = json.loads(Path(path).read_text())
            return cls(**data)
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise DataError(f"malformed report {path}: {exc}") from exc


def evaluate(dist, q_ids, g_ids, exclusions=None, max_rank: int = DEFAULT_MAX_RANK, protocol: dict | None = None) -> EvalReport:
    first, ap, nmatch = kernels.rank_queries(dist, q_ids, g_ids, exclusions)
    valid = nmatch > 0
    if not valid.any():
        raise ProtocolError("no query has a valid gallery match")
    return EvalReport(
        cmc=cmc_from_first_hits(first[valid], max_rank).tolist(),
        map=float(ap[valid].mean()),
        protocol=protocol or {},
        per_query_ranks=[int(r) + 1 if v else None for r, v in zip(first, valid)],
        num_queries=int(valid.sum()),
        num_dropped=int((~valid).sum()),
    )


# ------------------------------------------------------------ protocols


@dataclass
class Protocol:
    name: str
    query: list[VehicleRecord]
    gallery: list[VehicleRecord]
    exclusions: np.ndarray
    # True when query and gallery are the same record list
    shared: bool = False
    meta: dict = field(default_factory=dict)


def resample_vehicleid(records: Sequence[VehicleRecord], rng: np.random.Generator):
    """Draw one gallery image per identity from ``records``; the rest are probes."""
    by_id: dict[int, list[VehicleRecord]] = {}
    for r in records:
        by_id.setdefault(r.identity, []).append(r)
    gallery, probe = [], []
    for ident in sorted(by_id):
        group = by_id[ident]
        pick = int(rng.integers(len(group)))
        gallery.append(group[pick])
        probe.extend(g for i, g in enumerate(group) if i != pick)
    return gallery, probe


def build_protocol(manifest: DatasetManifest, name: str, rng: np.random.Generator | None = None) -> Protocol:
    """Query set, gallery set and exclusion mask for ``name``.

    * ``vehicleid``: probe records against gallery records as given; with
      ``rng`` the gallery is re-drawn (one image per identity) from both.
    * ``veri``: probe records against gallery records, removing gallery
      entries with the query's identity *and* camera.
    * ``plain``: leave-one-out over the non-train records (all records if
      there are none).
    """
    if name == "vehicleid":
        gallery, query = manifest.split("gallery"), manifest.split("probe")
        if rng is not None:
            gallery, query = resample_vehicleid(gallery + query, rng)
        if not gallery or not query:
            raise ProtocolError("vehicleid protocol needs gallery and probe records")
        excl = np.zeros((len(query), len(gallery)), dtype=bool)
        meta = {"exclusion_rule": "none", "gallery_draw": "resampled" if rng is not None else "as given"}
        return Protocol(name, query, gallery, excl, meta=meta)
    if name == "veri":
        gallery, query = manifest.split("gallery"), manifest.split("probe")
        if not gallery or not query:
            raise ProtocolError("veri protocol needs gallery and probe records")
        if any(r.camera is None for r in gallery + query):
            raise ProtocolError("veri protocol requires a camera id on every query and gallery record")
        q_id = np.array([r.identity for r in query])[:, None]
        g_id = np.array([r.identity for r in gallery])[None, :]
        q_cam = np.array([r.camera for r in query])[:, None]
        g_cam = np.array([r.camera for r in gallery])[None, :]
        excl = (q_id == g_id) & (q_cam == g_cam)
        meta = {
            "exclusion_rule": "same identity and same camera",
            "assumption": "same-camera exclusion follows the usual VeRi convention",
        }
        return Protocol(name, query, gallery, excl, meta=meta)
    if name == "plain":
        recs = [r for r in manifest.records if r.split != "train"] or list(manifest.records)
        if len(recs) < 2:
            raise ProtocolError("plain protocol needs at least two records")
        excl = np.eye(len(recs), dtype=bool)
        return Protocol(name, recs, recs, excl, shared=True, meta={"exclusion_rule": "query itself"})
    raise ProtocolError(f"unknown protocol {name!r}; expected one of {PROTOCOLS}")


def evaluate_model(
    model: SanModel,
    manifest: DatasetManifest,
    protocol: str = "plain",
    batch_size: int = 32,
    mean=DEFAULT_PIXEL_MEAN,
    std=DEFAULT_PIXEL_STD,
    max_rank: int = DEFAULT_MAX_RANK,
    repeats: int = 1,
    seed: int = 0,
    images: dict[str, np.ndarray] | None = None,
) -> EvalReport:
    """Extract descriptors and score ``protocol``.

    ``repeats > 1`` re-draws the VehicleID gallery that many times and
    reports the mean curve with standard deviations. ``images`` maps image
    paths to pre-decoded arrays.
    """
    if repeats > 1 and protocol != "vehicleid":
        raise ProtocolError("--repeats only applies to the vehicleid protocol")
    pool = [r for r in manifest.records if r.split != "train"] if protocol == "plain" else manifest.split("gallery", "probe")
    if protocol == "plain" and not pool:
        pool = list(manifest.records)
    pre = np.stack([images[r.image_path] for r in pool]) if images is not None and pool else None
    feats = extract_descriptors(model, manifest, pool, batch_size, mean, std, images=pre)
    index = {id(r): i for i, r in enumerate(pool)}

    reports = []
    rng = np.random.default_rng(seed) if repeats > 1 else None
    for _ in range(max(repeats, 1)):
        proto = build_protocol(manifest, protocol, rng)
        Q = feats.take([index[id(r)] for r in proto.query])
        G = Q if proto.shared else feats.take([index[id(r)] for r in proto.gallery])
        dist = pairwise_distance(Q, G)
        meta = {"name": protocol, "max_rank": max_rank, "repeats": repeats, **proto.meta}
        reports.append(evaluate(dist, Q.identities, G.identities, proto.exclusions, max_rank, meta))
    if len(reports) == 1:
        return reports[0]
    cmcs = np.array([r.cmc for r in reports])
    maps = np.array([r.map for r in reports])
    return EvalReport(
        cmc=cmcs.mean(axis=0).tolist(),
        map=float(maps.mean()),
        protocol=reports[0].protocol,
        per_query_ranks=reports[-1].per_query_ranks,
        num_queries=reports[-1].num_queries,
        num_dropped=reports[-1].num_dropped,
        map_std=float(maps.std()),
        cmc_std=cmcs.std(axis=0).tolist(),
    )
