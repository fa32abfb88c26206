"""Synthetic witness bags, binary bag files, manifests and patient-level splits.

Bag file layout (integers u32 little-endian)::

    b"MILB" | version=1 | n | d | label | len(patient_id) | patient_id (UTF-8)
    | n*d float32 little-endian, row-major

Manifest: UTF-8 CSV with header ``path,label,patient_id,split`` and LF endings;
paths are relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ParameterError
from .mil import Bag

BAG_MAGIC = b"MILB"
BAG_VERSION = 1
MANIFEST_HEADER = ("path", "label", "patient_id", "split")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticConfig:
    bag_count: int = 200
    instances_per_bag: tuple[int, int] = (90, 110)
    feature_dim: int = 32
    class_count: int = 2
    witness_rate: float = 0.1
    cluster_separation: float = 2.0
    spatial_clustering: bool = True
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.instances_per_bag
        checks = [
            ("bag_count", self.bag_count >= 4, "must be >= 4"),
            ("instances_per_bag", 1 <= lo <= hi, "must satisfy 1 <= min <= max"),
            ("feature_dim", self.feature_dim >= 1, "must be >= 1"),
            ("class_count", 2 <= self.class_count <= self.feature_dim + 1, "must be in [2, feature_dim + 1]"),
            ("witness_rate", 0.0 < self.witness_rate <= 1.0, "must be in (0, 1]"),
            ("cluster_separation", self.cluster_separation >= 0.0, "must be >= 0"),
        ]
        for name, ok, why in checks:
            if not ok:
                raise ParameterError(f"invalid {name}: {getattr(self, name)!r} ({why})")


# cluster_separation == 0 is accepted so the no-signal control can be generated.
PRESETS = {
    "camelyon-like": SyntheticConfig(witness_rate=0.1),
    "tcga-like": SyntheticConfig(witness_rate=0.8, class_count=3, spatial_clustering=True),
}


@dataclass
class SyntheticDataset:
    bags: list[Bag]
    instance_labels: list[np.ndarray]  # evaluation only
    config: SyntheticConfig
    centroids: np.ndarray = field(repr=False, default=None)


def witness_count(rate: float, n: int) -> int:
    # guard against ceil(0.1 * 100) == 11 from float rounding
    return min(n, math.ceil(round(rate * n, 9)))


def witness_block(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a compact rectangle of ``count`` cells on the ceil(sqrt(n)) grid.

    The rectangle is ceil(sqrt(count)) wide and filled row-major, so its last
    row may be partial. Only placements whose cells all fall below n are
    drawn; if none exists the block degrades to a contiguous run.
    """
    side = math.isqrt(n - 1) + 1
    width = min(side, math.isqrt(count - 1) + 1)
    height = -(-count // width)
    cells = np.arange(count)
    offsets = (cells // width) * side + cells % width
    corners = [
        r * side + c
        for r in range(side - height + 1)
        for c in range(side - width + 1)
        if r * side + c + offsets[-1] < n
    ]
    if not corners:
        start = int(rng.integers(0, n - count + 1))
        return np.arange(start, start + count)
    return corners[int(rng.integers(len(corners)))] + offsets


def generate_synthetic_dataset(cfg: SyntheticConfig) -> SyntheticDataset:
    """Balanced bags; class 0 is pure background, class c >= 1 carries witnesses.

    Background instances are N(0, I). Witnesses of class c are N(mu_c, I) with
    mu_c at distance ``cluster_separation`` from the origin along orthonormal
    random directions. With spatial clustering the witnesses occupy one
    contiguous run of row-major positions on the ceil(sqrt(n)) grid.
    Features are rounded to float32 so that files round-trip exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.feature_dim, cfg.feature_dim)))
    centroids = cfg.cluster_separation * basis[:, : cfg.class_count - 1].T
    labels = np.arange(cfg.bag_count) % cfg.class_count
    rng.shuffle(labels)
    width = len(str(cfg.bag_count - 1))
    bags, truths = [], []
    lo, hi = cfg.instances_per_bag
    for i, label in enumerate(labels):
        n = int(rng.integers(lo, hi + 1))
        x = rng.normal(size=(n, cfg.feature_dim))
        truth = np.zeros(n, dtype=np.int64)
        if label > 0:
            w = witness_count(cfg.witness_rate, n)
            if cfg.spatial_clustering:
                idx = witness_block(n, w, rng)
            else:
                idx = np.sort(rng.choice(n, size=w, replace=False))
            x[idx] += centroids[label - 1]
            truth[idx] = 1
        bag_id = f"bag{i:0{width}d}"
        bags.append(Bag(x.astype(np.float32).astype(np.float64), int(label), bag_id, f"patient{i:0{width}d}"))
        truths.append(truth)
    return SyntheticDataset(bags, truths, cfg, centroids)


# ---------------------------------------------------------------------------
# bag files


def encode_bag(bag: Bag) -> bytes:
    pid = bag.patient_id.encode("utf-8")
    n, d = bag.instances.shape
    header = BAG_MAGIC + struct.pack("<5I", BAG_VERSION, n, d, bag.label, len(pid)) + pid
    return header + np.ascontiguousarray(bag.instances, dtype="<f4").tobytes()


def decode_bag(buf: bytes, bag_id: str = "") -> Bag:
    if len(buf) < 4 or buf[:4] != BAG_MAGIC:
        raise FormatError("bad magic, expected b'MILB'", 0)
    if len(buf) < 24:
        raise FormatError("truncated header", len(buf))
    version, n, d, label, plen = struct.unpack_from("<5I", buf, 4)
    if version != BAG_VERSION:
        raise FormatError(f"unsupported bag version {version}", 4)
    if n < 1 or d < 1:
        raise FormatError(f"empty bag shape {n}x{d}", 8)
    if len(buf) < 24 + plen:
        raise FormatError("truncated patient id", len(buf))
    try:
        pid = buf[24 : 24 + plen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("patient id is not UTF-8", 24 + exc.start) from None
    start = 24 + plen
    expected = start + 4 * n * d
    if len(buf) != expected:
        raise FormatError(f"payload size mismatch: file has {len(buf)} bytes, expected {expected}", min(len(buf), expected))
    x = np.frombuffer(buf, dtype="<f4", count=n * d, offset=start).reshape(n, d)
    return Bag(x.astype(np.float64), label, bag_id, pid)


def write_bag(bag: Bag, path) -> None:
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path) -> Bag:
    path = Path(path)
    return decode_bag(path.read_bytes(), path.stem)


# ---------------------------------------------------------------------------
# manifests and splits


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    patient_id: str
    split: str = ""


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in records:
        w.writerow((r.path, r.label, r.patient_id, r.split))
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def read_manifest(path) -> list[ManifestRecord]:
    text = Path(path).read_bytes().decode("utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
    return [ManifestRecord(p, int(lbl), pid, split) for p, lbl, pid, split in rows[1:]]


def _apportion(total: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of total * ratios."""
    exact = [total * r for r in ratios]
    counts = [math.floor(e + 1e-9) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(
    records: Sequence[ManifestRecord],
    ratios: Sequence[float] = (0.6, 0.15, 0.25),
    seed: int = 0,
    names: Sequence[str] = SPLITS,
) -> list[ManifestRecord]:
    """Assign whole patients to splits in the requested proportions."""
    if len(ratios) != len(names):
        raise ParameterError(f"{len(ratios)} ratios for {len(names)} splits")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"ratios must be nonnegative and sum to 1, got {tuple(ratios)}")
    patients = sorted({r.patient_id for r in records})
    if len(patients) < len(names):
        raise ParameterError(f"{len(patients)} patients cannot fill {len(names)} splits")
    order = np.random.default_rng(seed).permutation(len(patients))
    counts = _apportion(len(patients), ratios)
    assign, pos = {}, 0
    for name, count in zip(names, counts):
        for i in order[pos : pos + count]:
            assign[patients[i]] = name
        pos += count
    return [replace(r, split=assign[r.patient_id]) for r in records]


def write_dataset(
    dataset: SyntheticDataset,
    out_dir,
    ratios: Sequence[float] = (0.6, 0.15, 0.25),
    seed: int = 0,
) -> list[ManifestRecord]:
    """Write bags under ``out_dir/bags`` plus ``out_dir/manifest.csv``."""
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    records = []
    for bag in dataset.bags:
        rel = f"bags/{bag.id}.milb"
        write_bag(bag, out / rel)
        records.append(ManifestRecord(rel, bag.label, bag.patient_id))
    records = split_dataset(records, ratios, seed)
    write_manifest(records, out / "manifest.csv")
    return records


def load_split(manifest_path, split: str | None = None) -> list[Bag]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    return [
        read_bag(base / r.path)
        for r in read_manifest(manifest_path)
        if split is None or r.split == split
    ]
