"""Bag ingestion: the SEQF binary container, manifests, corpus statistics.

SEQF layout (little-endian):

    bytes 0..3    magic "SEQF"
    4..7          version u32 = 1
    8..11         L u32 (tokens)
    12..15        D u32 (features per token)
    16..          L*D float32 values, row-major (token-major)

Trailing bytes are rejected.  Patch-label files are the same container with
D = 1 and integer-valued floats; coordinate files use D = 2, also integral.

A manifest is comma-separated text with header
``id,label,features,patch_labels,coords``; the two optional cells may be
empty.  Paths are resolved relative to the manifest's directory and bags
are returned in row order.
"""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

MAGIC = b"SEQF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
MAX_PAYLOAD_BYTES = 1 << 40  # guards L*D overflow before allocating

MANIFEST_COLUMNS = ["id", "label", "features", "patch_labels", "coords"]


@dataclass
class Bag:
    """One slide: its token features, slide label, optional extras."""

    id: str
    features: np.ndarray  # (L, D) float32
    slide_label: int
    patch_labels: np.ndarray | None = None  # (L,) int
    coords: np.ndarray | None = None  # (L, 2) int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ContractError(f"bag {self.id}: features must be (L>=1, D), got {self.features.shape}")
        length = self.features.shape[0]
        if self.patch_labels is not None:
            self.patch_labels = np.asarray(self.patch_labels, dtype=np.int64)
            if self.patch_labels.shape != (length,):
                raise ContractError(
                    f"bag {self.id}: patch labels must have length {length}, got {self.patch_labels.shape}"
                )
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.int64)
            if self.coords.shape != (length, 2):
                raise ContractError(
                    f"bag {self.id}: coords must be ({length}, 2), got {self.coords.shape}"
                )

    @property
    def length(self) -> int:
        return self.features.shape[0]


# --------------------------------------------------------------------------
# SEQF container
# --------------------------------------------------------------------------

def write_sequence_file(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] < 1 or matrix.shape[1] < 1:
        raise ContractError(f"sequence files hold (L>=1, D>=1) matrices, got {matrix.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_sequence_file(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ParseError(f"{path}: file shorter than the 16-byte header", offset=len(blob))
    magic, version, length, dim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported version {version}", offset=4)
    if length < 1 or dim < 1 or 4 * length * dim > MAX_PAYLOAD_BYTES:
        raise ParseError(f"{path}: implausible dimensions L={length}, D={dim}", offset=8)
    expected_end = _HEADER.size + 4 * length * dim
    if len(blob) < expected_end:
        raise ParseError(
            f"{path}: payload truncated, expected {expected_end} bytes, have {len(blob)}",
            offset=len(blob),
        )
    if len(blob) > expected_end:
        raise ParseError(f"{path}: {len(blob) - expected_end} trailing bytes", offset=expected_end)
    values = np.frombuffer(blob, dtype="<f4", count=length * dim, offset=_HEADER.size)
    return values.reshape(length, dim).copy()


def _read_integral_file(path, dim: int, what: str) -> np.ndarray:
    matrix = read_sequence_file(path)
    if matrix.shape[1] != dim:
        raise ParseError(f"{path}: {what} files need D={dim}, got D={matrix.shape[1]}", offset=12)
    as_f64 = matrix.astype(np.float64)
    if np.any(as_f64 != np.round(as_f64)):
        bad = int(np.argmax((as_f64 != np.round(as_f64)).any(axis=1)))
        raise ParseError(f"{path}: non-integral {what} value at token {bad}")
    return as_f64.astype(np.int64)


def read_patch_labels(path) -> np.ndarray:
    return _read_integral_file(path, 1, "patch-label")[:, 0]


def read_coords(path) -> np.ndarray:
    return _read_integral_file(path, 2, "coordinate")


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------

def write_manifest(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in MANIFEST_COLUMNS})


def load_manifest(path) -> list[Bag]:
    """Read every referenced file; bags come back in manifest row order."""
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise ParseError(
                f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}"
            )
        rows = list(reader)
    if not rows:
        raise ParseError(f"{path}: manifest has no rows")
    seen: set[str] = set()
    bags = []
    for lineno, row in enumerate(rows, start=2):
        bag_id = (row["id"] or "").strip()
        if not bag_id:
            raise ParseError(f"{path}:{lineno}: empty bag id")
        if bag_id in seen:
            raise ParseError(f"{path}:{lineno}: duplicate bag id {bag_id!r}")
        seen.add(bag_id)
        try:
            label = int(row["label"])
        except (TypeError, ValueError):
            raise ParseError(f"{path}:{lineno}: label {row['label']!r} is not an integer") from None
        feat_path = base / row["features"]
        if not feat_path.is_file():
            raise ParseError(f"{path}:{lineno}: feature file {feat_path} does not exist")
        features = read_sequence_file(feat_path)
        patch_labels = None
        if row.get("patch_labels"):
            lbl_path = base / row["patch_labels"]
            if not lbl_path.is_file():
                raise ParseError(f"{path}:{lineno}: patch-label file {lbl_path} does not exist")
            patch_labels = read_patch_labels(lbl_path)
        coords = None
        if row.get("coords"):
            coord_path = base / row["coords"]
            if not coord_path.is_file():
                raise ParseError(f"{path}:{lineno}: coords file {coord_path} does not exist")
            coords = read_coords(coord_path)
        bags.append(Bag(id=bag_id, features=features, slide_label=label,
                        patch_labels=patch_labels, coords=coords))
    return bags


# --------------------------------------------------------------------------
# Corpus statistics
# --------------------------------------------------------------------------

def long_sequence_split(bags: list[Bag], percentile: float = 85) -> list[Bag]:
    """Bags whose length reaches the nearest-rank percentile threshold."""
    if not bags:
        raise ContractError("long_sequence_split needs a non-empty corpus")
    if not 0 <= percentile <= 100:
        raise ContractError(f"percentile must be in [0, 100], got {percentile}")
    if percentile == 0:
        return list(bags)
    lengths = sorted(bag.length for bag in bags)
    rank = int(np.ceil(percentile / 100.0 * len(lengths)))  # 1-based nearest rank
    threshold = lengths[rank - 1]
    return [bag for bag in bags if bag.length >= threshold]


def corpus_stats(bags: list[Bag]) -> dict:
    if not bags:
        raise ContractError("corpus_stats needs a non-empty corpus")
    lengths = np.array([bag.length for bag in bags], dtype=np.int64)
    return {
        "count": int(lengths.size),
        "mean_length": round(float(lengths.mean()), 2),
        "min_length": int(lengths.min()),
        "max_length": int(lengths.max()),
    }
