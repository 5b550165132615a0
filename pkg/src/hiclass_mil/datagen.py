"""Synthetic hierarchical MIL datasets and the on-disk bag format.

Bag file layout (little-endian)::

    offset  size  field
    0       4     magic b"HMIL"
    4       4     version (u32, currently 1)
    8       4     number of patches N_p (u32, >= 1)
    12      4     feature dim D (u32, >= 1)
    16      4     coarse label (u32)
    20      4     fine label (u32)
    24      8     reserved, zero
    32      4*N_p*D  float32 features, row-major

The slide id is not stored; it is the file stem.

A dataset directory holds ``manifest.json`` (a JSON array of
``{slide_id, split, coarse, fine, relative_path}``), ``taxonomy.json`` and
the bag files under ``bags/``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .taxonomy import Taxonomy, gastric
from .taxonomy import load as load_taxonomy

SPLITS = ("train", "val", "test")
BAG_MAGIC = b"HMIL"
BAG_VERSION = 1
_HEADER = struct.Struct("<4sIIIII8s")
assert _HEADER.size == 32

# Slide counts per fine class (train, val, test) for the gastric hierarchy,
# in the bundled taxonomy's fine-class order.
GASTRIC_SLIDE_COUNTS = (
    (725, 90, 90),
    (288, 36, 36),
    (259, 32, 32),
    (10, 2, 2),
    (18, 2, 2),
    (9, 2, 2),
    (549, 68, 68),
    (118, 14, 14),
    (671, 83, 83),
    (96, 11, 11),
    (126, 15, 15),
    (618, 77, 77),
    (224, 27, 27),
    (36, 4, 4),
)


class BagFormatError(ValueError):
    pass


@dataclass
class Bag:
    slide_id: str
    features: np.ndarray
    coarse_label: int
    fine_label: int

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise BagFormatError(f"bag {self.slide_id}: features must be 2-D")
        if self.features.shape[0] < 1:
            raise BagFormatError(f"bag {self.slide_id}: needs at least one patch")
        if self.features.shape[1] < 1:
            raise BagFormatError(f"bag {self.slide_id}: feature dim must be >= 1")
        if not np.all(np.isfinite(self.features)):
            raise BagFormatError(f"bag {self.slide_id}: non-finite feature values")
        self.coarse_label = int(self.coarse_label)
        self.fine_label = int(self.fine_label)

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    def check_labels(self, taxonomy: Taxonomy) -> None:
        if taxonomy.group_of(self.fine_label) != self.coarse_label:
            raise ValueError(
                f"bag {self.slide_id}: fine label {self.fine_label} is not a child "
                f"of coarse label {self.coarse_label}"
            )


def encode_bag(bag: Bag) -> bytes:
    feats = np.ascontiguousarray(bag.features, dtype="<f4")
    if not np.all(np.isfinite(feats)):
        raise BagFormatError(f"bag {bag.slide_id}: features overflow float32")
    n_p, d = feats.shape
    header = _HEADER.pack(BAG_MAGIC, BAG_VERSION, n_p, d, bag.coarse_label, bag.fine_label, bytes(8))
    return header + feats.tobytes()


def decode_bag(data: bytes, slide_id: str = "") -> Bag:
    if len(data) < _HEADER.size:
        raise BagFormatError(f"bag {slide_id}: truncated header ({len(data)} bytes)")
    magic, version, n_p, d, coarse, fine, _ = _HEADER.unpack_from(data)
    if magic != BAG_MAGIC:
        raise BagFormatError(f"bag {slide_id}: bad magic {magic!r}")
    if version != BAG_VERSION:
        raise BagFormatError(f"bag {slide_id}: unsupported version {version}")
    if n_p < 1 or d < 1:
        raise BagFormatError(f"bag {slide_id}: header declares N_p={n_p}, D={d}")
    expected = _HEADER.size + 4 * n_p * d
    if len(data) != expected:
        raise BagFormatError(
            f"bag {slide_id}: payload size mismatch, expected {expected} bytes, got {len(data)}"
        )
    feats = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n_p, d).astype(np.float32)
    return Bag(slide_id, feats, coarse, fine)


def write_bag(bag: Bag, path) -> None:
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path, slide_id: str | None = None) -> Bag:
    path = Path(path)
    return decode_bag(path.read_bytes(), slide_id if slide_id is not None else path.stem)


@dataclass
class DatasetSpec:
    """Parameters of a synthetic hierarchical MIL dataset.

    ``slides_per_fine_class`` maps each split to either one count shared by
    every fine class or a per-class sequence of counts (for imbalanced sets).
    """

    taxonomy: Taxonomy = field(default_factory=gastric)
    dim: int = 64
    patches_min: int = 8
    patches_max: int = 32
    slides_per_fine_class: Mapping[str, int | Sequence[int]] = field(
        default_factory=lambda: {"train": 10, "val": 10, "test": 10}
    )
    coarse_center_scale: float = 4.0
    fine_offset_scale: float = 1.0
    patch_noise_scale: float = 0.25
    background_patch_fraction: float = 0.0
    master_seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not 1 <= self.patches_min <= self.patches_max:
            raise ValueError("need 1 <= patches_min <= patches_max")
        for name in ("coarse_center_scale", "fine_offset_scale", "patch_noise_scale"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.background_patch_fraction < 1:
            raise ValueError("background_patch_fraction must be in [0, 1)")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        unknown = set(self.slides_per_fine_class) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown splits: {sorted(unknown)}")
        for split in SPLITS:
            self.counts(split)

    def counts(self, split: str) -> tuple[int, ...]:
        n_fine = self.taxonomy.n_fine
        raw = self.slides_per_fine_class.get(split, 0)
        if isinstance(raw, (int, np.integer)):
            counts = (int(raw),) * n_fine
        else:
            counts = tuple(int(c) for c in raw)
            if len(counts) != n_fine:
                raise ValueError(f"split {split}: expected {n_fine} per-class counts, got {len(counts)}")
        if any(c < 0 for c in counts):
            raise ValueError(f"split {split}: negative slide count")
        return counts

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "patches_min": self.patches_min,
            "patches_max": self.patches_max,
            "slides_per_fine_class": {
                k: (v if isinstance(v, int) else list(v)) for k, v in self.slides_per_fine_class.items()
            },
            "coarse_center_scale": self.coarse_center_scale,
            "fine_offset_scale": self.fine_offset_scale,
            "patch_noise_scale": self.patch_noise_scale,
            "background_patch_fraction": self.background_patch_fraction,
            "master_seed": self.master_seed,
        }


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def class_centers(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Coarse centers (N_c x D) and fine centers (N_f x D) for this dataset spec."""
    tax = spec.taxonomy
    coarse = spec.coarse_center_scale * _rng(spec.master_seed, 0).standard_normal((tax.n_coarse, spec.dim))
    offsets = spec.fine_offset_scale * _rng(spec.master_seed, 1).standard_normal((tax.n_fine, spec.dim))
    fine = coarse[list(tax.fine_to_coarse)] + offsets
    return coarse, fine


def make_bag(spec: DatasetSpec, fine_centers: np.ndarray, split: str, fine: int, ordinal: int) -> Bag:
    """One slide, seeded by (master_seed, split, fine class, ordinal) alone.

    Informative patches scatter around the fine-class center. Background
    patches come from a zero-mean cloud shared by every class, with the same
    spread as the coarse-center prior.
    """
    rng = _rng(spec.master_seed, 2, SPLITS.index(split), fine, ordinal)
    n_p = int(rng.integers(spec.patches_min, spec.patches_max + 1))
    n_bg = int(np.floor(spec.background_patch_fraction * n_p))
    n_bg = min(n_bg, n_p - 1)
    feats = fine_centers[fine] + spec.patch_noise_scale * rng.standard_normal((n_p, spec.dim))
    if n_bg:
        bg_rows = rng.permutation(n_p)[:n_bg]
        feats[bg_rows] = spec.coarse_center_scale * rng.standard_normal((n_bg, spec.dim))
    slide_id = f"{split}_{fine:03d}_{ordinal:05d}"
    return Bag(slide_id, feats.astype(np.float32), spec.taxonomy.group_of(fine), fine)


def iter_bags(spec: DatasetSpec):
    """Yield ``(split, bag)`` in manifest order without touching disk."""
    _, fine_centers = class_centers(spec)
    for split in SPLITS:
        for fine, count in enumerate(spec.counts(split)):
            for ordinal in range(count):
                yield split, make_bag(spec, fine_centers, split, fine, ordinal)


def generate_dataset(spec: DatasetSpec, out_dir) -> list[dict]:
    """Write every bag plus ``manifest.json`` and ``taxonomy.json``; return the manifest."""
    out = Path(out_dir)
    try:
        (out / "bags").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    manifest = []
    for split, bag in iter_bags(spec):
        rel = f"bags/{bag.slide_id}.hmil"
        write_bag(bag, out / rel)
        manifest.append(
            {
                "slide_id": bag.slide_id,
                "split": split,
                "coarse": bag.coarse_label,
                "fine": bag.fine_label,
                "relative_path": rel,
            }
        )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    spec.taxonomy.save(out / "taxonomy.json")
    return manifest


@dataclass
class Dataset:
    """A loaded dataset directory: taxonomy plus bags grouped by split."""

    root: Path
    taxonomy: Taxonomy
    manifest: list[dict]
    bags: dict[str, list[Bag]]

    def split(self, name: str) -> list[Bag]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return self.bags.get(name, [])

    @property
    def dim(self) -> int:
        for bags in self.bags.values():
            if bags:
                return bags[0].features.shape[1]
        raise ValueError("dataset is empty")


def load_dataset(root, taxonomy: Taxonomy | None = None) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if taxonomy is None:
        tax_path = root / "taxonomy.json"
        taxonomy = load_taxonomy(tax_path) if tax_path.exists() else gastric()
    bags: dict[str, list[Bag]] = {s: [] for s in SPLITS}
    for entry in manifest:
        bag = read_bag(root / entry["relative_path"], entry["slide_id"])
        if (bag.coarse_label, bag.fine_label) != (entry["coarse"], entry["fine"]):
            raise BagFormatError(f"bag {bag.slide_id}: labels disagree with manifest")
        bag.check_labels(taxonomy)
        bags[entry["split"]].append(bag)
    return Dataset(root, taxonomy, manifest, bags)


def dataset_digest(root) -> str:
    """SHA-256 over the manifest and every bag file, in manifest order."""
    root = Path(root)
    h = hashlib.sha256()
    manifest_bytes = (root / "manifest.json").read_bytes()
    h.update(manifest_bytes)
    for entry in json.loads(manifest_bytes):
        h.update((root / entry["relative_path"]).read_bytes())
    return h.hexdigest()
