"""Domains, samples, manifests, and split logic for leave-one-out tasks.

On-disk layout, one directory per domain::

    root/<domain>/meta          # flat key-value text (name, samples, type, ...)
    root/<domain>/images/*.png  # RGB
    root/<domain>/masks/*.png   # 8-bit single channel, {0, 255}

Image and mask files pair by stem. An optional variant tag is read from a
``<tag>__<id>.png`` stem prefix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataIntegrityError

SOURCE_TYPES = ("synthetic", "real")
CATEGORIES = ("low", "medium", "tall", "any")


@dataclass(frozen=True)
class DomainDescriptor:
    name: str
    sample_count: int
    source_type: str = "synthetic"
    category: str = "any"
    height_m: float | None = None

    def validate(self):
        if self.sample_count < 0:
            raise ValueError(f"{self.name}: sample_count must be >= 0")
        if self.source_type not in SOURCE_TYPES:
            raise ValueError(f"{self.name}: source_type must be one of {SOURCE_TYPES}")
        if self.category not in CATEGORIES:
            raise ValueError(f"{self.name}: category must be one of {CATEGORIES}")
        return self


# The AgriSeg domain catalogue; useful to validate a real dataset checkout.
AGRISEG_DOMAINS = (
    DomainDescriptor("Lettuce", 4800, "synthetic", "low", 0.22),
    DomainDescriptor("Chard", 4800, "synthetic", "low", 0.25),
    DomainDescriptor("Lavender", 4800, "synthetic", "low", 0.3),
    DomainDescriptor("Zucchini", 19200, "synthetic", "medium", 0.6),
    DomainDescriptor("Vineyard", 4800, "synthetic", "tall", 2.5),
    DomainDescriptor("PergolaVineyard", 4800, "synthetic", "tall", 3.2),
    DomainDescriptor("PearTree", 4800, "synthetic", "tall", 2.7),
    DomainDescriptor("GenericTree1", 4800, "synthetic", "tall", 4.5),
    DomainDescriptor("GenericTree2", 2785, "synthetic", "tall", 4.5),
    DomainDescriptor("RealVineyard", 500, "real", "tall", 2.5),
    DomainDescriptor("Miscellaneous", 100, "real", "any", None),
)


@dataclass
class Sample:
    """One image/mask pair; image is (H,W,3) float32 in [0,1] right after
    decode, mask is (H,W) uint8 in {0,1}."""

    image: np.ndarray
    mask: np.ndarray
    domain: str

    def validate(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataIntegrityError(f"image must be (H,W,3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DataIntegrityError(
                f"mask shape {self.mask.shape} != image spatial {self.image.shape[:2]}")
        bad = np.setdiff1d(np.unique(self.mask), [0, 1])
        if bad.size:
            raise DataIntegrityError(f"mask must be binary, found values {bad[:4]}")
        return self


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    values = np.unique(arr)
    if not np.isin(values, (0, 255)).all():
        raise DataIntegrityError(f"{path}: mask values must be in {{0, 255}}, found {values[:6]}")
    return (arr == 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path)


@dataclass(frozen=True)
class SampleRef:
    image_path: str
    mask_path: str
    tag: str | None = None


class DomainDataset:
    """A named domain's samples; immutable after construction."""

    def __init__(self, descriptor: DomainDescriptor, items: list[SampleRef]):
        self.descriptor = descriptor
        self.items = tuple(items)

    @property
    def name(self) -> str:
        return self.descriptor.name

    def __len__(self) -> int:
        return len(self.items)

    def load(self, index: int) -> Sample:
        ref = self.items[index]
        sample = Sample(load_image(ref.image_path), load_mask(ref.mask_path), self.name)
        return sample.validate()

    def subset(self, indices) -> "DomainDataset":
        picked = [self.items[i] for i in indices]
        desc = replace(self.descriptor, sample_count=len(picked))
        return DomainDataset(desc, picked)

    def __eq__(self, other):
        return (isinstance(other, DomainDataset)
                and self.descriptor == other.descriptor and self.items == other.items)


@dataclass
class DatasetManifest:
    root: str
    domains: list[DomainDescriptor]
    index: dict[str, tuple[SampleRef, ...]] = field(default_factory=dict)

    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    def descriptor(self, name: str) -> DomainDescriptor:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(f"unknown domain {name!r}; available: {self.domain_names()}")

    def dataset(self, name: str) -> DomainDataset:
        return DomainDataset(self.descriptor(name), list(self.index[name]))

    def to_json(self) -> str:
        """Single structured-text provenance document for the manifest."""
        doc = {
            "root": str(self.root),
            "domains": [
                {
                    "name": d.name,
                    "samples": d.sample_count,
                    "type": d.source_type,
                    "category": d.category,
                    "height_m": d.height_m,
                    "files": [
                        {"image": r.image_path, "mask": r.mask_path, "tag": r.tag}
                        for r in self.index[d.name]
                    ],
                }
                for d in self.domains
            ],
        }
        return json.dumps(doc, indent=2)


def parse_meta(path) -> dict:
    data = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise DataIntegrityError(f"{path}: malformed meta line {line!r}")
        key, value = line.split(":", 1)
        data[key.strip()] = value.strip()
    return data


def write_meta(path, desc: DomainDescriptor) -> None:
    height = "any" if desc.height_m is None else repr(float(desc.height_m))
    Path(path).write_text(
        f"name: {desc.name}\nsamples: {desc.sample_count}\n"
        f"type: {desc.source_type}\ncategory: {desc.category}\nheight_m: {height}\n")


def _descriptor_from_meta(domain_dir: Path) -> DomainDescriptor:
    meta_path = domain_dir / "meta"
    if not meta_path.is_file():
        raise DataIntegrityError(f"{domain_dir}: missing meta file")
    meta = parse_meta(meta_path)
    missing = {"name", "samples", "type", "category", "height_m"} - set(meta)
    if missing:
        raise DataIntegrityError(f"{meta_path}: missing keys {sorted(missing)}")
    if meta["name"] != domain_dir.name:
        raise DataIntegrityError(
            f"{meta_path}: name {meta['name']!r} does not match directory {domain_dir.name!r}")
    height = meta["height_m"].lower()
    desc = DomainDescriptor(
        name=meta["name"],
        sample_count=int(meta["samples"]),
        source_type=meta["type"],
        category=meta["category"],
        height_m=None if height in ("any", "none", "") else float(meta["height_m"]),
    )
    try:
        return desc.validate()
    except ValueError as exc:
        raise DataIntegrityError(f"{meta_path}: {exc}") from None


def _tag_from_stem(stem: str) -> str | None:
    return stem.split("__", 1)[0] if "__" in stem else None


def load_manifest(root) -> DatasetManifest:
    """Build and validate a manifest from the on-disk layout.

    Domain order is the lexicographic order of directory names. Loading is
    read-only and idempotent. Pairing or metadata violations raise
    DataIntegrityError naming the offending file.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataIntegrityError(f"dataset root {root} is not a directory")
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not domain_dirs:
        raise DataIntegrityError(f"dataset root {root} contains no domain directories")

    domains: list[DomainDescriptor] = []
    index: dict[str, tuple[SampleRef, ...]] = {}
    for domain_dir in domain_dirs:
        desc = _descriptor_from_meta(domain_dir)
        images = {p.stem: p for p in sorted((domain_dir / "images").glob("*.png"))}
        masks = {p.stem: p for p in sorted((domain_dir / "masks").glob("*.png"))}
        for stem in sorted(set(images) | set(masks)):
            if stem not in masks:
                raise DataIntegrityError(f"{images[stem]}: image has no mask counterpart")
            if stem not in images:
                raise DataIntegrityError(f"{masks[stem]}: mask has no image counterpart")
        refs = tuple(
            SampleRef(str(images[stem]), str(masks[stem]), _tag_from_stem(stem))
            for stem in sorted(images)
        )
        if len(refs) != desc.sample_count:
            raise DataIntegrityError(
                f"{domain_dir}: meta declares {desc.sample_count} samples, found {len(refs)}")
        if not refs:
            raise DataIntegrityError(f"{domain_dir}: domain has no samples")
        domains.append(desc)
        index[desc.name] = refs
    return DatasetManifest(root=str(root), domains=domains, index=index)


def split_train_val(dataset: DomainDataset, val_fraction: float, seed: int):
    """Deterministic disjoint (train, val) split; val size = round(f * n)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0,1), got {val_fraction}")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    k = int(round(val_fraction * n))
    if k == 0 or k == n:
        raise ValueError(
            f"val_fraction={val_fraction} with n={n} produces an empty partition")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:k])
    train_idx = np.sort(perm[k:])
    return dataset.subset(train_idx.tolist()), dataset.subset(val_idx.tolist())


@dataclass
class DGTask:
    """K source domains plus one held-out target domain."""

    sources: list[DomainDataset]
    target: DomainDataset
    val_fraction: float = 0.1

    def __post_init__(self):
        if not self.sources:
            raise ValueError("DGTask requires at least one source domain")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.target.name in [s.name for s in self.sources]:
            raise ValueError(f"target domain {self.target.name!r} appears in sources")


def leave_one_out_tasks(manifest: DatasetManifest, domain_names,
                        val_fraction: float = 0.1) -> list[DGTask]:
    """One task per listed domain: it becomes the target, the rest the sources."""
    names = list(domain_names)
    if len(names) < 2:
        raise ValueError("leave-one-out needs at least 2 domains")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate domain names in {names}")
    datasets = {name: manifest.dataset(name) for name in names}  # KeyError on unknown
    return [
        DGTask(sources=[datasets[other] for other in names if other != name],
               target=datasets[name], val_fraction=val_fraction)
        for name in names
    ]
