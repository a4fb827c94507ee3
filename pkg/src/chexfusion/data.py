"""Manifest parsing, label/metadata/image encoding, patient-level splits, batching."""

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageLoadError, SchemaError, SplitError, ValidationError

PATHOLOGIES = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Emphysema",
    "Fibrosis",
    "Hernia",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pleural Thickening",
    "Pneumonia",
    "Pneumothorax",
)
NO_FINDING = "No Finding"
_INDEX = {name: i for i, name in enumerate(PATHOLOGIES)}
_ALIASES = {"Pleural_Thickening": "Pleural Thickening"}

COLUMNS = (
    "Image Index",
    "Finding Labels",
    "Follow-up #",
    "Patient ID",
    "Patient Age",
    "Patient Gender",
    "View Position",
)
GENDERS = ("M", "F")
VIEWS = ("PA", "AP")
META_DIM = 6

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ManifestRecord:
    image_index: str
    finding_labels: str
    follow_up: int
    patient_id: str
    age_years: int
    gender: str
    view: str


# ---------------------------------------------------------------------------
# labels and metadata


def _canonical(token):
    token = token.strip()
    return _ALIASES.get(token, token)


def encode_labels(finding_labels):
    """Multi-hot float32 vector in canonical pathology order."""
    bits = np.zeros(len(PATHOLOGIES), dtype=np.float32)
    tokens = [_canonical(t) for t in finding_labels.split("|")]
    if tokens == [NO_FINDING]:
        return bits
    for tok in tokens:
        if tok not in _INDEX:
            raise ValidationError(f"unknown finding label {tok!r}")
        bits[_INDEX[tok]] = 1
    return bits


def decode_labels(bits):
    names = [PATHOLOGIES[i] for i in np.flatnonzero(np.asarray(bits) > 0.5)]
    return "|".join(names) if names else NO_FINDING


def encode_metadata(record):
    """[age/100, is_M, is_F, is_PA, is_AP, log(1+follow_up)/log(101)]."""
    return np.array(
        [
            record.age_years / 100.0,
            record.gender == "M",
            record.gender == "F",
            record.view == "PA",
            record.view == "AP",
            math.log1p(record.follow_up) / math.log(101),
        ],
        dtype=np.float32,
    )


# ---------------------------------------------------------------------------
# manifest


def _parse_age(text):
    text = text.strip()
    if text.upper().endswith("Y"):  # older releases wrote "058Y"
        text = text[:-1]
    age = int(text)
    if not 0 <= age <= 120:
        raise ValueError(f"age {age} outside [0, 120]")
    return age


def _parse_row(row, col):
    labels = row[col["Finding Labels"]].strip()
    encode_labels(labels)
    follow_up = int(row[col["Follow-up #"]].strip())
    if follow_up < 0:
        raise ValueError(f"negative follow-up {follow_up}")
    try:
        age = _parse_age(row[col["Patient Age"]])
    except ValueError as exc:
        raise ValueError(f"bad Patient Age {row[col['Patient Age']]!r} ({exc})") from None
    gender = row[col["Patient Gender"]].strip().upper()
    if gender not in GENDERS:
        raise ValueError(f"unknown Patient Gender {gender!r}")
    view = row[col["View Position"]].strip().upper()
    if view not in VIEWS:
        raise ValueError(f"unknown View Position {view!r}")
    return ManifestRecord(
        row[col["Image Index"]].strip(), labels, follow_up, row[col["Patient ID"]].strip(), age, gender, view
    )


def parse_manifest(csv_text):
    """Parse ChestX-ray14-style CSV text into records, preserving row order.

    All row-level problems are collected and raised together in one
    :class:`ValidationError` whose ``errors`` attribute lists them.
    """
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("manifest is empty; expected a header row") from None
    col = {}
    for name in COLUMNS:
        if name not in header:
            raise SchemaError(f"manifest is missing column {name!r}")
        col[name] = header.index(name)
    records, errors = [], []
    for rownum, row in enumerate(reader, start=1):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) < len(header):
            errors.append(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
            continue
        try:
            records.append(_parse_row(row, col))
        except (ValueError, ValidationError) as exc:
            errors.append(f"row {rownum}: {exc}")
    if errors:
        err = ValidationError("; ".join(errors))
        err.errors = errors
        raise err
    return records


def read_manifest(path):
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# images


def load_image(path, target_size=224):
    """Decode, replicate to RGB, bilinear-resize, scale to [0,1], ImageNet-normalise.

    Returns float32 of shape (3, target_size, target_size).
    """
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (target_size, target_size):
                img = img.resize((target_size, target_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise ImageLoadError(path, "no such file") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(path, f"cannot decode image ({exc})") from None
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32)


def hflip(image):
    return image[..., ::-1].copy()


# ---------------------------------------------------------------------------
# datasets and splits


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int

    def __getitem__(self, name):
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)


def split_dataset(records, ratios=(0.7, 0.1, 0.2), seed=0):
    """Patient-disjoint train/val/test split of record indices.

    Patients are shuffled with a seeded generator and laid end to end by
    record count; a patient lands in the split whose cumulative quota its
    first record falls into. Every split receives at least one patient.
    """
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1) > 1e-9:
        raise SplitError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    by_patient = {}
    for i, rec in enumerate(records):
        by_patient.setdefault(rec.patient_id, []).append(i)
    patients = sorted(by_patient)
    if len(patients) < 3:
        raise SplitError(f"need at least 3 distinct patients, got {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    total = len(records)
    train_end = ratios[0] * total
    val_end = (ratios[0] + ratios[1]) * total
    parts = {"train": [], "val": [], "test": []}
    start = 0
    for pos, k in enumerate(order):
        idx = by_patient[patients[k]]
        left_after = len(order) - pos - 1
        if start < train_end and left_after >= 2 and not parts["val"]:
            dest = "train"
        elif (start < val_end or not parts["val"]) and left_after >= 1 and not parts["test"]:
            dest = "val"
        else:
            dest = "test"
        parts[dest].extend(idx)
        start += len(idx)
    return DatasetSplit(sorted(parts["train"]), sorted(parts["val"]), sorted(parts["test"]), seed)


@dataclass
class Dataset:
    """Stacked samples: images (N,3,S,S), meta (N,6), labels (N,14)."""

    images: np.ndarray
    meta: np.ndarray
    labels: np.ndarray
    patient_ids: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        if len(self.meta) != n or len(self.labels) != n:
            raise ValueError("images, meta and labels must have the same length")

    def __len__(self):
        return len(self.images)

    def subset(self, indices):
        indices = list(indices)
        pids = [self.patient_ids[i] for i in indices] if self.patient_ids else []
        return Dataset(self.images[indices], self.meta[indices], self.labels[indices], pids)


def build_dataset(records, images_dir, image_size=224, workers=1):
    """Load and encode every record. Output order always follows ``records``."""
    paths = [Path(images_dir) / r.image_index for r in records]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(lambda p: load_image(p, image_size), paths))
    else:
        images = [load_image(p, image_size) for p in paths]
    return Dataset(
        np.stack(images) if images else np.zeros((0, 3, image_size, image_size), np.float32),
        np.stack([encode_metadata(r) for r in records]) if records else np.zeros((0, META_DIM), np.float32),
        np.stack([encode_labels(r.finding_labels) for r in records])
        if records
        else np.zeros((0, len(PATHOLOGIES)), np.float32),
        [r.patient_id for r in records],
    )


def make_batches(dataset, batch_size, seed, augment=False, epoch=0):
    """Yield ``(images, meta, labels)`` batches in a seeded shuffled order.

    The permutation (and flips, with ``augment``) depend only on
    ``(seed, epoch)``, so a resumed run sees the same stream. The last
    partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        return
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        images = dataset.images[idx]
        if augment:
            flip = rng.random(len(idx)) < 0.5
            images[flip] = images[flip][..., ::-1]
        yield images, dataset.meta[idx], dataset.labels[idx]
