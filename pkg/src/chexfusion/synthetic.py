"""Synthetic fixtures: pattern images, metadata-only tasks, on-disk manifests."""

from pathlib import Path

import numpy as np
from PIL import Image

from .data import COLUMNS, META_DIM, PATHOLOGIES, Dataset, decode_labels

N_CLASSES = len(PATHOLOGIES)


def _templates(size, n, rng):
    """One bright square per class at a distinct position."""
    out = np.zeros((n, 3, size, size), dtype=np.float32)
    side = size // 4
    for c in range(n):
        r, col = divmod(c, 4)
        out[c, c % 3, r * side : (r + 1) * side, col * side : (col + 1) * side] = 2.0
    return out


def pattern_dataset(n=32, active=(0, 1, 4), size=32, seed=0):
    """Images whose labels are a deterministic function of their content.

    Class ``c`` in ``active`` is positive exactly when its template square is
    painted into the image; the remaining classes are always negative.
    """
    rng = np.random.default_rng(seed)
    templates = _templates(size, len(active), rng)
    labels = np.zeros((n, N_CLASSES), dtype=np.float32)
    images = 0.3 * rng.standard_normal((n, 3, size, size)).astype(np.float32)
    for i in range(n):
        for j, c in enumerate(active):
            # alternate bits so every active class has both labels present
            if (i >> j) & 1:
                labels[i, c] = 1
                images[i] += templates[j]
    meta = rng.random((n, META_DIM)).astype(np.float32)
    return Dataset(images, meta, labels, [f"p{i}" for i in range(n)])


def metadata_rule(meta):
    """Target for :func:`metadata_dataset`: older patients, shifted up for men."""
    return (meta[:, 0] + 0.3 * meta[:, 1] > 0.65).astype(np.float32)


def random_metadata(n, rng):
    age = rng.integers(20, 91, n)
    male = rng.random(n) < 0.5
    pa = rng.random(n) < 0.5
    follow = rng.integers(0, 30, n)
    return np.stack(
        [age / 100.0, male, ~male, pa, ~pa, np.log1p(follow) / np.log(101)], axis=1
    ).astype(np.float32)


def metadata_dataset(n, target=1, size=32, seed=0):
    """Pure-noise images; class ``target`` depends only on the metadata."""
    rng = np.random.default_rng(seed)
    meta = random_metadata(n, rng)
    labels = np.zeros((n, N_CLASSES), dtype=np.float32)
    labels[:, target] = metadata_rule(meta)
    images = rng.standard_normal((n, 3, size, size)).astype(np.float32)
    return Dataset(images, meta, labels, [f"p{i}" for i in range(n)])


def manifest_text(rows):
    lines = [",".join(COLUMNS)]
    for r in rows:
        lines.append(",".join(str(v) for v in r))
    return "\n".join(lines) + "\n"


def random_manifest(n_records, n_patients, seed=0):
    """CSV text with several images per patient and random findings."""
    rng = np.random.default_rng(seed)
    owners = np.concatenate([np.arange(n_patients), rng.integers(0, n_patients, n_records - n_patients)])
    owners = np.sort(owners)
    rows, visits = [], {}
    for i, pid in enumerate(owners):
        k = visits.get(pid, 0)
        visits[pid] = k + 1
        bits = (rng.random(N_CLASSES) < 0.08).astype(np.float32)
        rows.append(
            (
                f"{pid + 1:08d}_{k:03d}.png",
                decode_labels(bits),
                k,
                pid + 1,
                int(rng.integers(1, 95)),
                "M" if rng.random() < 0.5 else "F",
                "PA" if rng.random() < 0.6 else "AP",
            )
        )
    return manifest_text(rows)


def write_image_fixture(directory, n=32, size=32, seed=0, n_patients=None):
    """Write PNGs plus ``manifest.csv`` whose labels follow the image content.

    Returns the manifest path. Images are 8-bit grayscale.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_patients = n_patients or n
    rows = []
    for i in range(n):
        bright = i % 2 == 1
        pixels = rng.integers(0, 100, (size, size))
        if bright:
            pixels[: size // 2, : size // 2] += 150
        name = f"{i:08d}_000.png"
        Image.fromarray(pixels.astype(np.uint8), mode="L").save(directory / name)
        labels = "Cardiomegaly|Effusion" if bright else "No Finding"
        rows.append((name, labels, i % 3, f"P{i % n_patients:04d}", 20 + (i * 7) % 70, "MF"[i % 2], ("PA", "AP")[i % 3 == 0]))
    path = directory / "manifest.csv"
    path.write_text(manifest_text(rows), encoding="utf-8")
    return path
