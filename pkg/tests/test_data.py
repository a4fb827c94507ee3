import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from chexfusion.data import (
    PATHOLOGIES,
    Dataset,
    ManifestRecord,
    build_dataset,
    decode_labels,
    encode_labels,
    encode_metadata,
    load_image,
    make_batches,
    parse_manifest,
    split_dataset,
)
from chexfusion.errors import ImageLoadError, SchemaError, SplitError, ValidationError
from chexfusion.synthetic import manifest_text, random_manifest

HEADER = "Image Index,Finding Labels,Follow-up #,Patient ID,Patient Age,Patient Gender,View Position\n"


def test_canonical_order():
    assert PATHOLOGIES[0] == "Atelectasis" and PATHOLOGIES[7] == "Hernia" and len(PATHOLOGIES) == 14


def test_encode_labels():
    bits = encode_labels("Effusion|Pleural_Thickening|Atelectasis")
    assert bits.dtype == np.float32
    assert list(np.flatnonzero(bits)) == [0, 4, 11]
    assert not encode_labels("No Finding").any()


def test_unknown_label():
    with pytest.raises(ValidationError):
        encode_labels("Effusion|Fracture")


@given(st.lists(st.booleans(), min_size=14, max_size=14))
def test_decode_then_encode_roundtrip(bits):
    arr = np.array(bits, dtype=np.float32)
    np.testing.assert_array_equal(encode_labels(decode_labels(arr)), arr)


def test_metadata_vector():
    rec = ManifestRecord("a.png", "No Finding", 3, "1", 58, "F", "AP")
    expect = [0.58, 0, 1, 0, 1, math.log(4) / math.log(101)]
    np.testing.assert_allclose(encode_metadata(rec), expect, rtol=1e-6)
    top = encode_metadata(ManifestRecord("a.png", "No Finding", 100, "1", 0, "M", "PA"))
    assert top[5] == pytest.approx(1.0)


def test_parse_manifest_basic():
    recs = parse_manifest(HEADER + "x.png,Hernia,0,17,058Y,m,pa\ny.png,No Finding,2,17,40,F,AP\n")
    assert [r.age_years for r in recs] == [58, 40]
    assert recs[0].gender == "M" and recs[0].view == "PA"


def test_parse_manifest_missing_column():
    with pytest.raises(SchemaError, match="View Position"):
        parse_manifest("Image Index,Finding Labels,Follow-up #,Patient ID,Patient Age,Patient Gender\n")


def test_parse_manifest_collects_row_errors():
    text = HEADER + "a.png,Hernia,0,1,40,M,PA\nb.png,Hernia,0,1,40,Q,PA\nc.png,Hernia,0,1,abc,M,PA\nd.png,Foo,0,1,4,M,PA\n"
    with pytest.raises(ValidationError) as info:
        parse_manifest(text)
    errors = info.value.errors
    assert [e.split(":")[0] for e in errors] == ["row 2", "row 3", "row 4"]


def _png(path, pixels, mode="L"):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode=mode).save(path)


def test_load_image_normalisation(tmp_path):
    _png(tmp_path / "g.png", [[0, 255], [51, 102]])
    img = load_image(tmp_path / "g.png", target_size=2)
    assert img.shape == (3, 2, 2) and img.dtype == np.float32
    for c, (mu, sd) in enumerate(zip((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))):
        np.testing.assert_allclose(img[c], (np.array([[0, 1], [0.2, 0.4]]) - mu) / sd, rtol=1e-6)


def test_load_image_resizes_constant_image(tmp_path):
    _png(tmp_path / "c.png", np.full((10, 13), 128))
    img = load_image(tmp_path / "c.png", target_size=32)
    assert img.shape == (3, 32, 32)
    np.testing.assert_allclose(img[0], (128 / 255 - 0.485) / 0.229, rtol=1e-6)


def test_load_image_errors(tmp_path):
    with pytest.raises(ImageLoadError):
        load_image(tmp_path / "missing.png")
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(ImageLoadError) as info:
        load_image(tmp_path / "bad.png")
    assert str(tmp_path / "bad.png") in str(info.value)


def test_build_dataset_keeps_order_with_workers(tmp_path):
    rows = []
    for i in range(6):
        _png(tmp_path / f"{i}.png", np.full((4, 4), 40 * i))
        rows.append((f"{i}.png", "No Finding", 0, i, 30, "M", "PA"))
    recs = parse_manifest(manifest_text(rows))
    a = build_dataset(recs, tmp_path, 4, workers=1)
    b = build_dataset(recs, tmp_path, 4, workers=3)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.all(np.diff(a.images[:, 0, 0, 0]) > 0)


# ---------------------------------------------------------------------------
# splits


def _records(n_records, n_patients, seed=0):
    return parse_manifest(random_manifest(n_records, n_patients, seed))


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 60), st.integers(0, 200), st.integers(0, 2**31))
def test_split_is_patient_disjoint_and_complete(n_patients, extra, seed):
    recs = _records(n_patients + extra, n_patients, seed % 1000)
    split = split_dataset(recs, seed=seed)
    parts = [split.train, split.val, split.test]
    assert all(parts)
    assert sorted(sum(parts, [])) == list(range(len(recs)))
    owners = [{recs[i].patient_id for i in part} for part in parts]
    assert not (owners[0] & owners[1] or owners[0] & owners[2] or owners[1] & owners[2])


def test_split_sizes_within_largest_patient_share():
    recs = _records(1000, 300)
    split = split_dataset(recs, seed=0)
    largest = max(np.unique([r.patient_id for r in recs], return_counts=True)[1])
    for part, ratio in zip((split.train, split.val, split.test), (0.7, 0.1, 0.2)):
        assert abs(len(part) - ratio * 1000) <= largest


def test_split_reproducible_and_seed_sensitive():
    recs = _records(200, 60)
    assert split_dataset(recs, seed=4) == split_dataset(recs, seed=4)
    assert split_dataset(recs, seed=4).train != split_dataset(recs, seed=5).train


def test_split_independent_of_record_order():
    recs = _records(200, 60)
    rev = recs[::-1]
    a, b = split_dataset(recs, seed=1), split_dataset(rev, seed=1)
    assert {recs[i].image_index for i in a.test} == {rev[i].image_index for i in b.test}


def test_split_errors():
    with pytest.raises(SplitError):
        split_dataset(_records(10, 2))
    with pytest.raises(SplitError):
        split_dataset(_records(10, 5), ratios=(0.5, 0.5, 0.1))


# ---------------------------------------------------------------------------
# batching


def _toy(n):
    images = np.arange(n, dtype=np.float32)[:, None, None, None] * np.ones((1, 3, 2, 2), np.float32)
    images[:, :, :, 1] += 0.5
    return Dataset(images, np.zeros((n, 6), np.float32), np.zeros((n, 14), np.float32))


def test_batches_cover_everything_and_keep_partial_batch():
    batches = list(make_batches(_toy(37), 16, seed=0))
    assert [len(b[0]) for b in batches] == [16, 16, 5]
    seen = np.concatenate([b[0][:, 0, 0, 0] for b in batches])
    assert sorted(seen) == list(range(37))


def test_batches_deterministic_per_epoch():
    a = [b[0] for b in make_batches(_toy(20), 8, seed=3, augment=True, epoch=2)]
    b = [b[0] for b in make_batches(_toy(20), 8, seed=3, augment=True, epoch=2)]
    c = [b[0] for b in make_batches(_toy(20), 8, seed=3, augment=True, epoch=3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_augment_flips_about_half_and_never_mutates_source():
    ds = _toy(400)
    original = ds.images.copy()
    imgs = np.concatenate([b[0] for b in make_batches(ds, 64, seed=0, augment=True)])
    flipped = imgs[:, 0, 0, 0] > imgs[:, 0, 0, 1]
    assert 150 < flipped.sum() < 250
    np.testing.assert_array_equal(ds.images, original)
