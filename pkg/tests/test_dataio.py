import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from wsseg import dataio
from wsseg.dataio import FormatError, IngestionError
from wsseg.labels import AnnotatedSubset
from wsseg.synthdata import GenSpec, DatasetSpec, generate
from wsseg.train import TrainConfig, train


def test_2x2_float32_file_is_30_bytes(tmp_path):
    p = tmp_path / "z.sgt"
    dataio.write_tensor(p, np.zeros((2, 2), np.float32))
    raw = p.read_bytes()
    assert len(raw) == 4 + 1 + 1 + 8 + 16
    assert raw[:4] == b"SGT1" and raw[4] == 0 and raw[5] == 2
    assert struct.unpack("<II", raw[6:14]) == (2, 2)


def test_scalar_has_one_value_payload():
    buf = dataio.encode_tensor(np.int32(7))
    assert len(buf) == 6 + 4
    arr, end = dataio.decode_tensor(buf)
    assert arr.shape == () and arr == 7 and end == len(buf)


dtypes = st.sampled_from([np.float32, np.int32, np.uint8])


@settings(max_examples=60, deadline=None)
@given(dtypes.flatmap(lambda dt: hnp.arrays(
    dt, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4))))
def test_round_trip_is_bit_exact(a):
    b, _ = dataio.decode_tensor(dataio.encode_tensor(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_bad_magic_reports_offset():
    buf = bytearray(dataio.encode_tensor(np.zeros(3, np.float32)))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError, match="at byte 0"):
        dataio.decode_tensor(bytes(buf))


def test_truncated_payload():
    buf = dataio.encode_tensor(np.zeros((4, 4), np.int32))
    with pytest.raises(FormatError, match="truncated payload"):
        dataio.decode_tensor(buf[:-1])


def test_dims_overflow():
    buf = b"SGT1" + struct.pack("<BB", 0, 3) + struct.pack("<III", 2 ** 16, 2 ** 16, 2 ** 8)
    with pytest.raises(FormatError, match="overflow"):
        dataio.decode_tensor(buf)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "t.sgt"
    p.write_bytes(dataio.encode_tensor(np.zeros(2, np.uint8)) + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        dataio.read_tensor(p)


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        dataio.encode_tensor(np.zeros(2, np.float64))


def test_annotation_text_round_trip():
    ann = (AnnotatedSubset((1, 3), 0, 2), AnnotatedSubset((), 0, 5))
    text = dataio.format_annotation(ann)
    assert text == "0:2=1,3;0:5=-"
    assert dataio.parse_annotation("sparse", text) == ann
    assert dataio.parse_annotation("partial", "2,4") == AnnotatedSubset((2, 4))
    with pytest.raises(IngestionError):
        dataio.parse_annotation("dense", "1")


def _small_spec():
    return GenSpec(image_shape=(16, 16), n_structures=2, radius_range=(2, 3), datasets=[
        DatasetSpec("aa", "ct", (1,), n_images=2, n_test=1),
        DatasetSpec("bb", "mr", (2,), n_images=2, n_test=1, labeling="sparse",
                    sparse_fraction=0.5, sparse_axis=1),
    ])


def test_corpus_round_trip(tmp_path):
    corpus, _ = generate(_small_spec())
    paths = dataio.write_corpus(tmp_path, corpus)
    classes, train_imgs = dataio.load_corpus(paths["train"])
    _, test_imgs = dataio.load_corpus(paths["test"])
    assert classes.n_structures == 2
    loaded = train_imgs + test_imgs
    ordered = [g for g in corpus if g.split == "train"] + [g for g in corpus if g.split == "test"]
    for got, want in zip(loaded, ordered):
        assert got.volume.image_id == want.volume.image_id
        assert got.volume.annotation == want.volume.annotation
        np.testing.assert_array_equal(got.volume.labels, want.volume.labels)
        np.testing.assert_array_equal(got.volume.intensities, want.volume.intensities)
        np.testing.assert_array_equal(got.full_labels, want.full_labels)


def _rewrite(manifest, old, new):
    manifest.write_text(manifest.read_text().replace(old, new, 1))


def test_load_rejects_out_of_range_labels(tmp_path):
    corpus, _ = generate(_small_spec())
    paths = dataio.write_corpus(tmp_path, corpus)
    v = corpus[0].volume
    lab = v.labels.copy()
    lab[:2, :3] = 9
    dataio.write_tensor(tmp_path / f"tensors/{v.image_id}.lab.sgt", lab)
    with pytest.raises(IngestionError, match=rf"{v.image_id}.*6 voxels"):
        dataio.load_corpus(paths["train"])


def test_load_rejects_labels_outside_subset(tmp_path):
    corpus, _ = generate(_small_spec())
    paths = dataio.write_corpus(tmp_path, corpus)
    _rewrite(paths["train"], "\tpartial\t1\t", "\tpartial\t-\t")
    with pytest.raises(IngestionError, match="aa_ct_train_0000"):
        dataio.load_corpus(paths["train"])


def test_load_rejects_missing_file_and_bad_prefix(tmp_path):
    corpus, _ = generate(_small_spec())
    paths = dataio.write_corpus(tmp_path, corpus)
    (tmp_path / "tensors/aa_ct_train_0001.img.sgt").unlink()
    with pytest.raises(IngestionError, match="missing file"):
        dataio.load_corpus(paths["train"])
    _rewrite(paths["test"], "aa_ct_test_0000\t", "zz_ct_test_0000\t")
    with pytest.raises(IngestionError, match="prefix"):
        dataio.load_corpus(paths["test"])


def test_checkpoint_round_trip_and_magic(tmp_path):
    params = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(1, np.float32)}
    p = tmp_path / "c.sgck"
    dataio.write_checkpoint(p, params, {"iteration": 3, "config_hash": "abc"})
    got, meta = dataio.read_checkpoint(p)
    assert meta == {"iteration": 3, "config_hash": "abc"}
    for k in params:
        assert got[k].tobytes() == params[k].tobytes()
    with pytest.raises(FormatError):
        dataio.decode_checkpoint(b"NOPE" + p.read_bytes()[4:])


def test_same_seed_training_gives_identical_checkpoints(tmp_path):
    corpus, _ = generate(_small_spec())
    vols = [g.volume for g in corpus if g.split == "train"]
    blobs = []
    for name in ("a", "b"):
        cfg = TrainConfig(iterations=5, batch_size=2, patch_shape=(8, 8), hidden=4,
                          eval_every=5, checkpoint=str(tmp_path / f"{name}.sgck"))
        train(vols, cfg)
        blobs.append((tmp_path / f"{name}.sgck").read_bytes())
    assert blobs[0] == blobs[1]
