import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifgan.data import (
    NEUTRAL,
    FaceSample,
    FormatError,
    Similarity,
    align_face,
    augment,
    average_faces,
    canonical_keypoints,
    estimate_similarity,
    hist_equalize,
    load_corpus,
    make_folds,
    read_pgm,
    save_corpus,
    spurious_training_subset,
    synth_corpus,
    validate_manifest,
    write_pgm,
)
from ifgan.data.io import MANIFEST_SCHEMA
from ifgan.data.preprocess import warp
from ifgan.data.synth import affinity_class
from oracles import alignment_residuals, equalize_oracle

# -- synthetic corpus ----------------------------------------------------------------


def test_corpus_size_and_labels(corpus_samples):
    assert len(corpus_samples) == 20 * (1 + 6 * 4)
    neutral = [s for s in corpus_samples if s.is_neutral]
    assert len(neutral) == 20 and all(s.intensity_level == 0 and s.expression_label == NEUTRAL for s in neutral)
    assert {s.intensity_level for s in corpus_samples if not s.is_neutral} == {1, 2, 3, 4}


def test_corpus_is_seeded(corpus_samples):
    again = synth_corpus(20, 6, 4, 64, seed=0)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(corpus_samples, again))
    other = synth_corpus(2, 6, 4, 64, seed=1)
    assert not np.array_equal(other[0].image, corpus_samples[0].image)


def test_identity_fixes_geometry(corpus_samples):
    by_id = {}
    for s in corpus_samples:
        by_id.setdefault(s.identity_id, []).append(s.keypoints)
    for kps in by_id.values():
        assert all(np.array_equal(k, kps[0]) for k in kps)
    assert not np.array_equal(by_id[0][0], by_id[1][0])


def test_corpus_argument_errors():
    with pytest.raises(ValueError):
        synth_corpus(1)
    with pytest.raises(ValueError):
        synth_corpus(4, side=16)


def test_spurious_subset_keeps_affinity_class():
    samples = synth_corpus(6, 3, 2, 32, seed=0, affinity=True)
    train = [0, 1, 2, 3]
    kept = spurious_training_subset(samples, train, 3, keep_other=0.0)
    for s in kept:
        if s.identity_id in train and not s.is_neutral:
            assert s.expression_label == affinity_class(s.identity_id, 3)
    held = [s for s in samples if s.identity_id not in train]
    assert all(any(k is s for k in kept) for s in held)


# -- alignment -----------------------------------------------------------------------


def test_similarity_recovery(rng):
    for _ in range(20):
        true = Similarity.from_params(rng.uniform(0.5, 2), rng.uniform(-np.pi, np.pi), *rng.uniform(-20, 20, 2))
        src = rng.uniform(0, 64, size=(3, 2))
        est = estimate_similarity(src, true.apply(src))
        for a, b in zip((est.a, est.b, est.tx, est.ty), (true.a, true.b, true.tx, true.ty)):
            assert abs(a - b) <= 1e-6 * max(abs(b), 1.0)


def test_collinear_keypoints_rejected():
    with pytest.raises(ValueError, match="collinear"):
        estimate_similarity(np.array([[0, 0], [1, 1], [2, 2.0]]), canonical_keypoints(64))


def test_canonical_keypoints_give_identity_alignment(rng):
    img = rng.integers(0, 256, size=(64, 64)).astype(np.uint8)
    np.testing.assert_array_equal(align_face((img, canonical_keypoints(64)), 64), img)


def test_alignment_residual_under_half_pixel():
    assert alignment_residuals(25).max() <= 0.5


def test_rotated_face_aligns(corpus_samples):
    s = corpus_samples[3]
    side = s.image.shape[0]
    c = np.array([side / 2, side / 2])
    rot = Similarity.from_params(1.0, np.deg2rad(10), 0, 0)
    t = c - rot.apply(c[None])[0]
    pert = Similarity(rot.a, rot.b, *map(float, t))
    rotated = warp(s.image.astype(float), pert.inverse(), (side, side))
    kps = pert.apply(s.keypoints)
    fwd = estimate_similarity(kps, canonical_keypoints(64))
    assert np.abs(fwd.apply(kps) - canonical_keypoints(64)).max() <= 0.5
    a = align_face((np.clip(rotated, 0, 255).astype(np.uint8), kps), 64)
    b = align_face(s, 64)
    assert np.mean(np.abs(a.astype(float) - b)) < 12  # same face up to resampling and border fill


# -- histogram equalization ---------------------------------------------------------


def test_hist_equalize_matches_oracle_on_random_images():
    r = np.random.default_rng(7)
    for _ in range(50):
        h, w = r.integers(4, 40, size=2)
        lo, hi = sorted(r.integers(0, 256, size=2))
        img = r.integers(lo, hi + 1, size=(h, w)).astype(np.uint8)
        np.testing.assert_array_equal(hist_equalize(img), equalize_oracle(img))


def test_hist_equalize_two_valued_image():
    # the remap subtracts cdf_min, so the lower value lands at 0
    img = np.zeros((4, 4), np.uint8)
    img[:, 2:] = 255
    assert set(np.unique(hist_equalize(img))) == {0, 255}


def test_hist_equalize_constant_and_uniform():
    np.testing.assert_array_equal(hist_equalize(np.full((5, 5), 77, np.uint8)), 0)
    img = np.arange(256, dtype=np.uint8).reshape(16, 16)
    out = hist_equalize(img)
    assert np.all(np.diff(out.ravel().astype(int)) >= 0)
    assert np.abs(out.astype(int) - img).max() <= 1


def test_hist_equalize_requires_uint8():
    with pytest.raises(TypeError):
        hist_equalize(np.zeros((3, 3)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=4, max_size=64))
def test_hist_equalize_is_monotone(values):
    img = np.array(values, dtype=np.uint8)[None]
    out = hist_equalize(img)[0].astype(int)
    order = np.argsort(img[0], kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


# -- augmentation ---------------------------------------------------------------------


def test_augment_modes(rng):
    img = rng.integers(0, 256, size=(64, 64)).astype(np.uint8)
    a, b = augment(img, "test", 72, 64), augment(img, "test", 72, 64)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (64, 64) and a.min() >= -1 and a.max() <= 1
    t1, t2 = augment(img, "train", 72, 64, 5), augment(img, "train", 72, 64, 5)
    np.testing.assert_array_equal(t1, t2)
    assert not np.array_equal(t1, augment(img, "train", 72, 64, 6))
    with pytest.raises(ValueError):
        augment(img, "test", 60, 64)


# -- average faces --------------------------------------------------------------------


def face(identity, label, level, value):
    return FaceSample(np.full((4, 4), value, np.uint8), identity, label, level, np.zeros((3, 2)))


def test_average_faces_single_and_pair():
    samples = [face(0, NEUTRAL, 0, 10), face(0, 0, 4, 20), face(1, 0, 4, 40), face(0, 1, 4, 90)]
    imgs = [s.image for s in samples]
    av = average_faces(samples, imgs, 2, (4,))
    np.testing.assert_array_equal(av.neutral, 10.0)
    np.testing.assert_array_equal(av.expressive[0], 30.0)
    np.testing.assert_array_equal(av.expressive[1], 90.0)
    assert av.source_identities == {0, 1}


def test_average_faces_missing_class():
    samples = [face(0, NEUTRAL, 0, 1), face(0, 0, 4, 2)]
    with pytest.raises(ValueError, match="expression 1"):
        average_faces(samples, [s.image for s in samples], 2)


def test_fold_averages_differ(prepared):
    from ifgan.config import TrainConfig
    from ifgan.training import FoldData

    a = FoldData(prepared, TrainConfig(fold=0)).averages
    b = FoldData(prepared, TrainConfig(fold=5)).averages
    assert not np.array_equal(a.neutral, b.neutral)
    assert a.source_identities != b.source_identities


# -- folds ---------------------------------------------------------------------------


def test_default_fold_sizes():
    plan = make_folds(range(20), 10, seed=0)
    assert [len(f) for f in plan.folds] == [2] * 10
    assert make_folds(range(20), 10, seed=0) == plan


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 40), st.integers(3, 12), st.integers(0, 1000))
def test_folds_partition_identities(n_ids, n_folds, seed):
    if n_folds > n_ids:
        with pytest.raises(ValueError):
            make_folds(range(n_ids), n_folds, seed)
        return
    plan = make_folds(range(n_ids), n_folds, seed)
    flat = [i for f in plan.folds for i in f]
    assert sorted(flat) == list(range(n_ids))
    for r in range(n_folds):
        train, val, test = plan.run(r)
        assert not (set(train) & set(val)) and not (set(train) & set(test)) and not (set(val) & set(test))
        assert sorted(train + val + test) == list(range(n_ids))
        assert test == sorted(plan.folds[r]) and val == sorted(plan.folds[(r + 1) % n_folds])


def test_fold_arguments():
    with pytest.raises(ValueError):
        make_folds(range(10), 2)


# -- file formats ------------------------------------------------------------------------


def test_pgm_round_trip_and_comments(tmp_path, rng):
    img = rng.integers(0, 256, size=(5, 7)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
    raw = (tmp_path / "a.pgm").read_bytes().replace(b"P5\n", b"P5\n# a comment\n", 1)
    (tmp_path / "b.pgm").write_bytes(raw)
    np.testing.assert_array_equal(read_pgm(tmp_path / "b.pgm"), img)


def test_pgm_format_errors(tmp_path):
    (tmp_path / "p2.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "p2.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "short.pgm")
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "f.pgm", np.zeros((2, 2)))


def test_corpus_save_load_and_schema(tmp_path):
    samples = synth_corpus(2, 2, 1, 32, seed=3)
    path = save_corpus(samples, tmp_path, 2, 1, 32, seed=3)
    doc = json.loads(path.read_text())
    jsonschema.validate(doc, MANIFEST_SCHEMA)
    loaded, meta = load_corpus(path)
    assert meta["num_classes"] == 2 and len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_allclose(a.keypoints, b.keypoints)
        assert (a.identity_id, a.expression_label, a.intensity_level) == \
            (b.identity_id, b.expression_label, b.intensity_level)


def test_manifest_validation_errors(tmp_path):
    samples = synth_corpus(2, 2, 1, 32, seed=3)
    path = save_corpus(samples, tmp_path, 2, 1, 32)
    doc = json.loads(path.read_text())
    bad = json.loads(json.dumps(doc))
    del bad["samples"][0]["keypoints"]
    with pytest.raises(FormatError):
        validate_manifest(bad)
    bad = json.loads(json.dumps(doc))
    bad["samples"][1]["expression_label"] = 5
    with pytest.raises(FormatError):
        validate_manifest(bad)
    doc["samples"][0]["keypoints"][0] = [500.0, 3.0]
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="outside"):
        load_corpus(path)
