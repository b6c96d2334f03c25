import json

import numpy as np
import pytest

from ptma.dataio import (
    DataError, DatasetCatalog, FeatureSequence, Split, SynthSpec, load_catalog, make_protocol_split,
    read_feature_file, save_catalog, synth_generate, write_feature_file,
)


def seq(K=7, D=3, C=4, view=2, subject=5, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureSequence(rng.normal(size=(K, D)).astype(np.float32), rng.integers(0, C + 1, K),
                           view, subject, "vid", 30.0, C)


def test_feature_round_trip(tmp_path):
    s = seq()
    p = tmp_path / "a.feat"
    write_feature_file(s, p)
    r = read_feature_file(p, "vid")
    assert r.features.tobytes() == s.features.tobytes()
    assert np.array_equal(r.labels, s.labels)
    assert (r.view_id, r.subject_id, r.C, r.fps) == (2, 5, 4, 30.0)


def test_header_layout(tmp_path):
    p = tmp_path / "a.feat"
    write_feature_file(seq(K=2, D=3), p)
    raw = p.read_bytes()
    assert raw[:8] == b"PTMAFEAT"
    assert len(raw) == 36 + 2 * 3 * 4 + 2 * 2


def test_truncated_file_reports_sizes(tmp_path):
    p = tmp_path / "a.feat"
    write_feature_file(seq(), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(DataError, match="expected"):
        read_feature_file(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "a.feat"
    p.write_bytes(b"NOTAFEAT" + bytes(40))
    with pytest.raises(DataError):
        read_feature_file(p)


def test_empty_sequence_rejected(tmp_path):
    with pytest.raises(DataError):
        write_feature_file(FeatureSequence(np.zeros((0, 3)), np.zeros(0, dtype=int), C=2), tmp_path / "e.feat")


def test_label_out_of_range(tmp_path):
    p = tmp_path / "a.feat"
    s = seq(C=4)
    s.labels[0] = 9
    with pytest.raises(DataError):
        write_feature_file(s, p)


def test_catalog_round_trip(tmp_path):
    cat = synth_generate(SynthSpec(n_subjects=2, n_views=2, frames=30))
    save_catalog(cat, tmp_path)
    back = load_catalog(tmp_path)
    assert back.views == cat.views and back.subjects == cat.subjects and back.C == cat.C
    for a in cat.sequences:
        b = back.lookup(a.video_id, a.view_id)
        assert b.features.tobytes() == a.features.tobytes()


def test_synth_deterministic():
    a = synth_generate(SynthSpec(seed=3))
    b = synth_generate(SynthSpec(seed=3))
    c = synth_generate(SynthSpec(seed=4))
    assert all(x.features.tobytes() == y.features.tobytes() for x, y in zip(a.sequences, b.sequences))
    assert a.sequences[0].features.tobytes() != c.sequences[0].features.tobytes()


def test_synth_views_frame_synchronized():
    cat = synth_generate(SynthSpec())
    for s in cat.sequences:
        other = cat.lookup(s.video_id, 1)
        assert np.array_equal(s.labels, other.labels)
        assert s.C == 4 and s.labels.max() <= 4


def test_noise_free_views_are_linearly_related():
    cat, truth = synth_generate(SynthSpec(noise=0.0), return_truth=True)
    R1, R2 = truth.mixing[1], truth.mixing[2]
    M = R2 @ np.linalg.pinv(R1)
    for s in cat.select(views={1}):
        x2 = cat.lookup(s.video_id, 2).features.astype(np.float64)
        pred = s.features.astype(np.float64) @ M.T
        assert np.abs(pred - x2).max() <= 1e-4 * max(1.0, np.abs(x2).max())


def test_segment_length_distribution():
    _, truth = synth_generate(SynthSpec(n_subjects=40, frames=2000, seg_min=10, seg_max=30), return_truth=True)
    segs = np.array(truth.segments)
    # uniform on {10..30}: mean 20, sd sqrt((21^2-1)/12)
    assert abs(segs.mean() - 20.0) <= 0.05 * 20.0
    assert abs(segs.std() - np.sqrt((21 ** 2 - 1) / 12)) <= 0.05 * np.sqrt((21 ** 2 - 1) / 12)
    assert segs.min() >= 10 and segs.max() <= 30


@pytest.fixture(scope="module")
def cat():
    return synth_generate(SynthSpec(n_subjects=10, n_views=3, frames=40))


def test_cs_split_disjoint_subjects(cat):
    sp = make_protocol_split(cat, "cs", 1)
    tr = {s.subject_id for s in sp.train + sp.val}
    te = {s.subject_id for s in sp.test}
    assert tr and te and not tr & te
    assert {s.view_id for s in sp.train + sp.test} == {1}
    assert sp.val and not {s.subject_id for s in sp.val} & {s.subject_id for s in sp.train}


def test_cv_split_same_subjects(cat):
    sp = make_protocol_split(cat, "cv", 1, 2)
    assert {s.view_id for s in sp.train} == {1} and {s.view_id for s in sp.test} == {2}
    assert {s.subject_id for s in sp.test} == set(cat.subjects)


def test_csv_split(cat):
    sp = make_protocol_split(cat, "csv", 2, 3)
    assert not {s.subject_id for s in sp.train + sp.val} & {s.subject_id for s in sp.test}
    assert {s.view_id for s in sp.test} == {3}


def test_mcv_pairs_targets(cat):
    sp = make_protocol_split(cat, "m-cv", 1, 3, recon_view=2)
    assert len(sp.train_targets) == len(sp.train)
    for s, t in zip(sp.train, sp.train_targets):
        assert s.video_id == t.video_id and t.view_id == 2 and s.view_id == 1
    assert {s.view_id for s in sp.test} == {3}


def test_split_is_deterministic_and_serializable(cat):
    a = make_protocol_split(cat, "m-csv", 1, 3, recon_view=2, seed=7)
    b = make_protocol_split(cat, "m-csv", 1, 3, recon_view=2, seed=7)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    c = Split.from_json(json.loads(json.dumps(a.to_json())), cat)
    assert [s.key for s in c.test] == [s.key for s in a.test]


@pytest.mark.parametrize("args", [
    ("cv", 1, 1, None), ("cv", 1, None, None), ("m-cv", 1, 3, None), ("m-cv", 1, 3, 3), ("cs", 1, 2, None),
    ("cv", 1, 9, None),
])
def test_invalid_splits(cat, args):
    proto, tv, te, rv = args
    with pytest.raises(DataError):
        make_protocol_split(cat, proto, tv, te, recon_view=rv)


def test_multi_view_protocol_needs_three_views():
    two = synth_generate(SynthSpec(n_views=2, frames=20))
    with pytest.raises(DataError):
        make_protocol_split(two, "m-cv", 1, 2, recon_view=2)


def test_unknown_protocol(cat):
    with pytest.raises(ValueError):
        make_protocol_split(cat, "xx", 1)


def test_catalog_rejects_duplicates():
    s = seq()
    with pytest.raises(DataError):
        DatasetCatalog([s, s], 4)
