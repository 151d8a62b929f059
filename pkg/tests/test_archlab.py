import numpy as np
import pytest

from flimct.archlab import (
    ArchSession,
    EvalReport,
    accept_layer,
    evaluate_candidate,
    select_marker_set,
)
from flimct.errors import EmptyCandidates, SpecNotEvaluated
from flimct.flim import ConvLayerSpec, Marker, MarkerSet, PatchSpec
from flimct.volcore import Volume


DIMS = (16, 16, 16)


def toy_volume(rng, bright):
    """Dark field, optionally with a bright 5^3 block in the middle."""
    data = rng.normal(10.0, 1.0, size=(16, 16, 16, 1))
    if bright:
        data[6:11, 6:11, 6:11, 0] += 200.0
    return Volume(data)


def toy_corpus(n_per_class=6, seed=0):
    rng = np.random.default_rng(seed)
    volumes, labels, markers = {}, {}, {}
    for i in range(n_per_class):
        vid = f"neg_{i}"
        volumes[vid] = toy_volume(rng, bright=False)
        labels[vid] = -1
    for i in range(n_per_class):
        vid = f"pos_{i}"
        volumes[vid] = toy_volume(rng, bright=True)
        labels[vid] = 1
        markers[vid] = MarkerSet(volume_id=vid, markers=[
            Marker(label="abnormal", voxels=[(8, 8, 8), (7, 8, 8), (8, 7, 8)]),
            Marker(label="normal", voxels=[(2, 2, 2), (13, 2, 13), (2, 13, 2)]),
        ])
    return volumes, labels, markers


def small_spec(seed=0):
    return ConvLayerSpec(n_kernels=2, patch=PatchSpec((3, 3, 3), 1),
                         pool_stride=4, kmeans_k=2, seed=seed)


def make_session(tmp_path=None):
    path = str(tmp_path / "session.json") if tmp_path else None
    return ArchSession(marker_ids=["pos_0", "pos_1"],
                       validation_ids=["pos_2", "pos_3", "neg_0", "neg_1"],
                       checkpoint_path=path)


def test_disjointness_enforced():
    with pytest.raises(ValueError):
        ArchSession(marker_ids=["a"], validation_ids=["a", "b"])


def test_evaluate_candidate_separates_toy_classes():
    volumes, labels, markers = toy_corpus()
    session = make_session()
    train_ids = ["pos_4", "pos_5", "neg_2", "neg_3", "neg_4", "neg_5"]
    report = evaluate_candidate(session, small_spec(), volumes, labels,
                                markers, train_ids)
    assert report.accuracy == 1.0
    assert report.kappa == 1.0
    assert len(session.history) == 1


def test_history_appends_per_evaluation():
    volumes, labels, markers = toy_corpus()
    session = make_session()
    train_ids = ["pos_4", "pos_5", "neg_2", "neg_3"]
    evaluate_candidate(session, small_spec(seed=0), volumes, labels,
                       markers, train_ids)
    evaluate_candidate(session, small_spec(seed=1), volumes, labels,
                       markers, train_ids)
    assert len(session.history) == 2
    assert session.history[0][0].seed == 0
    assert session.history[1][0].seed == 1
    assert session.accepted_layers == []


def test_accept_requires_prior_evaluation():
    volumes, labels, markers = toy_corpus()
    session = make_session()
    with pytest.raises(SpecNotEvaluated):
        accept_layer(session, small_spec(), volumes, markers)


def test_accept_grows_model_and_checkpoints(tmp_path):
    volumes, labels, markers = toy_corpus()
    session = make_session(tmp_path)
    train_ids = ["pos_4", "pos_5", "neg_2", "neg_3"]
    spec = small_spec()
    evaluate_candidate(session, spec, volumes, labels, markers, train_ids)
    accept_layer(session, spec, volumes, markers)
    assert len(session.accepted_layers) == 1
    assert session.model() is not None

    loaded = ArchSession.load(str(tmp_path / "session.json"))
    assert loaded.marker_ids == session.marker_ids
    assert len(loaded.accepted_layers) == 1
    assert len(loaded.history) == 1
    np.testing.assert_array_equal(loaded.accepted_layers[0].kernels,
                                  session.accepted_layers[0].kernels)


def test_replay_deterministic():
    volumes, labels, markers = toy_corpus()
    train_ids = ["pos_4", "pos_5", "neg_2", "neg_3"]
    reports = []
    for _ in range(2):
        session = make_session()
        r = evaluate_candidate(session, small_spec(), volumes, labels,
                               markers, train_ids)
        reports.append(r)
    assert reports[0].to_dict() == reports[1].to_dict()


def rep(acc, kappa):
    return EvalReport(accuracy=acc, kappa=kappa, confusion=[[0, 0], [0, 0]])


def test_select_marker_set_highest_mean():
    cands = [("a", [rep(0.8, 0.6)]),
             ("b", [rep(0.9, 0.8), rep(1.0, 1.0)]),
             ("c", [rep(0.7, 0.7)])]
    assert select_marker_set(cands) == 1


def test_select_marker_set_tie_goes_low():
    cands = [("a", [rep(0.9, 0.9)]), ("b", [rep(0.9, 0.9)])]
    assert select_marker_set(cands) == 0


def test_select_marker_set_empty():
    with pytest.raises(EmptyCandidates):
        select_marker_set([])
    with pytest.raises(EmptyCandidates):
        select_marker_set([("a", [])])
