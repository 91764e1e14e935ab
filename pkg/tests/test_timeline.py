import json

import numpy as np
import pytest

from cores import (
    InsufficientDataError,
    InvalidParameterError,
    Method,
    RunExistsError,
    TimelineMode,
    TrainConfig,
    UpgradeTimeline,
    build_compatibility_matrix,
    build_eval_protocol,
    build_timeline,
    centroid_drift,
    derive_seed,
    dsimplex_prototypes,
    extract_gallery,
    gen_blobs,
    init_model,
    read_gallery,
    read_manifest,
    run_timeline,
    sha256_file,
    train_ift,
    train_itm,
    train_l2_baseline,
)
from cores.metrics import METRIC_VERIFICATION
from cores.timeline import LabeledSet


def tiny_world(train_classes=4, eval_classes=3, per=12, seed=0):
    total = train_classes + eval_classes
    data = gen_blobs(total, per, 5, 0.3, seed)
    ids = data.class_ids
    train = data.take(np.flatnonzero(np.isin(data.labels, ids[:train_classes])))
    evaluation = data.take(np.flatnonzero(np.isin(data.labels, ids[train_classes:])))
    return train, evaluation


def quick_config(epochs=5):
    return TrainConfig(epochs=epochs, batch_size=64)


def quick_run(tmp_path, method=Method.CORES, seed=0, model_selection=False,
              fractions=(0.5, 1.0), mode=TimelineMode.BY_CLASS,
              subdir="run", train=None, evaluation=None):
    if train is None:
        train, evaluation = tiny_world()
    timeline = build_timeline(train, fractions=fractions, mode=mode,
                              method=method, seed=1, config=quick_config())
    protocol = build_eval_protocol(evaluation, seed=seed, n_pos=60, n_neg=60)
    fc = dsimplex_prototypes(train.num_classes)
    out = tmp_path / subdir
    result = run_timeline(timeline, fc, protocol, out_dir=out, seed=seed,
                          hidden_dims=(8,), model_selection=model_selection)
    return out, result, protocol


def test_protocol_query_gallery_split_is_disjoint_and_stratified():
    _, evaluation = tiny_world()
    protocol = build_eval_protocol(evaluation, seed=3, n_pos=50, n_neg=50)
    q_rows = set(protocol.query_set.source_rows.tolist())
    g_rows = set(protocol.gallery_set.source_rows.tolist())
    assert not q_rows & g_rows
    assert len(q_rows) + len(g_rows) == evaluation.num_samples
    assert protocol.query_set.num_classes == evaluation.num_classes
    assert protocol.gallery_set.num_classes == evaluation.num_classes
    assert protocol.pairs.num_positive == 50
    # protocol without pair counts defers sampling
    bare = build_eval_protocol(evaluation, seed=3)
    assert bare.pairs is None
    with pytest.raises(InvalidParameterError):
        build_eval_protocol(evaluation, seed=3, n_pos=10)


def test_protocol_rejects_single_class():
    data = gen_blobs(2, 6, 3, 0.2, 0)
    single = data.take(np.flatnonzero(data.labels == 0))
    with pytest.raises(InsufficientDataError):
        build_eval_protocol(single, seed=0)


def test_derive_seed_is_stable_and_spread():
    assert derive_seed(3, 11) == derive_seed(3, 11)
    assert derive_seed(3, 11) != derive_seed(3, 12)
    assert derive_seed(3, 11, 1) != derive_seed(3, 11, 2)
    assert 0 <= derive_seed(0) < 2**64


def test_extract_gallery_is_pure():
    train, _ = tiny_world()
    model = init_model([5, 8, 3], seed=0)
    fc = dsimplex_prototypes(4)
    g1 = extract_gallery(model, fc, train, "m")
    g2 = extract_gallery(model, fc, train, "m")
    assert np.array_equal(g1.features, g2.features)
    assert np.array_equal(g1.labels, train.labels)
    with pytest.raises(InvalidParameterError):
        extract_gallery(init_model([5, 8, 7], seed=0), fc, train, "m")


def test_run_layout_manifest_and_registry(tmp_path):
    out, result, _ = quick_run(tmp_path)
    manifest = read_manifest(out)
    assert manifest["format"] == "cores-run"
    assert manifest["method"] == "cores"
    assert len(manifest["steps"]) == 2
    for entry in manifest["steps"]:
        for role in ("checkpoint", "query_gallery", "gallery_gallery"):
            path = out / entry[role]
            assert path.is_file()
            assert manifest["digests"][entry[role]] == sha256_file(path)
    assert len(result.registry) == 2
    assert result.registry.latest.step == 2
    assert result.registry[0].classifier.allocated == 2
    assert result.registry[1].classifier.allocated == 4


def test_rerun_requires_force(tmp_path):
    out, _, _ = quick_run(tmp_path)
    train, evaluation = tiny_world()
    timeline = build_timeline(train, fractions=(0.5, 1.0), method=Method.CORES,
                              seed=1, config=quick_config())
    protocol = build_eval_protocol(evaluation, seed=0, n_pos=60, n_neg=60)
    fc = dsimplex_prototypes(train.num_classes)
    with pytest.raises(RunExistsError):
        run_timeline(timeline, fc, protocol, out_dir=out, seed=0, hidden_dims=(8,))
    run_timeline(timeline, fc, protocol, out_dir=out, seed=0, hidden_dims=(8,),
                 force=True)


def test_runs_are_deterministic(tmp_path):
    out1, _, _ = quick_run(tmp_path, subdir="a", seed=7)
    out2, _, _ = quick_run(tmp_path, subdir="b", seed=7)
    for rel in ("step1/query.gallery", "step1/gallery.gallery",
                "step2/query.gallery", "step2/gallery.gallery",
                "step1/model.json", "manifest.json"):
        assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes(), rel
    out3, _, _ = quick_run(tmp_path, subdir="c", seed=8)
    assert (out1 / "step1/query.gallery").read_bytes() != \
        (out3 / "step1/query.gallery").read_bytes()


def test_earlier_galleries_never_rewritten(tmp_path):
    out, _, protocol = quick_run(tmp_path, fractions=(0.34, 0.67, 1.0))
    manifest = read_manifest(out)
    # digests were recorded when each step finished; later steps and a full
    # evaluation pass must leave every byte alone
    before = {rel: sha256_file(out / rel) for rel in manifest["digests"]}
    assert before == manifest["digests"]
    build_compatibility_matrix(out, METRIC_VERIFICATION, pairs=protocol.pairs)
    after = {rel: sha256_file(out / rel) for rel in manifest["digests"]}
    assert after == before


def test_cross_method_galleries_share_protocol(tmp_path):
    train, evaluation = tiny_world()
    outs = {}
    for method in (Method.CORES, Method.ITM):
        outs[method], _, _ = quick_run(tmp_path, method=method,
                                       subdir=method.value,
                                       train=train, evaluation=evaluation)
    q_cores = read_gallery(outs[Method.CORES] / "step1/query.gallery")
    q_itm = read_gallery(outs[Method.ITM] / "step1/query.gallery")
    assert np.array_equal(q_cores.labels, q_itm.labels)
    assert not np.array_equal(q_cores.features, q_itm.features)


def test_model_selection_records_choice(tmp_path):
    out, result, _ = quick_run(tmp_path, model_selection=True)
    manifest = read_manifest(out)
    first, second = manifest["steps"]
    assert first["selected_epoch"] is None
    assert second["selected_epoch"] is not None
    assert 0 <= second["selected_epoch"] < quick_config().epochs
    assert isinstance(second["ms_constraint_satisfied"], bool)
    assert result.registry[1].selected_epoch == second["selected_epoch"]


def test_capacity_checked_against_final_step(tmp_path):
    train, evaluation = tiny_world()
    timeline = build_timeline(train, fractions=(0.5, 1.0), method=Method.CORES,
                              seed=1, config=quick_config())
    protocol = build_eval_protocol(evaluation, seed=0, n_pos=20, n_neg=20)
    from cores import CapacityExceededError
    with pytest.raises(CapacityExceededError):
        run_timeline(timeline, dsimplex_prototypes(3), protocol,
                     out_dir=tmp_path / "x", seed=0, hidden_dims=(8,))


def test_itm_retrains_from_scratch_each_step():
    train, _ = tiny_world()
    config = quick_config(epochs=3)
    m1, h1 = train_itm(train, config, feature_dim=3, seed=0, hidden_dims=(8,))
    m2, h2 = train_itm(train, config, feature_dim=3, seed=1, hidden_dims=(8,))
    assert h1.shape == (3, train.num_classes)
    assert not np.array_equal(m1.weights[0], m2.weights[0])


def test_ift_widens_head_and_keeps_backbone_warm():
    train, _ = tiny_world()
    config = quick_config(epochs=3)
    first = train.take(np.flatnonzero(np.isin(train.labels, train.class_ids[:2])))
    m1, h1 = train_itm(first, config, feature_dim=3, seed=0, hidden_dims=(8,))
    m1_snapshot = [w.copy() for w in m1.weights]
    m2, h2 = train_ift(train, config, m1, h1, seed=0)
    assert h2.shape == (3, 4)
    assert m2 is not m1
    # the previous model object is untouched by the upgrade
    for w, snap in zip(m1.weights, m1_snapshot):
        assert np.array_equal(w, snap)


def test_l2_baseline_pulls_toward_old_features():
    train, _ = tiny_world(per=20)
    config = TrainConfig(epochs=25, batch_size=64, weight_decay=0.0)
    old, _ = train_itm(train, config, feature_dim=3, seed=5, hidden_dims=(8,))
    strong, _ = train_l2_baseline(train, old, lam=50.0, config=config, seed=6,
                                  hidden_dims=(8,))
    free, _ = train_l2_baseline(train, old, lam=0.0, config=config, seed=6,
                                hidden_dims=(8,))
    target = old.forward(train.samples)
    gap_strong = np.linalg.norm(strong.forward(train.samples) - target)
    gap_free = np.linalg.norm(free.forward(train.samples) - target)
    assert gap_strong < gap_free


def test_l2_method_requires_row_provenance(tmp_path):
    raw_steps = (
        LabeledSet(np.random.default_rng(0).normal(size=(8, 5)),
                   np.array([0, 0, 1, 1, 2, 2, 3, 3])),
        LabeledSet(np.random.default_rng(1).normal(size=(16, 5)),
                   np.tile([0, 1, 2, 3], 4)),
    )
    timeline = UpgradeTimeline(steps=raw_steps,
                               configs=(quick_config(),) * 2,
                               method=Method.L2)
    _, evaluation = tiny_world()
    protocol = build_eval_protocol(evaluation, seed=0, n_pos=20, n_neg=20)
    with pytest.raises(InvalidParameterError, match="source_rows"):
        run_timeline(timeline, dsimplex_prototypes(4), protocol,
                     out_dir=tmp_path / "x", seed=0, hidden_dims=(8,))


def test_centroid_drift_identity_and_flip():
    train, _ = tiny_world()
    model = init_model([5, 8, 3], seed=0)
    report = centroid_drift(model, model, train)
    assert abs(report.mean_cosine - 1.0) < 1e-12
    assert report.skipped == 0
    flipped = model.copy()
    flipped.weights[-1] = -flipped.weights[-1]
    flipped.biases[-1] = -flipped.biases[-1]
    report = centroid_drift(model, flipped, train)
    assert abs(report.mean_cosine + 1.0) < 1e-12


def test_fixed_prototypes_anchor_features_across_upgrade(tmp_path):
    # same data upgrade, two training rules: with fixed prototypes the
    # never-seen-class centroids barely move, with a from-scratch retrain
    # the new feature space has no relation to the old one
    train, evaluation = tiny_world(train_classes=6, eval_classes=4, per=24)
    drift = {}
    for method in (Method.CORES, Method.ITM):
        timeline = build_timeline(train, fractions=(0.5, 1.0),
                                  mode=TimelineMode.BY_SAMPLE, method=method,
                                  seed=2, config=TrainConfig(epochs=40,
                                                             batch_size=256))
        protocol = build_eval_protocol(evaluation, seed=0, n_pos=40, n_neg=40)
        result = run_timeline(timeline, dsimplex_prototypes(6), protocol,
                              out_dir=tmp_path / method.value, seed=0,
                              hidden_dims=(16,))
        models = [entry.model for entry in result.registry]
        drift[method] = centroid_drift(models[0], models[1], evaluation).mean_cosine
    assert drift[Method.CORES] > 0.9
    assert drift[Method.CORES] > drift[Method.ITM]


def test_manifest_json_is_reloadable(tmp_path):
    out, result, _ = quick_run(tmp_path)
    text = (out / "manifest.json").read_text()
    assert json.loads(text) == result.manifest
