import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camfusion.baselines import avg_pool
from camfusion.data import (
    ClassEntry,
    ClassVocabulary,
    DataError,
    InstanceRecord,
    SamplerConfig,
    SynthConfig,
    ViewObservation,
    gen_synthetic,
    instance_weights,
    load_dataset,
    load_instances,
    oracle_prototype_predict,
    sample_batch,
    save_dataset,
    save_vocabulary,
    select_eval_views,
    split_instances,
    uniform_weights,
    with_frequencies,
)
from camfusion.metrics import classify, top1_accuracy

SMALL = SynthConfig(num_classes=3, instances_per_class=4, views_per_instance=6, D=16,
                    parts_per_class=2, seed=3)


def unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def make_instance(iid, cls, vis, rng, d=4):
    return InstanceRecord(iid, cls, 10, [ViewObservation(k, unit(rng, d), float(v))
                                         for k, v in enumerate(vis)])


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))


def test_round_trip_preserves_structure(tmp_path):
    data = gen_synthetic(SMALL)
    save_dataset(tmp_path / "d.ndjson", data.instances, data.D)
    save_vocabulary(tmp_path / "v.ndjson", data.vocab)
    inst, vocab = load_dataset(tmp_path / "d.ndjson", tmp_path / "v.ndjson")
    assert len(inst) == len(data.instances) == 12
    for a, b in zip(inst, data.instances):
        assert (a.instance_id, a.class_id, a.point_count) == (b.instance_id, b.class_id, b.point_count)
        assert [v.view_id for v in a.views] == [v.view_id for v in b.views]
        for va, vb in zip(a.views, b.views):
            assert np.max(np.abs(va.descriptor - vb.descriptor) / np.abs(vb.descriptor)) < 1e-6
            assert va.visibility == pytest.approx(vb.visibility, rel=1e-8)
    assert vocab.frequencies() == {0: 4, 1: 4, 2: 4}
    np.testing.assert_allclose(vocab.embeddings(), data.vocab.embeddings(), rtol=1e-6)


def test_same_seed_same_files(tmp_path):
    for name in "ab":
        data = gen_synthetic(SMALL)
        save_dataset(tmp_path / f"{name}.ndjson", data.instances, data.D)
    assert (tmp_path / "a.ndjson").read_bytes() == (tmp_path / "b.ndjson").read_bytes()


def test_empty_dataset_keeps_vocabulary(tmp_path):
    data = gen_synthetic(SMALL)
    save_dataset(tmp_path / "d.ndjson", [], 16)
    save_vocabulary(tmp_path / "v.ndjson", data.vocab)
    inst, vocab = load_dataset(tmp_path / "d.ndjson", tmp_path / "v.ndjson")
    assert inst == [] and len(vocab) == 3


def test_loaded_ordering_by_instance_id(tmp_path):
    rng = np.random.default_rng(0)
    save_dataset(tmp_path / "d.ndjson", [make_instance(i, 0, [1.0], rng) for i in (5, 2, 9)], 4)
    lines = (tmp_path / "d.ndjson").read_text().splitlines()
    write_lines(tmp_path / "r.ndjson", [json.loads(lines[0])] + [json.loads(x) for x in lines[:0:-1]])
    assert [r.instance_id for r in load_instances(tmp_path / "r.ndjson")[0]] == [2, 5, 9]


def _record(desc, iid=1, view_id=0, vis=1.0):
    return {"instance_id": iid, "class_id": 0, "point_count": 3,
            "views": [{"view_id": view_id, "visibility": vis, "descriptor": desc}]}


def test_descriptor_within_tolerance_is_renormalized(tmp_path):
    write_lines(tmp_path / "d.ndjson", [{"schema_version": 1, "D": 2}, _record([1.0005, 0.0])])
    inst, _ = load_instances(tmp_path / "d.ndjson")
    assert inst[0].views[0].descriptor.tolist() == [1.0, 0.0]


@pytest.mark.parametrize("lines,needle", [
    ([{"schema_version": 1, "D": 2}, _record([1.01, 0.0], iid=7, view_id=3)], "instance 7 view 3"),
    ([{"schema_version": 1, "D": 2}, _record([1.0, 0.0, 0.0])], "D=2"),
    ([{"schema_version": 2, "D": 2}], "schema_version"),
    ([_record([1.0, 0.0])], "header"),
    ([{"schema_version": 1, "D": 2}, {"instance_id": 1}], ":2:"),
    ([{"schema_version": 1, "D": 2}, _record([1.0, 0.0], vis=-1)], "visibility"),
])
def test_bad_files_are_rejected_with_location(tmp_path, lines, needle):
    write_lines(tmp_path / "d.ndjson", lines)
    with pytest.raises(DataError, match=needle):
        load_instances(tmp_path / "d.ndjson")


def test_malformed_json_reports_line_number(tmp_path):
    (tmp_path / "d.ndjson").write_text('{"schema_version": 1, "D": 2}\n{"instance_id": \n')
    with pytest.raises(DataError, match=":2: malformed JSON"):
        load_instances(tmp_path / "d.ndjson")


def test_duplicate_view_ids_rejected(tmp_path):
    rec = _record([1.0, 0.0])
    rec["views"].append(dict(rec["views"][0]))
    write_lines(tmp_path / "d.ndjson", [{"schema_version": 1, "D": 2}, rec])
    with pytest.raises(DataError, match="duplicate view_id"):
        load_instances(tmp_path / "d.ndjson")


def test_empty_file_rejected(tmp_path):
    (tmp_path / "d.ndjson").write_text("")
    with pytest.raises(DataError):
        load_instances(tmp_path / "d.ndjson")


def test_vocabulary_duplicate_ids_rejected():
    e = ClassEntry(1, "a", np.array([1.0, 0.0]), 1)
    with pytest.raises(DataError):
        ClassVocabulary([e, e])


def test_weights_examples():
    rng = np.random.default_rng(0)
    inst = [make_instance(i, c, [1.0], rng) for i, c in enumerate([0, 0, 0, 1])]
    vocab = with_frequencies(ClassVocabulary([ClassEntry(c, str(c), unit(rng, 4)) for c in (0, 1)]), inst)
    w = instance_weights(inst, vocab)
    assert w[3] / w.sum() == pytest.approx(0.5)
    assert w[:3].sum() / w.sum() == pytest.approx(0.5)
    balanced = [make_instance(i, i % 2, [1.0], rng) for i in range(4)]
    vb = with_frequencies(vocab, balanced)
    assert len(set(instance_weights(balanced, vb).tolist())) == 1
    vz = ClassVocabulary([ClassEntry(0, "0", unit(rng, 4), 0), ClassEntry(1, "1", unit(rng, 4), 1)])
    with pytest.raises(DataError):
        instance_weights(inst, vz)


def test_sampler_is_deterministic():
    data = gen_synthetic(SMALL)
    cfg = SamplerConfig(batch_size=8, views_in=2, views_target=3)
    w = uniform_weights(data.instances)
    a = sample_batch(data.instances, w, cfg, np.random.default_rng(4))
    b = sample_batch(data.instances, w, cfg, np.random.default_rng(4))
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.unseen, b.unseen)
    assert a.inputs.shape == (8, 2, 16) and a.unseen.shape == (24, 16)
    assert a.unseen_owner.tolist() == sorted(list(range(8)) * 3)


def test_exact_view_count_uses_every_view():
    rng = np.random.default_rng(0)
    inst = [make_instance(0, 0, np.ones(10), rng)]
    batch = sample_batch(inst, [1.0], SamplerConfig(4, 5, 5), np.random.default_rng(1))
    for r in range(4):
        picked = np.concatenate([batch.input_views[r], batch.target_views[r]])
        assert sorted(picked.tolist()) == list(range(10))


@given(st.integers(1, 12), st.integers(0, 2**16))
def test_sampled_views_belong_to_the_instance(nviews, seed):
    rng = np.random.default_rng(seed)
    inst = [make_instance(i, 0, np.ones(nviews), rng) for i in range(3)]
    batch = sample_batch(inst, [1, 1, 1], SamplerConfig(6, 5, 5), rng)
    for r, i in enumerate(batch.instance_index):
        mat = inst[i].descriptor_matrix()
        picks = np.concatenate([batch.input_views[r], batch.target_views[r]])
        assert picks.min() >= 0 and picks.max() < nviews
        np.testing.assert_array_equal(batch.inputs[r], mat[batch.input_views[r]])
        if nviews >= 10:
            assert len(set(picks.tolist())) == 10


def test_sampler_rejects_empty_dataset():
    with pytest.raises(DataError):
        sample_batch([], [], SamplerConfig(2, 1, 1), np.random.default_rng(0))


def test_select_eval_views():
    rng = np.random.default_rng(0)
    inst = make_instance(0, 0, [3, 9, 1], rng)
    assert [v.visibility for v in select_eval_views(inst, 2)] == [9, 3]
    flat = make_instance(0, 0, [2, 2, 2, 2], rng)
    assert [v.view_id for v in select_eval_views(flat, 3)] == [0, 1, 2]
    assert select_eval_views(inst, 10) == sorted(inst.views, key=lambda v: -v.visibility)
    with pytest.raises(ValueError):
        select_eval_views(inst, 0)


def test_degenerate_synthetic_views_equal_prototype():
    cfg = SynthConfig(num_classes=3, instances_per_class=2, views_per_instance=4, D=8,
                      parts_per_class=1, noise_std=0.0, distractor_strength=0.0)
    data = gen_synthetic(cfg)
    for inst in data.instances:
        y = data.vocab.embedding_of(inst.class_id)
        np.testing.assert_allclose(inst.descriptor_matrix(), np.tile(y, (4, 1)), atol=1e-15)
        assert float(avg_pool(inst.descriptor_matrix()) @ y) > 0.99


def test_synthetic_counts_and_infeasible_dimension():
    data = gen_synthetic(SynthConfig(num_classes=3, instances_per_class=[5, 1, 2], D=16,
                                     parts_per_class=2, views_per_instance=7))
    assert [sum(i.class_id == c for i in data.instances) for c in range(3)] == [5, 1, 2]
    assert all(len(i.views) == 7 for i in data.instances)
    assert data.vocab.frequencies() == {0: 5, 1: 1, 2: 2}
    parts = data.parts.reshape(-1, 16)
    np.testing.assert_allclose(parts @ parts.T, np.eye(6), atol=1e-12)
    with pytest.raises(ValueError, match="D=7"):
        gen_synthetic(SynthConfig(num_classes=2, parts_per_class=4, D=7))


def test_avg_pool_falls_short_of_prototype_oracle():
    data = gen_synthetic(SynthConfig())
    sets = [np.stack([v.descriptor for v in select_eval_views(i, 5)]) for i in data.instances]
    truth = np.array([i.class_id for i in data.instances])
    fused = np.stack([avg_pool(s) for s in sets])
    pred = [classify(f, data.vocab.embeddings(), data.vocab.class_ids, t=None)[0][0] for f in fused]
    avg_acc = top1_accuracy(pred, truth)
    oracle_acc = float(np.mean(oracle_prototype_predict(sets, data.parts) == truth))
    assert avg_acc < oracle_acc
    assert oracle_acc > 0.95


def test_split_is_stratified_and_disjoint():
    data = gen_synthetic(SynthConfig(num_classes=4, instances_per_class=10, D=16,
                                     parts_per_class=2))
    train, test = split_instances(data.instances, 0.2, seed=1)
    assert len(test) == 8 and len(train) == 32
    assert {i.instance_id for i in train}.isdisjoint({i.instance_id for i in test})
    assert sorted(i.class_id for i in test) == [0, 0, 1, 1, 2, 2, 3, 3]
    again = split_instances(data.instances, 0.2, seed=1)[1]
    assert [i.instance_id for i in again] == [i.instance_id for i in test]
