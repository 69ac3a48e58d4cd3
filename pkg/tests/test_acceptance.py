"""Acceptance criteria G1-G9, S1 and S2 at their stated tolerances.

Each test appends one PASS/FAIL line to the terminal summary. The S1/S2/G8
training runs are shared through a session fixture; together they take
several minutes on one core.
"""

import json
import math
import time

import numpy as np
import pytest

from camfusion import cli
from camfusion.baselines import avg_pool, cos_sim_medoid_index, l1_medoid_index
from camfusion.checkpoint import blob_path, load_checkpoint, save_checkpoint
from camfusion.data import (
    SynthConfig,
    gen_synthetic,
    instance_weights,
    load_dataset,
    save_dataset,
    save_vocabulary,
    select_eval_views,
    split_instances,
    with_frequencies,
)
from camfusion.losses import ContrastiveBatchView, build_sign_matrix, class_loss
from camfusion.metrics import GroundTruthInstance, Prediction, instance_map
from camfusion.model import ModelConfig, fuse, fuse_many, init_parameters, scoring_scale_bias
from camfusion.numerics.gradcheck import LOSSES, PRIMITIVES, check_primitive
from camfusion.numerics.optim import LrSchedule, lr_at
from camfusion.trainer import TrainConfig, ablation_mode, steps_per_epoch, train

import oracles
from conftest import ACCEPTANCE
from scenarios import map_scenario, medoid_set

S1_SYNTH = SynthConfig(num_classes=20, instances_per_class=100, views_per_instance=12, D=256,
                       parts_per_class=4, noise_std=0.3, distractor_strength=0.5, seed=0)
S1_MODEL = ModelConfig(descriptor_dim=256, model_dim=64, num_blocks=2, num_heads=2, mlp_hidden=256)
S1_EPOCHS = 100
S1_BATCH = 64
S1_LR = 3e-4


def report(tag, ok, detail):
    ACCEPTANCE.append(f"{tag} {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{tag}: {detail}"


# ---------------------------------------------------------------------------
# G1-G7, G9


def test_G1_gradient_suite():
    t0 = time.perf_counter()
    worst, failed = 0.0, []
    for op in PRIMITIVES + LOSSES:
        r = check_primitive(op, cases=100, seed=0, tol=1e-4)
        worst = max(worst, r.worst_rel_err)
        if not r.passed:
            failed.append(op)
    elapsed = time.perf_counter() - t0
    report("G1", not failed and worst < 1e-4 and elapsed < 120,
           f"{len(PRIMITIVES + LOSSES)} ops x 100 cases, worst rel err {worst:.2e}, "
           f"{elapsed:.1f} s{', failed: ' + ', '.join(failed) if failed else ''}")


def test_G2_permutation_invariance():
    cfg = ModelConfig(descriptor_dim=16, model_dim=16, num_blocks=2, num_heads=2, mlp_hidden=32,
                      init_std=0.5)
    params = init_parameters(cfg, 0)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(3, 9))
        V = rng.standard_normal((n, 16))
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        worst = max(worst, float(np.abs(fuse(V[rng.permutation(n)], params, cfg)
                                        - fuse(V, params, cfg)).max()))
    report("G2", worst < 1e-6, f"50 instances, max abs diff {worst:.2e}")


def test_G3_loss_closed_forms():
    one = ContrastiveBatchView(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([0]), 1.0, 0.0)
    ln2_err = abs(float(class_loss(one).data) - math.log(2))
    sat = ContrastiveBatchView(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), np.array([0]), 50.0, 10.0)
    saturated = float(class_loss(sat).data)
    z = build_sign_matrix([5, 5, 7], class_mask_enabled=True)
    ok = ln2_err < 1e-12 and saturated < 1e-9 and z[0, 1] == 1.0
    report("G3", ok, f"|L-ln2| {ln2_err:.1e}, saturated {saturated:.1e}, z12 {z[0, 1]:+.0f}")


def test_G4_medoid_oracles():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        x = medoid_set(rng)
        mismatches += l1_medoid_index(x) != oracles.l1_medoid_index(x.tolist())
        mismatches += cos_sim_medoid_index(x) != oracles.cos_medoid_index(x.tolist())
    report("G4", mismatches == 0, f"1000 sets, {mismatches} index mismatches")


def test_G5_map_oracle():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        preds, gts, classes = map_scenario(rng)
        res = instance_map(preds, gts, class_ids=classes)
        present = sorted({g.class_id for g in gts})
        for tau, key in ((0.25, "mAP25"), (0.5, "mAP50")):
            ref = np.mean([oracles.exhaustive_ap(
                [(p.confidence, set(p.point_ids.tolist())) for p in preds if p.class_id == c],
                [set(g.point_ids.tolist()) for g in gts if g.class_id == c], tau) for c in present])
            worst = max(worst, abs(res[key] - ref))
    gts = [GroundTruthInstance(0, 0, [0, 1, 2, 3]), GroundTruthInstance(1, 0, [4, 5, 6, 7])]
    preds = [Prediction([8, 9], 0, 0.9), Prediction([0, 1, 2, 3], 0, 0.8), Prediction([4, 5, 6, 7], 0, 0.7)]
    hand = instance_map(preds, gts)["mAP50"]
    report("G5", worst < 1e-9 and hand == 7 / 12,
           f"200 scenarios, max abs diff {worst:.1e}; hand case AP50 = {hand!r}")


def test_G6_schedule():
    s = LrSchedule()
    vals = [lr_at(k, s) for k in (0, 3600, 7200)]
    ok = vals[0] == 1.0e-4 and abs(vals[1] - 5.025e-5) <= 1e-9 and abs(vals[2] - 5.0e-5) <= 1e-9
    report("G6", ok, "lr_at(0, 3600, 7200) = " + ", ".join(f"{v:.6g}" for v in vals))


def test_G7_sampler_uniformity():
    counts = [int(round(2000 / (c + 1) ** 1.3)) for c in range(10)]
    synth = gen_synthetic(SynthConfig(num_classes=10, instances_per_class=counts,
                                      views_per_instance=2, D=20, parts_per_class=2, seed=7))
    w = instance_weights(synth.instances, with_frequencies(synth.vocab, synth.instances))
    rng = np.random.default_rng(7)
    draws = rng.choice(len(w), size=100_000, replace=True, p=w / w.sum())
    cls = np.array([i.class_id for i in synth.instances])[draws]
    freq = np.bincount(cls, minlength=10) / draws.size
    dev = float(np.abs(freq - 0.1).max())
    report("G7", dev <= 0.02, f"class sizes {counts[0]}..{counts[-1]}, max |freq-0.1| = {dev:.4f}")


def test_G9_round_trips(tmp_path):
    synth = gen_synthetic(SynthConfig(num_classes=5, instances_per_class=4, views_per_instance=6,
                                      D=32, parts_per_class=2, seed=9))
    save_dataset(tmp_path / "d.ndjson", synth.instances, 32)
    save_vocabulary(tmp_path / "v.ndjson", synth.vocab)
    inst, vocab = load_dataset(tmp_path / "d.ndjson", tmp_path / "v.ndjson")
    rel = max(float(np.max(np.abs(a.descriptor_matrix() - b.descriptor_matrix())
                           / np.abs(b.descriptor_matrix())))
              for a, b in zip(inst, synth.instances))
    same_shape = [(i.instance_id, i.class_id, len(i.views)) for i in inst] == \
        [(i.instance_id, i.class_id, len(i.views)) for i in synth.instances]

    cfg = ModelConfig(descriptor_dim=32, model_dim=32, num_blocks=2, num_heads=2, mlp_hidden=64)
    p = init_parameters(cfg, 0)
    save_checkpoint(p, cfg, tmp_path / "a.json")
    q, _, _ = load_checkpoint(tmp_path / "a.json")
    save_checkpoint(q, cfg, tmp_path / "b.json")
    idempotent = blob_path(tmp_path / "a.json").read_bytes() == blob_path(tmp_path / "b.json").read_bytes()
    drift = max(float(np.abs(fuse(i.descriptor_matrix(), p, cfg) - fuse(i.descriptor_matrix(), q, cfg)).max())
                for i in inst)
    ok = same_shape and rel < 1e-6 and idempotent and drift < 1e-4
    report("G9", ok, f"descriptor rel err {rel:.1e}, checkpoint idempotent {idempotent}, "
                     f"fuse drift {drift:.1e}")


# ---------------------------------------------------------------------------
# S1, S2, G8: training on the synthetic complementary-views dataset


def s1_config(mode, n_train):
    steps = S1_EPOCHS * steps_per_epoch(n_train, S1_BATCH)
    base = TrainConfig(epochs=S1_EPOCHS, batch_size=S1_BATCH,
                       schedule=LrSchedule(lr_max=S1_LR, lr_min=5e-7, period=steps),
                       views_in=5, views_target=5, seed=0, model=S1_MODEL)
    return ablation_mode(mode, base)


def run_mode(mode, split, out_dir):
    train_set, test_set, vocab = split
    t0 = time.perf_counter()
    result = train(train_set, vocab, s1_config(mode, len(train_set)), out_dir=out_dir)
    elapsed = time.perf_counter() - t0
    params, mcfg, _ = load_checkpoint(result.checkpoints[-1])
    views = [np.stack([v.descriptor for v in select_eval_views(i, 5)]) for i in test_set]
    fused = fuse_many(views, params, mcfg)
    t, b = scoring_scale_bias(params)
    header = {"fusion": "learned", "scale": t, "bias": b}
    doc = cli.evaluate(header, {i.instance_id: f for i, f in zip(test_set, fused)},
                       test_set, vocab, "both", 600)
    (out_dir / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    means = result.epoch_means()
    return {"acc": doc["top1_accuracy"], "drop": 1 - means[-1] / means[0], "seconds": elapsed,
            "checkpoint": result.checkpoints[-1], "metrics": out_dir / "metrics.json"}


@pytest.fixture(scope="session")
def s1_split():
    synth = gen_synthetic(S1_SYNTH)
    train_set, test_set = split_instances(synth.instances, 0.2, seed=0)
    return train_set, test_set, with_frequencies(synth.vocab, train_set)


@pytest.fixture(scope="session")
def runs(s1_split, tmp_path_factory):
    root = tmp_path_factory.mktemp("s1")
    cache = {}

    def get(mode, replica=0):
        key = (mode, replica)
        if key not in cache:
            out = root / f"{mode}-{replica}"
            out.mkdir()
            cache[key] = run_mode(mode, s1_split, out)
        return cache[key]

    return get


def avg_pool_accuracy(split):
    _, test_set, vocab = split
    Y, ids = vocab.embeddings(), vocab.class_ids
    fused = np.stack([avg_pool(np.stack([v.descriptor for v in select_eval_views(i, 5)]))
                      for i in test_set])
    pred = ids[np.argmax(fused @ Y.T, axis=1)]
    return float(np.mean(pred == np.array([i.class_id for i in test_set])))


def test_S1_learned_beats_avg_pool_and_final_matches_class_only(runs, s1_split):
    avg = avg_pool_accuracy(s1_split)
    final, only = runs("final"), runs("class-only")
    margin = final["acc"] - avg
    seconds = final["seconds"] + only["seconds"]
    ok = margin >= 0.05 and final["acc"] >= only["acc"] and seconds < 20 * 60
    report("S1", ok, f"avg-pool {avg:.4f}, class-only {only['acc']:.4f}, final {final['acc']:.4f} "
                     f"(margin {margin:+.4f}), {S1_EPOCHS} epochs, {seconds:.0f} s")


def test_S2_loss_drop_and_multiview_not_worse(runs):
    modes = ("class-only", "resampling", "multiview", "final")
    res = {m: runs(m) for m in modes}
    drops = {m: r["drop"] for m, r in res.items()}
    ok = all(d >= 0.30 for d in drops.values()) and res["multiview"]["acc"] >= res["class-only"]["acc"]
    report("S2", ok, "L_total drop " + ", ".join(f"{m} {d:.2f}" for m, d in drops.items())
           + f"; multiview {res['multiview']['acc']:.4f} vs class-only {res['class-only']['acc']:.4f}")


def test_G8_determinism(runs):
    same = []
    for mode in ("class-only", "final"):
        a, b = runs(mode, 0), runs(mode, 1)
        same.append(a["checkpoint"].read_bytes() == b["checkpoint"].read_bytes()
                    and blob_path(a["checkpoint"]).read_bytes() == blob_path(b["checkpoint"]).read_bytes()
                    and a["metrics"].read_bytes() == b["metrics"].read_bytes())
    report("G8", all(same), "two S1 runs: checkpoints and metrics JSON "
                            + ("byte-identical" if all(same) else "differ"))
