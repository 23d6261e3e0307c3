"""End-to-end acceptance checks, one test per criterion, each reporting PASS or FAIL."""

import hashlib
import time
from collections import Counter

import numpy as np
import pytest
import torch

from fruitform.data import DeformityClass, Source, Split, plan_balancing, stratified_split
from fruitform.data.augment import MAX_FACTOR, TRANSFORMS, load_rgb
from fruitform.evalkit import MetricsReport, evaluate
from fruitform.nets import BackboneSpec, MultiInputSpec, SingleInputSpec, build_model, gradient_check_details
from fruitform.shapegen import (DeformityParams, ShapeTemplate, build_procedural_dataset, contour_in_frame,
                                gen_shape, rasterize_polygon, symmetry_score)
from fruitform.silhouette import iou, quality_filter, segment_uniform_background
from fruitform.trainer import (SplitData, TrainConfig, evaluate_tensors, load_split, pretrain_then_finetune,
                               select_best_epoch, train, train_multi)

from conftest import make_manifest
from test_data import APPLE_ACQUIRED, augmented_family_manifest
from test_evalkit import ORACLE_CM, hand_metrics
from test_nets import grad_batch, tiny_multi
from test_trainer import rows

SEEDS = (0, 1, 2)
DESK_LR, DESK_BATCH = 1e-3, 16


def verdict(verdicts, n, title, ok, detail, seconds=None, limit=None):
    """Record and print one criterion line; the runtime bound is part of the verdict."""
    if limit is not None:
        ok = ok and seconds < limit
    timing = "" if seconds is None else f" [{seconds:.1f}s" + ("" if limit is None else f" / {limit}s") + "]"
    line = f"{'PASS' if ok else 'FAIL'} {n:>2} {title}: {detail}{timing}"
    verdicts[n] = line
    print(line)
    assert ok, line


def accuracy_on(model, manifest, split, masks=None):
    data = load_split(model, manifest, split, masks)
    _, preds = evaluate_tensors(model, data)
    return float((preds == data.labels.numpy()).mean())


def desk_config(seed, **kw):
    return TrainConfig(seed=seed, learning_rate=DESK_LR, batch_size=DESK_BATCH, **kw)


def test_01_metric_oracle(verdicts):
    t = time.perf_counter()
    r = MetricsReport.from_confusion(np.array(ORACLE_CM))
    oracle = hand_metrics()
    err = max(abs(r.test_accuracy - oracle["accuracy"]), abs(r.precision - oracle["precision"]),
              abs(r.recall - oracle["recall"]), abs(r.f1_score - oracle["f1"]))
    verdict(verdicts, 1, "metric oracle", err <= 1e-12, f"max abs error {err:.1e} (<= 1e-12)",
            time.perf_counter() - t, 1)


def test_02_split_contract(verdicts):
    m, _ = augmented_family_manifest(APPLE_ACQUIRED, 5000)
    t = time.perf_counter()
    s = stratified_split(m, seed=0)
    overall = Counter(s.splits.values())
    overall = (overall[Split.Train], overall[Split.Val], overall[Split.Test])
    per_class = set()
    for cls in DeformityClass:
        got = Counter(s.splits[r.id] for r in s.records if r.label is cls)
        per_class.add((got[Split.Train], got[Split.Val], got[Split.Test]))
    leaks = sum(1 for r in s.records if r.parent_id and s.splits[r.id] is not s.splits[r.parent_id])
    ok = len(m.records) == 20000 and overall == (16000, 2000, 2000) and per_class == {(4000, 500, 500)} \
        and leaks == 0
    verdict(verdicts, 2, "split contract", ok, f"overall {overall}, per class {sorted(per_class)}, {leaks} leaks",
            time.perf_counter() - t, 10)


def test_03_augmentation_contract(verdicts):
    t = time.perf_counter()
    m = make_manifest(APPLE_ACQUIRED)
    plan = plan_balancing(m, 5000)
    labels = {r.id: r.label for r in m.records}
    planned = Counter()
    for rid, tags in plan.variants.items():
        planned[labels[rid].name] += len(tags)
    tags_ok = all(set(tags) <= set(TRANSFORMS) and len(set(tags)) == len(tags) for tags in plan.variants.values())
    factor = 1 + max(len(tags) for tags in plan.variants.values())
    counts = [planned[c.name] for c in DeformityClass]
    ok = counts == [950, 3259, 4349, 3039] and tags_ok and factor <= MAX_FACTOR == 8
    verdict(verdicts, 3, "augmentation contract", ok, f"plans {counts}, max factor {factor}",
            time.perf_counter() - t, 10)


def test_04_silhouette_fidelity(verdicts, tmp_path):
    t = time.perf_counter()
    ds = build_procedural_dataset(tmp_path, per_class=50, side=64, seed=4)
    masks = [segment_uniform_background(load_rgb(r.path), record_id=r.id) for r in ds.manifest.records]
    kept, excluded = quality_filter(masks)
    mean_iou = float(np.mean([iou(m.grid, ds.masks[m.record_id].grid) for m in masks]))
    ok = len(masks) == 200 and mean_iou >= 0.98 and not excluded
    verdict(verdicts, 4, "silhouette fidelity", ok,
            f"mean IoU {mean_iou:.4f} (>= 0.98) over {len(masks)} renders, {len(excluded)} exclusions",
            time.perf_counter() - t, 60)


def test_05_symmetry_oracle(verdicts):
    t = time.perf_counter()
    yy, xx = np.mgrid[0:64, 0:64] + 0.5
    disc = ((xx - 32) ** 2 + (yy - 32) ** 2 <= 400).astype(np.uint8)
    disc_score = symmetry_score(disc)

    def grid(template, alpha, seed):
        return rasterize_polygon(contour_in_frame(gen_shape(template, DeformityParams(alpha, seed=seed), 20), 64),
                                 64, 64)

    mirror_ok, means = True, {}
    for template in ShapeTemplate:
        for alpha in (0.2, 0.6):
            scores = []
            for seed in range(50):
                g = grid(template, alpha, seed)
                s = symmetry_score(g)
                mirror_ok &= symmetry_score(g[:, ::-1]) == s == symmetry_score(g[::-1, :])
                scores.append(s)
            means[template.value, alpha] = float(np.mean(scores))
    monotone = all(means[k.value, 0.2] > means[k.value, 0.6] for k in ShapeTemplate)
    detail = ", ".join(f"{k.value} {means[k.value, 0.2]:.3f}>{means[k.value, 0.6]:.3f}" for k in ShapeTemplate)
    verdict(verdicts, 5, "symmetry oracle", disc_score >= 0.995 and mirror_ok and monotone,
            f"disc {disc_score:.4f}, mirror exact {mirror_ok}, {detail}", time.perf_counter() - t, 120)


def test_06_gradient_check(verdicts):
    t = time.perf_counter()
    inputs, labels = grad_batch()
    details = gradient_check_details(tiny_multi(side=16), inputs, labels, k=5, step=1e-4)
    per_layer = Counter()
    for name, c in details.items():
        per_layer[name.rsplit(".", 1)[0]] += c.checked
    groups = {name.split(".")[0] for name in per_layer}
    worst = max(c.max_rel_error for c in details.values())
    ok = worst <= 1e-3 and min(per_layer.values()) >= 5 and groups == {"rgb_branch", "silhouette_branch", "mlp"}
    verdict(verdicts, 6, "gradient check", ok,
            f"max rel error {worst:.2e} (<= 1e-3), {len(per_layer)} layers, >= {min(per_layer.values())} coords each",
            time.perf_counter() - t, 60)


def test_07_best_epoch_restoration(verdicts, small_procedural):
    _, m = small_procedural
    t = time.perf_counter()
    model = build_model(SingleInputSpec(BackboneSpec(seed=0), seed=0))
    model, hist = train(model, m, TrainConfig(max_epochs=5, batch_size=8, learning_rate=3e-3))
    val = load_split(model, m, Split.Val)
    loss, preds = evaluate_tensors(model, val)
    restored = float((preds == val.labels.numpy()).mean()) == hist.best.val_accuracy and loss == hist.best.val_loss
    crafted = [select_best_epoch(rows([0.5, 0.9, 0.7])) == 2,
               select_best_epoch(rows([0.8, 0.8], [0.4, 0.3])) == 2,
               select_best_epoch(rows([0.8, 0.8, 0.8], [0.3, 0.3, 0.3])) == 1,
               select_best_epoch(rows([0.7, 0.8], [0.1, 0.9])) == 2]
    verdict(verdicts, 7, "best-epoch restoration", restored and all(crafted),
            f"restored epoch {hist.best_epoch} val acc {hist.best.val_accuracy:.4f} reproduced {restored}, "
            f"{sum(crafted)}/4 crafted tie-breaks", time.perf_counter() - t, 60)


@pytest.mark.slow
def test_08_desk_scale_learning(verdicts, tmp_path):
    t = time.perf_counter()
    ds = build_procedural_dataset(tmp_path, per_class=500, side=64, seed=8)
    accs = []
    for seed in SEEDS:
        m = stratified_split(ds.manifest, seed=seed)
        model = build_model(SingleInputSpec(BackboneSpec(seed=seed), seed=seed))
        model, _ = train(model, m, desk_config(seed, max_epochs=30))
        accs.append(accuracy_on(model, m, Split.Test))
    sizes = Counter(m.splits.values())
    mean = float(np.mean(accs))
    verdict(verdicts, 8, "desk-scale learning", mean >= 0.80 and sizes[Split.Test] == 200,
            f"mean test acc {mean:.4f} (>= 0.80), per seed {[round(a, 4) for a in accs]}",
            time.perf_counter() - t, 15 * 60)


@pytest.mark.slow
def test_09_multi_input_benefit(verdicts, tmp_path):
    t = time.perf_counter()
    ds = build_procedural_dataset(tmp_path, per_class=500, side=64, seed=9, background="noisy")
    single, multi, ablated = [], [], []
    for seed in SEEDS:
        m = stratified_split(ds.manifest, seed=seed)
        cfg = desk_config(seed, max_epochs=30)
        s = build_model(SingleInputSpec(BackboneSpec(seed=seed), seed=seed))
        s, _ = train(s, m, cfg)
        single.append(accuracy_on(s, m, Split.Test))
        mm = build_model(MultiInputSpec(BackboneSpec(seed=seed), BackboneSpec(input_channels=1, seed=seed + 1),
                                        seed=seed))
        mm, _ = train_multi(mm, m, ds.masks, cfg)
        test = load_split(mm, m, Split.Test, ds.masks)
        _, preds = evaluate_tensors(mm, test)
        multi.append(float((preds == test.labels.numpy()).mean()))
        zeroed = SplitData((test.inputs[0], torch.zeros_like(test.inputs[1])), test.labels, test.ids)
        _, preds = evaluate_tensors(mm, zeroed)
        ablated.append(float((preds == test.labels.numpy()).mean()))
    s_mean, m_mean, a_mean = (float(np.mean(v)) for v in (single, multi, ablated))
    drop = m_mean - a_mean
    verdict(verdicts, 9, "multi-input benefit", m_mean >= s_mean - 0.02 and drop >= 0.05,
            f"multi {m_mean:.4f} vs single {s_mean:.4f} (>= single - 0.02), ablation drop {drop:.4f} (>= 0.05)",
            time.perf_counter() - t, 30 * 60)


@pytest.mark.slow
def test_10_pretrain_finetune(verdicts, tmp_path):
    t = time.perf_counter()
    synthetic = build_procedural_dataset(tmp_path / "syn", per_class=200, side=64, seed=10)
    real = build_procedural_dataset(tmp_path / "real", per_class=100, side=64, seed=11,
                                    source=Source.Real, name="real")
    hand_off, fine_acc, scratch_acc = [], [], []
    for seed in SEEDS:
        ms, mr = stratified_split(synthetic.manifest, seed=seed), stratified_split(real.manifest, seed=seed)
        fine_cfg = TrainConfig(seed=seed, learning_rate=1e-4, batch_size=DESK_BATCH, max_epochs=1)
        _, pre, fine = pretrain_then_finetune(build_model(SingleInputSpec(BackboneSpec(seed=seed), seed=seed)),
                                              ms, mr, desk_config(seed, max_epochs=10), fine_cfg)
        _, scratch = train(build_model(SingleInputSpec(BackboneSpec(seed=seed), seed=seed)), mr, fine_cfg)
        hand_off.append(fine.initial_weights_hash == pre.best_weights_hash)
        fine_acc.append(fine.rows[0].val_accuracy)
        scratch_acc.append(scratch.rows[0].val_accuracy)
    f_mean, s_mean = float(np.mean(fine_acc)), float(np.mean(scratch_acc))
    verdict(verdicts, 10, "pretrain/fine-tune hand-off", all(hand_off) and f_mean >= s_mean,
            f"hash hand-off {sum(hand_off)}/3, epoch-1 val acc fine-tuned {f_mean:.4f} vs scratch {s_mean:.4f}",
            time.perf_counter() - t, 20 * 60)


def test_11_reproducibility(verdicts, small_procedural, tmp_path):
    ds, m = small_procedural
    t = time.perf_counter()
    digests = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        out.mkdir()
        s = build_model(SingleInputSpec(BackboneSpec(seed=5), seed=5))
        s, hs = train(s, m, desk_config(5, max_epochs=3))
        mm = build_model(MultiInputSpec(BackboneSpec(seed=5), BackboneSpec(input_channels=1, seed=6),
                                        hidden=(32,), seed=5))
        mm, hm = train_multi(mm, m, ds.masks, desk_config(5, max_epochs=3))
        files = [*hs.save(out / "single.csv"), *hm.save(out / "multi.csv"),
                 *evaluate(s, m, Split.Test).save(out / "single.report.json"),
                 *evaluate(mm, m, Split.Test, ds.masks).save(out / "multi.report.json")]
        digests.append([hashlib.sha256(f.read_bytes()).hexdigest() for f in files])
    same = digests[0] == digests[1]
    verdict(verdicts, 11, "reproducibility", same,
            f"{len(digests[0])} history/report files hash-equal across reruns: {same}", time.perf_counter() - t)
