"""Unit tests for datasets, the training loop, and serialization."""

import numpy as np
import pytest

from periscore.harness import (
    AdamSpec,
    Breakdown,
    Cifar100Spec,
    CifarFormatError,
    GradientHistogram,
    SgdSpec,
    StepRecord,
    SyntheticSpec,
    TrainConfig,
    TrainRunLog,
    aggregate_taps,
    build_dataset,
    load_cifar100,
    make_synthetic,
    read_run_log,
    read_taps,
    train,
    write_histograms,
    write_run_log,
    write_taps,
)
from periscore.model import AttentionConfig, DemoConfig, GradientTapRecord
from periscore.scorefn import SIN_MAX, SOFTMAX


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=seed))


# -- synthetic dataset -------------------------------------------------


def test_synthetic_shapes_and_split():
    data = make_synthetic(num_classes=5, samples_per_class=20,
                          noise_sd=0.1, seed=7)
    assert data.images.shape == (100, 8, 8, 1)
    assert data.labels.shape == (100,)
    assert data.train_idx.size == 80
    assert data.eval_idx.size == 20
    assert not np.intersect1d(data.train_idx, data.eval_idx).size
    # Every class appears in both splits.
    assert set(data.labels[data.train_idx]) == set(range(5))
    assert set(data.labels[data.eval_idx]) == set(range(5))


def test_synthetic_is_seed_deterministic():
    a = make_synthetic(3, 10, 0.1, seed=1)
    b = make_synthetic(3, 10, 0.1, seed=1)
    c = make_synthetic(3, 10, 0.1, seed=2)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_synthetic_rejects_single_class():
    with pytest.raises(ValueError):
        make_synthetic(1, 10, 0.1, seed=0)


# -- CIFAR-100 binary loader -------------------------------------------


def _write_cifar(path, n, seed=0):
    rng = _rng(seed)
    fine = rng.integers(0, 100, size=n, dtype=np.uint8)
    pixels = rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
    blob = bytearray()
    for i in range(n):
        blob.append(int(rng.integers(0, 20)))
        blob.append(int(fine[i]))
        blob.extend(pixels[i].tobytes())
    path.write_bytes(bytes(blob))
    return fine, pixels


def test_cifar_loader_parses_records(tmp_path):
    path = tmp_path / "train.bin"
    fine, pixels = _write_cifar(path, 6)
    data = load_cifar100(str(path), subset_size=5)
    assert data.images.shape == (5, 32, 32, 3)
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0
    np.testing.assert_array_equal(data.labels, fine[:5])
    np.testing.assert_array_equal(
        data.images, pixels[:5].transpose(0, 2, 3, 1) / 255.0)


def test_cifar_loader_rejects_truncated_file(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 100)
    with pytest.raises(CifarFormatError):
        load_cifar100(str(path), subset_size=1)


def test_cifar_loader_rejects_bad_labels(tmp_path):
    path = tmp_path / "bad.bin"
    rec = bytearray(3074)
    rec[1] = 200  # fine label out of range
    path.write_bytes(bytes(rec))
    with pytest.raises(CifarFormatError):
        load_cifar100(str(path), subset_size=1)


def test_build_dataset_dispatch(tmp_path):
    assert build_dataset(SyntheticSpec(num_classes=2, samples_per_class=5),
                         seed=0).images.shape == (10, 8, 8, 1)
    path = tmp_path / "c.bin"
    _write_cifar(path, 2)
    spec = Cifar100Spec(path=str(path), subset_size=2)
    assert build_dataset(spec, seed=0).images.shape == (2, 32, 32, 3)


# -- training loop -----------------------------------------------------


def _config(kind=SOFTMAX, steps=20, depth=1, optimizer=None, **kwargs):
    attn = AttentionConfig(embed_dim=16, num_heads=2, score_kind=kind)
    demo = DemoConfig(depth=depth, attention=attn, patch_size=2,
                      input_shape=(8, 8, 1), num_classes=3)
    dataset = SyntheticSpec(num_classes=3, samples_per_class=20)
    return TrainConfig(demo=demo, dataset=dataset, steps=steps,
                       batch_size=8, seed=5,
                       optimizer=optimizer or AdamSpec(), **kwargs)


def test_train_records_every_step_and_evaluates():
    log = train(_config(steps=15))
    assert len(log.records) == 15
    assert log.breakdown is None
    assert 0.0 <= log.final_eval_accuracy <= 1.0
    assert log.records[0].step == 1 and log.records[-1].step == 15
    assert all(np.isfinite(r.loss) for r in log.records)
    # Adam on an easy 3-class task should make clear progress.
    assert log.records[-1].loss < log.records[0].loss


def test_train_is_deterministic():
    a = train(_config(steps=10))
    b = train(_config(steps=10))
    assert [r.loss for r in a.records] == [r.loss for r in b.records]
    assert a.final_eval_accuracy == b.final_eval_accuracy


def test_train_with_sgd():
    log = train(_config(steps=5, optimizer=SgdSpec(lr=1e-3)))
    assert len(log.records) == 5


def test_train_breakdown_is_a_result_not_an_exception():
    # Depth-2 sin-max reliably hits sustained gradient-norm runaway.
    attn = AttentionConfig(embed_dim=32, num_heads=2, score_kind=SIN_MAX)
    demo = DemoConfig(depth=2, attention=attn, patch_size=2,
                      input_shape=(8, 8, 1), num_classes=10)
    cfg = TrainConfig(demo=demo, dataset=SyntheticSpec(), steps=60, seed=7)
    log = train(cfg)
    assert log.breakdown is not None
    assert log.breakdown.cause in ("NonFiniteLoss", "ScoreError",
                                   "GradNormRunaway")
    assert log.final_eval_accuracy is None
    assert len(log.records) < 60


def test_train_taps_fire_on_schedule():
    log = train(_config(steps=6, tap_every=3, tap_cap=7))
    steps = sorted({rec.step for rec in log.taps})
    assert steps == [3, 6]
    assert all(len(rec.samples) <= 7 for rec in log.taps)


def test_config_validation():
    with pytest.raises(ValueError):
        _config(steps=0)
    with pytest.raises(ValueError):
        cfg = _config()
        cfg.batch_size = 1
        cfg.__post_init__()


# -- tap aggregation ---------------------------------------------------


def _tap(step, layer, samples):
    return GradientTapRecord(step=step, layer_index=layer,
                             samples=samples, sample_cap=100)


def test_aggregate_taps_bins_and_clamps():
    taps = [_tap(1, 0, [(-0.5, 1.0), (0.5, 3.0), (99.0, 5.0)])]
    hists = aggregate_taps(taps, bin_count=2, x_range=(-1.0, 1.0))
    assert len(hists) == 1
    bins = hists[0].bins
    assert bins[0]["count"] == 1 and bins[0]["mean_abs_grad"] == 1.0
    # The out-of-range sample clamps into the upper edge bin.
    assert bins[1]["count"] == 2 and bins[1]["mean_abs_grad"] == 4.0
    assert bins[0]["x_center"] == -0.5 and bins[1]["x_center"] == 0.5


def test_aggregate_taps_groups_by_step_and_layer():
    taps = [_tap(1, 0, [(0.0, 1.0)]), _tap(1, 1, [(0.0, 2.0)]),
            _tap(2, 0, [(0.0, 3.0)])]
    hists = aggregate_taps(taps, bin_count=2, x_range=(-1.0, 1.0))
    assert [(h.step, h.layer_index) for h in hists] == [(1, 0), (1, 1), (2, 0)]


def test_aggregate_taps_validates_arguments():
    with pytest.raises(ValueError):
        aggregate_taps([], bin_count=1, x_range=(-1.0, 1.0))
    with pytest.raises(ValueError):
        aggregate_taps([], bin_count=4, x_range=(1.0, -1.0))


# -- serialization -----------------------------------------------------


def test_run_log_roundtrip_completed(tmp_path):
    log = TrainRunLog(records=[StepRecord(1, 0.5, 0.25, 2.0),
                               StepRecord(2, 0.4, 0.5, 1.5)],
                      final_eval_accuracy=0.75)
    path = tmp_path / "run.jsonl"
    write_run_log(log, path)
    back = read_run_log(path)
    assert back.final_eval_accuracy == 0.75
    assert back.breakdown is None
    assert [(r.step, r.loss, r.train_accuracy, r.grad_norm)
            for r in back.records] == [(1, 0.5, 0.25, 2.0), (2, 0.4, 0.5, 1.5)]


def test_run_log_roundtrip_breakdown(tmp_path):
    log = TrainRunLog(records=[StepRecord(1, 0.5, 0.25, 2.0)],
                      breakdown=Breakdown(step=2, cause="GradNormRunaway"))
    path = tmp_path / "run.jsonl"
    write_run_log(log, path)
    back = read_run_log(path)
    assert back.breakdown.step == 2
    assert back.breakdown.cause == "GradNormRunaway"
    assert back.final_eval_accuracy is None


def test_taps_roundtrip(tmp_path):
    taps = [_tap(3, 1, [(0.25, -1.5), (2.0, 0.0)])]
    path = tmp_path / "taps.jsonl"
    write_taps(taps, path)
    back = read_taps(path)
    assert back[0].step == 3 and back[0].layer_index == 1
    assert back[0].samples == [(0.25, -1.5), (2.0, 0.0)]
    assert back[0].sample_cap == 100


def test_write_histograms_csv(tmp_path):
    hist = GradientHistogram(step=2, layer_index=0, bins=[
        {"x_center": -0.5, "mean_abs_grad": 1.25, "count": 3}])
    path = tmp_path / "hist.csv"
    write_histograms([hist], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,layer,x_center,mean_abs_grad,count"
    assert lines[1] == "2,0,-0.5,1.25,3"
