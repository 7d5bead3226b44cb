"""Training harness: datasets, the loop, breakdown detection, tap binning.

Breakdowns (non-finite loss, a score-function guard firing inside a
block, or sustained gradient-norm runaway) end the run early and are
recorded as results, not raised as failures.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as tinynn
from .autodiff import cross_entropy
from .model import BreakdownSignal, DemoConfig, GradientTapRecord

GRAD_RUNAWAY_NORM = 1e6
GRAD_RUNAWAY_STEPS = 10

CIFAR_RECORD_BYTES = 3074  # coarse byte + fine byte + 3*32*32 pixels


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass
class Dataset:
    images: np.ndarray   # (N, H, W, C), float64 in [0, 1]-ish range
    labels: np.ndarray   # (N,) integer class ids
    train_idx: np.ndarray
    eval_idx: np.ndarray


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 100
    noise_sd: float = 0.1


@dataclass
class Cifar100Spec:
    path: str
    subset_size: int = 512


@dataclass
class AdamSpec:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class SgdSpec:
    lr: float = 1e-2
    momentum: float = 0.9


@dataclass
class TrainConfig:
    demo: DemoConfig
    dataset: object           # SyntheticSpec or Cifar100Spec
    optimizer: object = field(default_factory=AdamSpec)
    steps: int = 500
    batch_size: int = 16
    seed: int = 7
    tap_every: int = 0        # 0 = taps off
    tap_cap: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


@dataclass
class StepRecord:
    step: int
    loss: float
    train_accuracy: float
    grad_norm: float


@dataclass
class Breakdown:
    step: int
    cause: str  # NonFiniteLoss | ScoreError | GradNormRunaway


@dataclass
class TrainRunLog:
    records: list
    breakdown: Breakdown | None = None
    final_eval_accuracy: float | None = None
    taps: list = field(default_factory=list)


@dataclass
class GradientHistogram:
    step: int
    layer_index: int
    bins: list  # of dicts {x_center, mean_abs_grad, count}


# -- datasets ----------------------------------------------------------


def _split_indices(n):
    # Deterministic 80/20 split: every fifth index goes to eval.
    idx = np.arange(n)
    eval_mask = (idx % 5) == 4
    return idx[~eval_mask], idx[eval_mask]


def make_synthetic(num_classes, samples_per_class, noise_sd, seed):
    """8x8x1 images: seeded class templates plus pixel noise."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = _rng(seed)
    templates = rng.normal(0.0, 1.0, size=(num_classes, 8, 8, 1))
    n = num_classes * samples_per_class
    # Contiguous class blocks so the index-based eval split stays
    # class-balanced.
    labels = np.arange(n) // samples_per_class
    images = templates[labels] + rng.normal(0.0, noise_sd, size=(n, 8, 8, 1))
    train_idx, eval_idx = _split_indices(n)
    return Dataset(images=images, labels=labels,
                   train_idx=train_idx, eval_idx=eval_idx)


class CifarFormatError(ValueError):
    pass


def load_cifar100(path, subset_size):
    """Parse CIFAR-100 binary records (coarse byte, fine byte, CHW pixels).

    Pixels are scaled to [0, 1] and reshaped to HWC; the first
    subset_size records are taken in file order.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise CifarFormatError(
            f"file length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    records = records[:subset_size]
    fine = records[:, 1].astype(np.int64)
    if np.any(fine >= 100):
        bad = int(np.argmax(fine >= 100))
        raise CifarFormatError(f"fine label {fine[bad]} >= 100 in record {bad}")
    pixels = records[:, 2:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    images = pixels.astype(np.float64) / 255.0
    train_idx, eval_idx = _split_indices(len(records))
    return Dataset(images=images, labels=fine,
                   train_idx=train_idx, eval_idx=eval_idx)


def build_dataset(spec, seed):
    if isinstance(spec, SyntheticSpec):
        return make_synthetic(spec.num_classes, spec.samples_per_class,
                              spec.noise_sd, seed)
    if isinstance(spec, Cifar100Spec):
        return load_cifar100(spec.path, spec.subset_size)
    raise TypeError(f"unknown dataset spec {type(spec).__name__}")


# -- optimizers --------------------------------------------------------


class Adam:
    def __init__(self, params, spec):
        self.params = params
        self.spec = spec
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        s = self.spec
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = s.beta1 * self.m[i] + (1 - s.beta1) * g
            self.v[i] = s.beta2 * self.v[i] + (1 - s.beta2) * g * g
            mhat = self.m[i] / (1 - s.beta1 ** self.t)
            vhat = self.v[i] / (1 - s.beta2 ** self.t)
            p.data = p.data - s.lr * mhat / (np.sqrt(vhat) + 1e-8)


class Sgd:
    def __init__(self, params, spec):
        self.params = params
        self.spec = spec
        self.buf = [np.zeros_like(p.data) for p in params]

    def step(self):
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.buf[i] = self.spec.momentum * self.buf[i] + g
            p.data = p.data - self.spec.lr * self.buf[i]


def _make_optimizer(params, spec):
    if isinstance(spec, AdamSpec):
        return Adam(params, spec)
    if isinstance(spec, SgdSpec):
        return Sgd(params, spec)
    raise TypeError(f"unknown optimizer spec {type(spec).__name__}")


# -- training ----------------------------------------------------------


def _eval_accuracy(model, data, idx, batch=64):
    correct = 0
    for start in range(0, idx.size, batch):
        sel = idx[start:start + batch]
        logits = model.forward(data.images[sel]).data
        correct += int((logits.argmax(axis=1) == data.labels[sel]).sum())
    return correct / idx.size if idx.size else float("nan")


def train(cfg):
    """Run the loop; failures become breakdown entries in the log."""
    data = build_dataset(cfg.dataset, cfg.seed)
    model = tinynn.build_demo(cfg.demo, cfg.seed)
    opt = _make_optimizer(model.parameters(), cfg.optimizer)
    batch_rng = _rng(cfg.seed + 1)
    log = TrainRunLog(records=[])
    runaway_streak = 0

    for step in range(1, cfg.steps + 1):
        sel = batch_rng.choice(data.train_idx, size=cfg.batch_size,
                               replace=False)
        tapping = cfg.tap_every > 0 and step % cfg.tap_every == 0
        if tapping:
            model.enable_taps(cfg.tap_cap, cfg.seed + step)
        else:
            model.disable_taps()
        model.zero_grad()
        try:
            logits = model.forward(data.images[sel], step=step)
            loss = cross_entropy(logits, data.labels[sel])
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                log.breakdown = Breakdown(step=step, cause="NonFiniteLoss")
                return log
            loss.backward()
        except BreakdownSignal:
            log.breakdown = Breakdown(step=step, cause="ScoreError")
            return log
        if tapping:
            log.taps.extend(model.drain_taps())
        grad_sq = 0.0
        for p in model.parameters():
            if p.grad is not None:
                grad_sq += float((p.grad * p.grad).sum())
        grad_norm = math.sqrt(grad_sq)
        if not math.isfinite(grad_norm):
            log.breakdown = Breakdown(step=step, cause="NonFiniteLoss")
            return log
        acc = float((logits.data.argmax(axis=1) == data.labels[sel]).mean())
        log.records.append(StepRecord(step=step, loss=loss_val,
                                      train_accuracy=acc,
                                      grad_norm=grad_norm))
        if grad_norm > GRAD_RUNAWAY_NORM:
            runaway_streak += 1
            if runaway_streak >= GRAD_RUNAWAY_STEPS:
                log.breakdown = Breakdown(step=step, cause="GradNormRunaway")
                return log
        else:
            runaway_streak = 0
        opt.step()

    log.final_eval_accuracy = _eval_accuracy(model, data, data.eval_idx)
    return log


# -- tap aggregation ---------------------------------------------------


def aggregate_taps(taps, bin_count, x_range):
    """Uniformly bin tapped (x, grad) pairs per (step, layer).

    Out-of-range x values are clamped into the edge bins.
    """
    if bin_count < 2:
        raise ValueError("bin_count must be >= 2")
    lo, hi = x_range
    if not lo < hi:
        raise ValueError("x_range must be increasing")
    groups = {}
    for rec in taps:
        groups.setdefault((rec.step, rec.layer_index), []).extend(rec.samples)
    histograms = []
    width = (hi - lo) / bin_count
    centers = lo + (np.arange(bin_count) + 0.5) * width
    for (step, layer), samples in sorted(groups.items()):
        xs = np.array([s[0] for s in samples])
        gs = np.abs([s[1] for s in samples])
        which = np.clip(((xs - lo) / width).astype(int), 0, bin_count - 1)
        bins = []
        for b in range(bin_count):
            mask = which == b
            count = int(mask.sum())
            mean_abs = float(gs[mask].mean()) if count else 0.0
            bins.append({"x_center": float(centers[b]),
                         "mean_abs_grad": mean_abs, "count": count})
        histograms.append(GradientHistogram(step=step, layer_index=layer,
                                            bins=bins))
    return histograms


# -- serialization -----------------------------------------------------


def write_run_log(log, path):
    """JSON Lines: one object per step, then the terminal object."""
    with open(path, "w") as fh:
        for r in log.records:
            fh.write(json.dumps({"step": r.step, "loss": r.loss,
                                 "acc": r.train_accuracy,
                                 "grad_norm": r.grad_norm}) + "\n")
        if log.breakdown is not None:
            fh.write(json.dumps({"breakdown": {
                "step": log.breakdown.step,
                "cause": log.breakdown.cause}}) + "\n")
        else:
            fh.write(json.dumps(
                {"final_eval_accuracy": log.final_eval_accuracy}) + "\n")


def read_run_log(path):
    log = TrainRunLog(records=[])
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            if "breakdown" in obj:
                log.breakdown = Breakdown(step=obj["breakdown"]["step"],
                                          cause=obj["breakdown"]["cause"])
            elif "final_eval_accuracy" in obj:
                log.final_eval_accuracy = obj["final_eval_accuracy"]
            else:
                log.records.append(StepRecord(
                    step=obj["step"], loss=obj["loss"],
                    train_accuracy=obj["acc"], grad_norm=obj["grad_norm"]))
    return log


def write_taps(taps, path):
    """JSON Lines sidecar for tap records."""
    with open(path, "w") as fh:
        for rec in taps:
            fh.write(json.dumps({"step": rec.step, "layer": rec.layer_index,
                                 "cap": rec.sample_cap,
                                 "samples": rec.samples}) + "\n")


def read_taps(path):
    taps = []
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            taps.append(GradientTapRecord(
                step=obj["step"], layer_index=obj["layer"],
                samples=[tuple(s) for s in obj["samples"]],
                sample_cap=obj["cap"]))
    return taps


def write_histograms(histograms, path):
    with open(path, "w") as fh:
        fh.write("step,layer,x_center,mean_abs_grad,count\n")
        for h in histograms:
            for b in h.bins:
                fh.write(f"{h.step},{h.layer_index},{b['x_center']!r},"
                         f"{b['mean_abs_grad']!r},{b['count']}\n")
