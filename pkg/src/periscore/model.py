"""Attention demo with pluggable score functions.

A small LeViT-flavoured stack: linear patch embedding, `depth` blocks of
[multi-head attention + GELU MLP, both residual], mean pooling, linear
head.  The attention scores go through any of the eleven score-function
kinds, optionally pre-normalized row-wise, and gradient taps can record
(score input, gradient) pairs during backprop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, parameter
from .analysis import EPS_VAR, DegenerateRow
from .scorefn import (
    EPS_DEN,
    DenominatorNearZero,
    NonFiniteInput,
    ScoreError,
    ScoreFunctionKind,
    _is_margin_kind,
    _off_kind,
    _raw_f,
    _raw_fp,
)


class BreakdownSignal(RuntimeError):
    """A ScoreError (or degenerate prenorm row) inside an attention block."""

    def __init__(self, cause, layer_index, step=None):
        super().__init__(f"layer {layer_index}, step {step}: {cause}")
        self.cause = cause
        self.layer_index = layer_index
        self.step = step


@dataclass
class AttentionConfig:
    embed_dim: int
    num_heads: int
    score_kind: ScoreFunctionKind
    score_scale: str = "inv_dmodel"  # or "inv_sqrt_dmodel"
    prenormalize: bool = False

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.score_scale not in ("inv_dmodel", "inv_sqrt_dmodel"):
            raise ValueError(f"unknown score_scale {self.score_scale!r}")


@dataclass
class DemoConfig:
    depth: int
    attention: AttentionConfig
    patch_size: int
    input_shape: tuple  # (H, W, C)
    mlp_ratio: float = 2.0
    num_classes: int = 10

    def __post_init__(self):
        h, w, _ = self.input_shape
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if h % self.patch_size or w % self.patch_size:
            raise ValueError("input height/width must be divisible by patch_size")


@dataclass
class GradientTapRecord:
    step: int
    layer_index: int
    samples: list  # of (input value, dL/d(input)) pairs
    sample_cap: int
    flat_indices: list = field(default_factory=list)


# -- differentiable row ops -------------------------------------------


# Smallest 1 - sin(x) treated as distinct from the pole itself.  The
# normalized siren-max score is a smooth rational function of sin(x)
# right through sin(x) = 1, so the training path evaluates it directly;
# this floor only stops the literal 0-divide when sin(x) rounds to 1.0.
_SIREN_FLOOR = 1e-30


def _siren_f(x):
    s = np.sin(x)
    return (1.0 + s) / np.maximum(2.0 - 2.0 * s, 2.0 * _SIREN_FLOOR)


def _siren_fp(x):
    s = np.sin(x)
    return np.cos(x) / np.maximum(1.0 - s, _SIREN_FLOOR) ** 2


def _train_f(kind, x):
    return _siren_f(x) if kind.tag == "siren-max" else _raw_f(kind, x)


def _train_fp(kind, x):
    return _siren_fp(x) if kind.tag == "siren-max" else _raw_fp(kind, x)


def score_rows(t, kind, tap_sink=None):
    """Apply scores(kind, .) along the last axis of a Tensor.

    Guard violations raise the usual ScoreError subclasses at forward
    time.  Unlike the scalar kernels, siren-max is evaluated through its
    pole (see _SIREN_FLOOR): the normalized score and its gradient stay
    finite and smooth there, so training need not abort.  tap_sink, when
    given, is called during backward with the flat (inputs, gradients)
    arrays of this call site.
    """
    x = t.data
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("non-finite score-function input")
    num = _train_f(kind, x)
    off = _train_f(_off_kind(kind), x) if _is_margin_kind(kind) else num
    denom = off.sum(axis=-1, keepdims=True) - off + num
    if np.any(np.abs(denom) < EPS_DEN):
        raise DenominatorNearZero("score denominator near zero")
    s = num / denom
    out = Tensor(s)
    out._parents = (t,)

    def back(g):
        nump = _train_fp(kind, x)
        offp = _train_fp(_off_kind(kind), x) if _is_margin_kind(kind) else nump
        a = (g * num / denom ** 2).sum(axis=-1, keepdims=True)
        gx = g * nump * (denom - num) / denom ** 2 \
            - offp * (a - g * num / denom ** 2)
        if tap_sink is not None:
            tap_sink(x.ravel(), gx.ravel())
        return ((t, gx),)

    out._backward = back
    return out


def normalize_rows(t):
    """Whiten the last axis of a Tensor (population variance)."""
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    if np.any(var <= EPS_VAR):
        raise DegenerateRow("constant row inside prenormalization")
    sigma = np.sqrt(var)
    z = (x - mu) / sigma
    out = Tensor(z)
    out._parents = (t,)

    def back(g):
        gz = (g - g.mean(axis=-1, keepdims=True)
              - z * (g * z).mean(axis=-1, keepdims=True)) / sigma
        return ((t, gz),)

    out._backward = back
    return out


# -- layers ------------------------------------------------------------


def _linear_init(rng, fan_in, fan_out):
    return parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in),
                                size=(fan_in, fan_out)))


class AttentionBlock:
    def __init__(self, cfg, rng, layer_index):
        d = cfg.embed_dim
        self.cfg = cfg
        self.layer_index = layer_index
        self.wq = _linear_init(rng, d, d)
        self.wk = _linear_init(rng, d, d)
        self.wv = _linear_init(rng, d, d)
        self.wo = _linear_init(rng, d, d)
        self.bq = parameter(np.zeros(d))
        self.bk = parameter(np.zeros(d))
        self.bv = parameter(np.zeros(d))
        self.bo = parameter(np.zeros(d))
        self.last_scores = None   # (B, heads, n, n) numpy, after forward
        self.score_probe = None   # additive offset on raw scores, for tests
        self._tap_sink = None

    def parameters(self):
        return [self.wq, self.bq, self.wk, self.bk,
                self.wv, self.bv, self.wo, self.bo]

    def forward(self, x, step=None):
        cfg = self.cfg
        d, h = cfg.embed_dim, cfg.num_heads
        dh = d // h
        b, n, _ = x.shape

        def split(t):
            return t.reshape(b, n, h, dh).transpose((0, 2, 1, 3))

        q = split(x @ self.wq + self.bq)
        k = split(x @ self.wk + self.bk)
        v = split(x @ self.wv + self.bv)
        scale = 1.0 / d if cfg.score_scale == "inv_dmodel" else 1.0 / math.sqrt(d)
        raw = (q @ k.transpose((0, 1, 3, 2))) * scale
        if self.score_probe is not None:
            raw = raw + Tensor(self.score_probe)
        try:
            if cfg.prenormalize:
                raw = normalize_rows(raw)
            s = score_rows(raw, cfg.score_kind, tap_sink=self._tap_sink)
        except (ScoreError, DegenerateRow) as err:
            raise BreakdownSignal(err, self.layer_index, step) from err
        self.last_scores = s.data.copy()
        out = (s @ v).transpose((0, 2, 1, 3)).reshape(b, n, d)
        return out @ self.wo + self.bo


class MlpBlock:
    def __init__(self, dim, ratio, rng):
        hidden = int(round(dim * ratio))
        self.w1 = _linear_init(rng, dim, hidden)
        self.b1 = parameter(np.zeros(hidden))
        self.w2 = _linear_init(rng, hidden, dim)
        self.b2 = parameter(np.zeros(dim))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, x):
        return (x @ self.w1 + self.b1).gelu() @ self.w2 + self.b2


class DemoModel:
    """Patch embed -> depth x [attention, MLP] (residual) -> pool -> head."""

    def __init__(self, cfg, seed):
        self.cfg = cfg
        rng = np.random.Generator(np.random.Philox(key=seed))
        h, w, c = cfg.input_shape
        p = cfg.patch_size
        self.n_tokens = (h // p) * (w // p)
        patch_dim = p * p * c
        d = cfg.attention.embed_dim
        self.w_embed = _linear_init(rng, patch_dim, d)
        self.b_embed = parameter(np.zeros(d))
        self.blocks = []
        for i in range(cfg.depth):
            self.blocks.append((AttentionBlock(cfg.attention, rng, i),
                                MlpBlock(d, cfg.mlp_ratio, rng)))
        self.w_head = _linear_init(rng, d, cfg.num_classes)
        self.b_head = parameter(np.zeros(cfg.num_classes))
        # Tap state, off by default.
        self._tap_cap = 0
        self._tap_rng = None
        self.tap_records = []

    def parameters(self):
        params = [self.w_embed, self.b_embed]
        for attn, mlp in self.blocks:
            params.extend(attn.parameters())
            params.extend(mlp.parameters())
        params.extend([self.w_head, self.b_head])
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def patchify(self, images):
        """(B, H, W, C) -> (B, n_tokens, patch_dim), non-overlapping patches."""
        images = np.asarray(images, dtype=np.float64)
        b, h, w, c = images.shape
        p = self.cfg.patch_size
        x = images.reshape(b, h // p, p, w // p, p, c)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, self.n_tokens, p * p * c)

    def forward(self, images, step=None):
        x = Tensor(self.patchify(images)) @ self.w_embed + self.b_embed
        for attn, mlp in self.blocks:
            attn._tap_sink = self._make_tap_sink(attn.layer_index, step) \
                if self._tap_cap else None
            x = x + attn.forward(x, step=step)
            x = x + mlp.forward(x)
        pooled = x.mean(axis=1)
        return pooled @ self.w_head + self.b_head

    # -- taps ----------------------------------------------------------

    def enable_taps(self, sample_cap, seed):
        if sample_cap < 1:
            raise ValueError("sample_cap must be >= 1")
        self._tap_cap = sample_cap
        self._tap_rng = np.random.Generator(np.random.Philox(key=seed))
        self.tap_records = []

    def disable_taps(self):
        self._tap_cap = 0
        self._tap_rng = None

    def drain_taps(self):
        records, self.tap_records = self.tap_records, []
        return records

    def _make_tap_sink(self, layer_index, step):
        def sink(xs, gs):
            n = xs.size
            if n <= self._tap_cap:
                idx = np.arange(n)
            else:
                idx = np.sort(self._tap_rng.choice(n, size=self._tap_cap,
                                                   replace=False))
            self.tap_records.append(GradientTapRecord(
                step=step if step is not None else -1,
                layer_index=layer_index,
                samples=[(float(xs[i]), float(gs[i])) for i in idx],
                sample_cap=self._tap_cap,
                flat_indices=[int(i) for i in idx]))
        return sink


def build_demo(cfg, seed):
    return DemoModel(cfg, seed)


def attention_forward(cfg, tokens, params_seed=0):
    """One attention block applied to a (n, d_model) token Tensor."""
    rng = np.random.Generator(np.random.Philox(key=params_seed))
    block = AttentionBlock(cfg, rng, layer_index=0)
    data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    out = block.forward(Tensor(data[None, :, :]))
    return Tensor(out.data[0]), block


def export_attention(model, image):
    """Head-averaged per-layer score matrices for one input image."""
    image = np.asarray(image, dtype=np.float64)
    model.forward(image[None, ...])
    return [attn.last_scores[0].mean(axis=0) for attn, _ in model.blocks]


def tap_scores(model, enabled, sample_cap=100, seed=0):
    """Attach (or detach) gradient taps; returns the live record list."""
    if enabled:
        model.enable_taps(sample_cap, seed)
    else:
        model.disable_taps()
        model.tap_records = []
    return model.tap_records
