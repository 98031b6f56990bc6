"""Toy latent-video denoiser with fully inspectable attention.

The network is deliberately small and deterministic: per-pixel tokens go
through an input projection, a stack of blocks (spatiotemporal
self-attention, cross-attention to the prompt, pointwise MLP, each with
a residual add), and an output projection back to latent channels.

Two properties matter more than capacity here.  First, every
post-softmax attention map is offered to an optional probe before it
multiplies the values, which is what the editing machinery hooks into.
Second, all randomness flows from explicit seeds, so identical inputs
give bit-identical outputs.

Self-attention is inflated across time: each frame's queries attend
over the keys of the middle frame (index n // 2) concatenated with the
frame's own keys, which anchors every frame's layout to one shared
reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import blobio
from .errors import ContractViolation
from .numerics import (SeededRng, check_finite, derived_seed, fnv1a64,
                       require, softmax_lastdim)

START_TOKEN = "<start>"
POS_DIM = 8          # 2D sinusoidal position features per pixel token
TIME_DIM = 8         # sinusoidal features of normalized timestep
MLP_RATIO = 2
ORACLE_GAIN = 8.0    # query gain of the palette oracle; keeps >=0.9 mass

KIND_SELF = "self"
KIND_CROSS = "cross"

Probe = Callable[["AttentionRecord"], Optional[np.ndarray]]


@dataclass(frozen=True)
class ModelConfig:
    """Static geometry of the denoiser.

    n: frames, h/w: latent height/width, c: latent channels.
    d_model must equal heads * d_head.
    """

    n: int
    h: int
    w: int
    c: int
    d_model: int
    heads: int
    d_head: int
    blocks: int
    d_text: int
    seed: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            require(isinstance(v, int), f"config field {f.name} must be int, got {v!r}")
            if f.name != "seed":
                require(v >= 1, f"config field {f.name} must be >= 1, got {v}")
        require(self.d_model == self.heads * self.d_head,
                f"d_model {self.d_model} != heads {self.heads} * d_head {self.d_head}")


def config_hash(cfg: ModelConfig) -> int:
    canon = ",".join(f"{f.name}={getattr(cfg, f.name)}" for f in fields(cfg))
    return fnv1a64(canon)


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercased word tokens with punctuation split off as single tokens."""
    import re
    return tuple(re.findall(r"[\w']+|[^\w\s]", text.lower()))


@dataclass(frozen=True)
class PromptEmbedding:
    """Token strings (start token first) and their d_text vectors."""

    tokens: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        require(len(self.tokens) >= 1 and self.tokens[0] == START_TOKEN,
                "prompt embedding must start with the reserved start token")
        require(self.vectors.shape[0] == len(self.tokens),
                f"token/vector count mismatch: {len(self.tokens)} vs {self.vectors.shape}")


def token_vector(token: str, d_text: int) -> np.ndarray:
    """Deterministic embedding of one token: hash-seeded standard normal."""
    rng = SeededRng(fnv1a64(f"token:{token}"))
    return rng.standard_normal(d_text)


def embed_prompt(text: str, cfg: ModelConfig) -> PromptEmbedding:
    """Embed a prompt; the empty string yields the unconditional embedding."""
    tokens = (START_TOKEN,) + tokenize(text)
    vectors = np.stack([token_vector(tok, cfg.d_text) for tok in tokens])
    vectors.setflags(write=False)
    return PromptEmbedding(tokens=tokens, vectors=vectors)


@dataclass(frozen=True)
class AttentionRecord:
    """One post-softmax attention map with its provenance."""

    t: int
    layer: int
    kind: str
    attn: np.ndarray  # (n, heads, queries, keys)

    def __post_init__(self):
        require(self.kind in (KIND_SELF, KIND_CROSS),
                f"record kind must be self/cross, got {self.kind!r}")
        require(self.attn.ndim == 4,
                f"attention map must be 4-D (n, heads, q, k), got {self.attn.shape}")

    def validate_rows(self, tol: float = 1e-9) -> "AttentionRecord":
        sums = self.attn.sum(axis=-1)
        worst = float(np.abs(sums - 1.0).max())
        require(worst <= tol,
                f"{self.kind} map at t={self.t} layer={self.layer}: "
                f"rows deviate from 1 by {worst:.3e} (tol {tol:.0e})")
        return self


@dataclass(frozen=True)
class BlockWeights:
    wq_s: np.ndarray
    wk_s: np.ndarray
    wv_s: np.ndarray
    wq_c: np.ndarray
    wk_c: np.ndarray
    wv_c: np.ndarray
    w_mlp_in: np.ndarray
    w_mlp_out: np.ndarray


@dataclass(frozen=True)
class DenoiserWeights:
    config: ModelConfig
    w_in: np.ndarray
    blocks: tuple[BlockWeights, ...]
    w_out: np.ndarray
    time_freq: np.ndarray
    time_phase: np.ndarray


def _init(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    arr = rng.standard_normal((rows, cols)) / math.sqrt(rows)
    arr.setflags(write=False)
    return arr


def _time_table(d: int) -> tuple[np.ndarray, np.ndarray]:
    # Low frequencies keep the predicted noise smooth in t, which is what
    # makes finer schedules reconstruct better.
    freq = 0.5 * (1.0 + np.arange(d, dtype=np.float64))
    phase = (math.pi / 4.0) * np.arange(d, dtype=np.float64)
    freq.setflags(write=False)
    phase.setflags(write=False)
    return freq, phase


def make_denoiser_weights(cfg: ModelConfig) -> DenoiserWeights:
    """Seeded random weights; the draw order is fixed and documented.

    Order: w_in, then per block (wq_s, wk_s, wv_s, wq_c, wk_c, wv_c,
    w_mlp_in, w_mlp_out), then w_out.  All matrices are standard normal
    scaled by 1/sqrt(fan_in).
    """
    rng = SeededRng(derived_seed(cfg.seed, "weights"))
    d_in = cfg.c + POS_DIM + TIME_DIM
    d_ff = MLP_RATIO * cfg.d_model
    w_in = _init(rng, d_in, cfg.d_model)
    blocks = []
    for _ in range(cfg.blocks):
        blocks.append(BlockWeights(
            wq_s=_init(rng, cfg.d_model, cfg.d_model),
            wk_s=_init(rng, cfg.d_model, cfg.d_model),
            wv_s=_init(rng, cfg.d_model, cfg.d_model),
            wq_c=_init(rng, cfg.d_model, cfg.d_model),
            wk_c=_init(rng, cfg.d_text, cfg.d_model),
            wv_c=_init(rng, cfg.d_text, cfg.d_model),
            w_mlp_in=_init(rng, cfg.d_model, d_ff),
            w_mlp_out=_init(rng, d_ff, cfg.d_model),
        ))
    w_out = _init(rng, cfg.d_model, cfg.c)
    freq, phase = _time_table(TIME_DIM)
    return DenoiserWeights(config=cfg, w_in=w_in, blocks=tuple(blocks),
                           w_out=w_out, time_freq=freq, time_phase=phase)


@lru_cache(maxsize=8)
def _posenc(h: int, w: int) -> np.ndarray:
    """2D sinusoidal position features, (h*w, POS_DIM), half-cycle based."""
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    yy = np.repeat(ys, w)
    xx = np.tile(xs, h)
    cols = []
    for axis in (yy, xx):
        for cycles in (1.0, 2.0):
            cols.append(np.sin(math.pi * cycles * axis))
            cols.append(np.cos(math.pi * cycles * axis))
    pos = np.stack(cols, axis=1)
    pos.setflags(write=False)
    return pos


def _time_features(t: int, n_steps: int, weights: DenoiserWeights) -> np.ndarray:
    tau = t / n_steps
    return np.sin(2.0 * math.pi * weights.time_freq * tau + weights.time_phase)


def _split_heads(x: np.ndarray, heads: int, d_head: int) -> np.ndarray:
    n, q, _ = x.shape
    return x.reshape(n, q, heads, d_head).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    n, heads, q, d_head = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, q, heads * d_head)


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, d_head: int,
           transform: Callable[[np.ndarray], np.ndarray] | None = None
           ) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention; returns (output, post-softmax map).

    Leading axes broadcast.  *transform*, when given, is applied to the
    map between the softmax and the value multiply; this is the seam the
    probe machinery uses.
    """
    require(d_head >= 1, f"d_head must be >= 1, got {d_head}")
    require(q.shape[-1] == d_head and k.shape[-1] == d_head,
            f"d_head {d_head} does not match Q/K last dims {q.shape} / {k.shape}")
    require(k.shape[-2] == v.shape[-2],
            f"K/V key counts differ: {k.shape} vs {v.shape}")
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(d_head)
    attn = softmax_lastdim(logits)
    if transform is not None:
        attn = transform(attn)
    return np.matmul(attn, v), attn


def spatiotemporal_attend(feats: np.ndarray, block: BlockWeights,
                          heads: int, d_head: int,
                          transform: Callable[[np.ndarray], np.ndarray] | None = None
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Self-attention over [middle frame; own frame] keys and values.

    feats: (n, h*w, d_model).  Returns (out (n, h*w, d_model),
    map (n, heads, h*w, 2*h*w)).  The middle frame is index n // 2; its
    keys come first in the concatenation.
    """
    n = feats.shape[0]
    q = _split_heads(feats @ block.wq_s, heads, d_head)
    k = _split_heads(feats @ block.wk_s, heads, d_head)
    v = _split_heads(feats @ block.wv_s, heads, d_head)
    mid = n // 2
    k_mid = np.broadcast_to(k[mid], k.shape)
    v_mid = np.broadcast_to(v[mid], v.shape)
    keys = np.concatenate([k_mid, k], axis=2)
    vals = np.concatenate([v_mid, v], axis=2)
    out, attn = attend(q, keys, vals, d_head, transform=transform)
    return _merge_heads(out), attn


def _offer(probe: Probe | None, records: list[AttentionRecord],
           t: int, layer: int, kind: str, attn: np.ndarray) -> np.ndarray:
    attn.setflags(write=False)
    applied = attn
    if probe is not None:
        replacement = probe(AttentionRecord(t=t, layer=layer, kind=kind, attn=attn))
        if replacement is not None:
            replacement = np.asarray(replacement, dtype=np.float64)
            require(replacement.shape == attn.shape,
                    f"probe replacement shape {replacement.shape} != map shape {attn.shape}"
                    f" ({kind}, t={t}, layer={layer})")
            check_finite("probe replacement", replacement)
            worst = float(np.abs(replacement.sum(axis=-1) - 1.0).max())
            require(worst <= 1e-6,
                    f"probe replacement rows deviate from 1 by {worst:.3e} "
                    f"({kind}, t={t}, layer={layer})")
            if replacement.base is not None or replacement.flags.writeable:
                replacement = replacement.copy()
            replacement.setflags(write=False)
            applied = replacement
    records.append(AttentionRecord(t=t, layer=layer, kind=kind, attn=applied))
    return applied


def denoiser_forward(z_t: np.ndarray, t: int, prompt: PromptEmbedding,
                     weights: DenoiserWeights, n_steps: int,
                     probe: Probe | None = None
                     ) -> tuple[np.ndarray, list[AttentionRecord]]:
    """Predict noise for a latent video at timestep t.

    Returns (eps, records) where records holds the attention maps that
    were actually applied, in (layer, self-then-cross) order.  n_steps
    normalizes t for the timestep features; pass the schedule's T.
    """
    cfg = weights.config
    z_t = np.asarray(z_t, dtype=np.float64)
    require(z_t.shape == (cfg.n, cfg.c, cfg.h, cfg.w),
            f"latent shape {z_t.shape} != config ({cfg.n}, {cfg.c}, {cfg.h}, {cfg.w})")
    check_finite("denoiser input", z_t)
    require(0 <= t <= n_steps, f"timestep {t} outside [0, {n_steps}]")
    require(prompt.vectors.shape[1] == cfg.d_text,
            f"prompt dim {prompt.vectors.shape[1]} != d_text {cfg.d_text}")

    n, c, h, w = z_t.shape
    hw = h * w
    zc = z_t.reshape(n, c, hw).transpose(0, 2, 1)
    pos = np.broadcast_to(_posenc(h, w), (n, hw, POS_DIM))
    temb = np.broadcast_to(_time_features(t, n_steps, weights), (n, hw, TIME_DIM))
    x = np.concatenate([zc, pos, temb], axis=-1) @ weights.w_in

    records: list[AttentionRecord] = []
    kv = prompt.vectors
    for layer, bw in enumerate(weights.blocks):
        s_out, _ = spatiotemporal_attend(
            x, bw, cfg.heads, cfg.d_head,
            transform=lambda a, _l=layer: _offer(probe, records, t, _l, KIND_SELF, a))
        x = x + s_out
        qc = _split_heads(x @ bw.wq_c, cfg.heads, cfg.d_head)
        kc = _split_heads((kv @ bw.wk_c)[None], cfg.heads, cfg.d_head)
        vc = _split_heads((kv @ bw.wv_c)[None], cfg.heads, cfg.d_head)
        c_out, _ = attend(
            qc, kc, vc, cfg.d_head,
            transform=lambda a, _l=layer: _offer(probe, records, t, _l, KIND_CROSS, a))
        x = x + _merge_heads(c_out)
        x = x + np.tanh(x @ bw.w_mlp_in) @ bw.w_mlp_out

    eps = (x @ weights.w_out).transpose(0, 2, 1).reshape(n, c, h, w)
    return check_finite("predicted noise", eps), records


def encode_color(color: Sequence[float]) -> np.ndarray:
    """Map 0..255 channel values onto the [-1, 1] latent range."""
    arr = np.asarray(color, dtype=np.float64)
    require(bool(np.all((arr >= 0) & (arr <= 255))),
            f"color channels must lie in 0..255, got {list(arr)}")
    return arr / 127.5 - 1.0


def make_oracle_denoiser(cfg: ModelConfig,
                         palette: Mapping[str, Sequence[float]]) -> DenoiserWeights:
    """Single-block denoiser whose cross-attention reads off pixel color.

    Keys are built from palette colors (token -> channel values), queries
    from the raw latent channels, with gain chosen so a pixel puts more
    than 0.9 of its attention mass on the token matching its color.  The
    color comparison is replicated into every head (hence d_head >= c),
    so the head-averaged map separates colors as sharply as each head.
    A black palette token absorbs background pixels the same way.  All
    other weights are zero, so self-attention is uniform and the noise
    prediction is identically zero.
    """
    require(cfg.blocks == 1, f"oracle denoiser is single-block, config has {cfg.blocks}")
    require(cfg.d_head >= cfg.c,
            f"oracle needs d_head >= c, got {cfg.d_head} < {cfg.c}")
    require(1 <= len(palette) <= cfg.d_text,
            f"palette size {len(palette)} outside 1..{cfg.d_text}")
    d_in = cfg.c + POS_DIM + TIME_DIM
    d_ff = MLP_RATIO * cfg.d_model

    tokens = list(palette)
    for tok in tokens:
        require(tokenize(tok) == (tok,),
                f"palette key {tok!r} must be a single lowercase token")
        require(len(palette[tok]) == cfg.c,
                f"palette color for {tok!r} must have {cfg.c} channels")
    embeds = np.stack([token_vector(tok, cfg.d_text) for tok in tokens])
    colors = np.stack([encode_color(palette[tok]) for tok in tokens])
    targets = np.zeros((len(tokens), cfg.d_model))
    gain = np.eye(cfg.c) * ORACLE_GAIN * math.sqrt(cfg.d_head)
    wq_c = np.zeros((cfg.d_model, cfg.d_model))
    for head in range(cfg.heads):
        lo = head * cfg.d_head
        targets[:, lo:lo + cfg.c] = colors
        wq_c[:cfg.c, lo:lo + cfg.c] = gain
    wk_c, *_ = np.linalg.lstsq(embeds, targets, rcond=None)

    w_in = np.zeros((d_in, cfg.d_model))
    w_in[:cfg.c, :cfg.c] = np.eye(cfg.c)

    zeros_mm = np.zeros((cfg.d_model, cfg.d_model))
    block = BlockWeights(
        wq_s=zeros_mm, wk_s=zeros_mm.copy(), wv_s=zeros_mm.copy(),
        wq_c=wq_c, wk_c=wk_c, wv_c=np.zeros((cfg.d_text, cfg.d_model)),
        w_mlp_in=np.zeros((cfg.d_model, d_ff)),
        w_mlp_out=np.zeros((d_ff, cfg.d_model)),
    )
    freq, phase = _time_table(TIME_DIM)
    weights = DenoiserWeights(config=cfg, w_in=w_in, blocks=(block,),
                              w_out=np.zeros((cfg.d_model, cfg.c)),
                              time_freq=freq, time_phase=phase)
    for arr in _weight_arrays(weights):
        arr.setflags(write=False)
    return weights


def _weight_arrays(weights: DenoiserWeights) -> list[np.ndarray]:
    arrays = [weights.w_in]
    for bw in weights.blocks:
        arrays += [bw.wq_s, bw.wk_s, bw.wv_s, bw.wq_c, bw.wk_c, bw.wv_c,
                   bw.w_mlp_in, bw.w_mlp_out]
    arrays += [weights.w_out, weights.time_freq, weights.time_phase]
    return arrays


def _weight_shapes(cfg: ModelConfig) -> list[tuple[int, ...]]:
    d_in = cfg.c + POS_DIM + TIME_DIM
    d_ff = MLP_RATIO * cfg.d_model
    shapes: list[tuple[int, ...]] = [(d_in, cfg.d_model)]
    per_block = [(cfg.d_model, cfg.d_model)] * 4 + \
                [(cfg.d_text, cfg.d_model)] * 2 + \
                [(cfg.d_model, d_ff), (d_ff, cfg.d_model)]
    shapes += per_block * cfg.blocks
    shapes += [(cfg.d_model, cfg.c), (TIME_DIM,), (TIME_DIM,)]
    return shapes


def save_weights(path: Path, weights: DenoiserWeights) -> None:
    """Serialize weights to the shared blob format (exact round trip)."""
    blobio.write_blob(path, config_hash(weights.config), _weight_arrays(weights))


def load_weights(path: Path, cfg: ModelConfig) -> DenoiserWeights:
    arrays = blobio.read_blob(path, config_hash(cfg), _weight_shapes(cfg))
    w_in = arrays[0]
    blocks = []
    idx = 1
    for _ in range(cfg.blocks):
        blocks.append(BlockWeights(*arrays[idx:idx + 8]))
        idx += 8
    w_out, freq, phase = arrays[idx:idx + 3]
    return DenoiserWeights(config=cfg, w_in=w_in, blocks=tuple(blocks),
                           w_out=w_out, time_freq=freq, time_phase=phase)
