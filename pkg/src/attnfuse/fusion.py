"""Attention fusion: how source-video structure is carried into an edit.

During the editing pass the denoiser's attention maps are rewritten
from the inversion store.  Cross-attention columns of tokens shared by
both prompts are replaced with the source columns; self-attention rows
are switched between edit and source by a binary mask thresholded from
the source prompt's cross-attention.  Both rewrites only apply inside
a configured window of denoising steps.

Step pairing: the denoising step t (counting T down to 1) traverses the
same arc of the schedule that inversion step t-1 recorded, so every
store lookup here uses t-1.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation
from .model import KIND_CROSS, KIND_SELF
from .numerics import maxnorm_frame, require
from .store import AttentionStore

MODES = ("style", "attribute", "shape", "removal", "enhancement")

# Preset windows and threshold per editing mode: (t_s, t_c, tau).
_PRESETS = {
    "style": (0.2, 0.3, 1.0),
    "attribute": (0.2, 0.3, 1.0),
    "enhancement": (0.2, 0.3, 1.0),
    "shape": (0.5, 0.5, 0.3),
    "removal": (0.5, 0.5, 0.3),
}

DEFAULT_S_CFG = 7.5

# Tolerance for the window boundary so that fractions like 0.3 * T land
# on the intended integer step despite float dust.
_WINDOW_EPS = 1e-9


@dataclass(frozen=True)
class EditConfig:
    """Fusion windows, mask threshold, guidance scale, and editing mode.

    t_s and t_c are fractions of T: self-attention blending applies at
    denoising steps t >= t_s * T, cross-attention fusion at t >= t_c * T
    (t counts T down to 1, so smaller fractions fuse longer).
    """

    t_s: float
    t_c: float
    tau: float
    s_cfg: float = DEFAULT_S_CFG
    mode: str = "style"

    def __post_init__(self):
        require(0.0 <= self.t_s <= 1.0, f"t_s must lie in [0, 1], got {self.t_s}")
        require(0.0 <= self.t_c <= 1.0, f"t_c must lie in [0, 1], got {self.t_c}")
        require(0.0 <= self.tau <= 1.0, f"tau must lie in [0, 1], got {self.tau}")
        require(self.s_cfg >= 0.0, f"s_cfg must be >= 0, got {self.s_cfg}")
        require(self.mode in MODES, f"mode must be one of {MODES}, got {self.mode!r}")


def preset(mode: str) -> EditConfig:
    """Default configuration for an editing mode."""
    require(mode in MODES, f"unknown preset {mode!r}; choose from {MODES}")
    t_s, t_c, tau = _PRESETS[mode]
    return EditConfig(t_s=t_s, t_c=t_c, tau=tau, s_cfg=DEFAULT_S_CFG, mode=mode)


@dataclass(frozen=True)
class PromptAlignment:
    """Token correspondence between source and edit prompts.

    matched holds (source_index, edit_index) pairs; edited_positions are
    edit-side tokens with no source counterpart; removed_positions are
    source-side tokens with no edit counterpart.
    """

    matched: tuple[tuple[int, int], ...]
    edited_positions: tuple[int, ...]
    removed_positions: tuple[int, ...]

    def __post_init__(self):
        src_seen = [i for i, _ in self.matched]
        edit_seen = [j for _, j in self.matched]
        require(len(set(src_seen)) == len(src_seen), "source index matched twice")
        require(len(set(edit_seen)) == len(edit_seen), "edit index matched twice")
        require(not (set(src_seen) & set(self.removed_positions)),
                "matched source index listed as removed")
        require(not (set(edit_seen) & set(self.edited_positions)),
                "matched edit index listed as edited")


def align_prompts(src_tokens: tuple[str, ...] | list[str],
                  edit_tokens: tuple[str, ...] | list[str]) -> PromptAlignment:
    """Longest-common-subsequence alignment over token strings.

    Ties in the LCS backtrack are broken by preferring the earliest
    source token, which keeps the result deterministic.
    """
    src = list(src_tokens)
    edit = list(edit_tokens)
    m, n = len(src), len(edit)
    dp = np.zeros((m + 1, n + 1), dtype=np.int64)
    for i in range(m - 1, -1, -1):
        for j in range(n - 1, -1, -1):
            if src[i] == edit[j]:
                dp[i, j] = dp[i + 1, j + 1] + 1
            else:
                dp[i, j] = max(dp[i + 1, j], dp[i, j + 1])
    matched = []
    i = j = 0
    while i < m and j < n:
        if src[i] == edit[j] and dp[i, j] == dp[i + 1, j + 1] + 1:
            matched.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1, j] >= dp[i, j + 1]:
            i += 1
        else:
            j += 1
    matched_src = {i for i, _ in matched}
    matched_edit = {j for _, j in matched}
    return PromptAlignment(
        matched=tuple(matched),
        edited_positions=tuple(j for j in range(n) if j not in matched_edit),
        removed_positions=tuple(i for i in range(m) if i not in matched_src),
    )


def identity_alignment(n_tokens: int) -> PromptAlignment:
    """Alignment of a prompt with itself."""
    return PromptAlignment(matched=tuple((i, i) for i in range(n_tokens)),
                           edited_positions=(), removed_positions=())


def window_active(t: int, frac: float, T: int) -> bool:
    """True when denoising step t falls inside a window fraction of T."""
    return t >= frac * T - _WINDOW_EPS


def source_step(t: int) -> int:
    """Inversion step that recorded the arc traversed by denoise step t."""
    return t - 1


@dataclass(frozen=True)
class BlendMask:
    """Binary per-pixel mask, one row of h*w entries per frame."""

    mask: np.ndarray

    def __post_init__(self):
        require(self.mask.ndim == 2, f"blend mask must be 2-D, got {self.mask.shape}")
        require(self.mask.dtype == np.bool_, "blend mask must be boolean")


def fuse_cross(c_edit: np.ndarray, store: AttentionStore,
               alignment: PromptAlignment, t: int, layer: int,
               cfg: EditConfig, T: int) -> np.ndarray:
    """Pull matched token columns of a cross-attention map from the store.

    Active at denoising steps t >= t_c * T; outside the window the input
    is returned unchanged.  Matched columns are replaced by the source
    columns recorded at inversion step t-1, edit-only columns keep their
    values, and rows are renormalized to sum to one.  When the prompts
    align completely the renormalization is skipped, so an identity edit
    reproduces the stored map bit for bit.
    """
    if not window_active(t, cfg.t_c, T):
        return c_edit
    src = store.query(source_step(t), layer, KIND_CROSS).attn
    require(c_edit.ndim == 4, f"cross map must be 4-D, got {c_edit.shape}")
    require(src.shape[:3] == c_edit.shape[:3],
            f"source/edit map geometry differs: {src.shape} vs {c_edit.shape}")
    n_edit_cols = c_edit.shape[-1]
    for i_src, j_edit in alignment.matched:
        require(0 <= i_src < src.shape[-1],
                f"matched source column {i_src} outside map with {src.shape[-1]} columns")
        require(0 <= j_edit < n_edit_cols,
                f"matched edit column {j_edit} outside map with {n_edit_cols} columns")

    if not alignment.edited_positions and not alignment.removed_positions \
            and len(alignment.matched) == n_edit_cols:
        if all(i == j for i, j in alignment.matched):
            return src
        fused = np.empty_like(src)
        for i_src, j_edit in alignment.matched:
            fused[..., j_edit] = src[..., i_src]
        return fused

    fused = c_edit.copy()
    for i_src, j_edit in alignment.matched:
        fused[..., j_edit] = src[..., i_src]
    sums = fused.sum(axis=-1, keepdims=True)
    require(bool(np.all(sums > 0.0)), "fused cross map has a non-positive row sum")
    return fused / sums


def build_blend_mask(store: AttentionStore, t: int, layer: int,
                     word_positions: tuple[int, ...], tau: float) -> BlendMask:
    """Threshold the stored cross map at inversion step t into a mask.

    Head-averaged attention is summed over *word_positions* columns,
    max-normalized per frame, and compared against tau with a strict
    inequality, so tau = 1.0 yields the empty mask.
    """
    require(len(word_positions) >= 1, "mask needs at least one word position")
    require(len(set(word_positions)) == len(word_positions),
            f"duplicate word positions: {word_positions}")
    rec = store.query(t, layer, KIND_CROSS)
    n_cols = rec.attn.shape[-1]
    for p in word_positions:
        require(0 <= p < n_cols,
                f"word position {p} outside map with {n_cols} columns")
    agg = rec.attn.mean(axis=1)[..., list(word_positions)].sum(axis=-1)
    return BlendMask(mask=maxnorm_frame(agg) > tau)


def blend_self(s_edit: np.ndarray, store: AttentionStore, t: int, layer: int,
               mask: BlendMask, cfg: EditConfig, T: int) -> np.ndarray:
    """Swap self-attention rows between edit and source by the mask.

    Active at denoising steps t >= t_s * T; outside the window the input
    is returned unchanged.  Inside, each query pixel takes the edit row
    where the mask is 1 and the source row (inversion step t-1) where it
    is 0.  Selection is exact: an all-zero mask returns the stored map
    bit for bit.
    """
    if not window_active(t, cfg.t_s, T):
        return s_edit
    src = store.query(source_step(t), layer, KIND_SELF).attn
    require(s_edit.shape == src.shape,
            f"self map shapes differ: {s_edit.shape} vs {src.shape}")
    n, _, q, _ = s_edit.shape
    require(mask.mask.shape == (n, q),
            f"mask shape {mask.mask.shape} != (frames, pixels) ({n}, {q})")
    return np.where(mask.mask[:, None, :, None], s_edit, src)


def mask_positions(alignment: PromptAlignment) -> tuple[int, ...]:
    """Source-token columns the blend mask is built from.

    The stored cross maps are indexed by source tokens, so the mask
    follows the source-side tokens that the edit drops (a substituted or
    removed object).  With nothing dropped there is nothing to re-layout
    and the mask is empty, meaning the source rows win everywhere.
    """
    return alignment.removed_positions
