"""Command-line front end.

Subcommands: `invert` (archive attention and the inverted latent),
`edit` (inversion followed by a fused editing pass), `reconstruct`
(the identity edit), and `selfcheck` (built-in property suite).

Exit codes: 0 success, 1 contract violation, 2 I/O failure, 3 bad
configuration.  ATTNFUSE_THREADS caps worker threads (0 = sequential).
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import blobio
from .errors import ConfigError, ContractViolation
from .fusion import (EditConfig, MODES, align_prompts, build_blend_mask,
                     mask_positions, preset, source_step, window_active)
from .imageio import quantize, write_pgm
from .model import (ModelConfig, config_hash, embed_prompt,
                    make_denoiser_weights)
from .numerics import SeededRng, derived_seed, maxnorm_frame, require
from .pipeline import (VideoSpec, compute_metrics, invert_video,
                       latent_to_pixels, pixels_to_latent, read_frame_dir,
                       run_denoise, synth_video, write_frame_dir)
from .schedule import (DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS,
                       make_schedule)
from .selfcheck import run_selfcheck

ENV_THREADS = "ATTNFUSE_THREADS"

# section -> key -> (caster, default, help). The parser rejects anything
# not listed here.
_SCHEMA = {
    "model": {
        "frames": (int, 4, "latent frames n"),
        "height": (int, 16, "latent rows"),
        "width": (int, 16, "latent columns"),
        "channels": (int, 1, "latent channels (1 = luminance, 3 = RGB)"),
        "d_model": (int, 16, "token width, must equal heads * d_head"),
        "heads": (int, 2, "attention heads"),
        "d_head": (int, 8, "per-head width"),
        "blocks": (int, 2, "transformer blocks"),
        "d_text": (int, 16, "prompt embedding width"),
        "seed": (int, 0, "master seed for weights and video texture"),
    },
    "schedule": {
        "steps": (int, DEFAULT_STEPS, "diffusion steps T"),
        "beta_start": (float, DEFAULT_BETA_START, "first per-step beta"),
        "beta_end": (float, DEFAULT_BETA_END, "last per-step beta"),
    },
    "edit": {
        "preset": (str, "style", f"editing mode, one of {', '.join(MODES)}"),
        "t_s": (float, None, "self-attention window fraction (preset override)"),
        "t_c": (float, None, "cross-attention window fraction (preset override)"),
        "tau": (float, None, "blend mask threshold (preset override)"),
        "s_cfg": (float, None, "guidance scale (preset override)"),
        "source_prompt": (str, "", "prompt describing the input video"),
        "edit_prompt": (str, "", "prompt describing the desired output"),
    },
    "video": {
        "source": (str, "synth", "synth or dir"),
        "dir": (str, "", "frame directory when source = dir"),
        "shape": (str, "square", "synth object shape: square or disc"),
        "object_color": (str, "red", "synth object color word"),
        "background_color": (str, "black", "synth background color word"),
        "object_size": (int, 3, "synth object half-extent in pixels"),
        "start_row": (int, 8, "synth object start center row"),
        "start_col": (int, 8, "synth object start center column"),
        "step_row": (int, 0, "synth per-frame row motion"),
        "step_col": (int, 1, "synth per-frame column motion"),
    },
}


@dataclass
class RunConfig:
    """Everything one run needs, resolved from file plus flag overrides."""

    model: ModelConfig
    steps: int
    beta_start: float
    beta_end: float
    edit: EditConfig
    source_prompt: str
    edit_prompt: str
    video: VideoSpec | None
    video_dir: Path | None
    seed: int
    out_dir: Path
    workers: int
    echo: dict


def _parse_lines(path: Path) -> dict[str, dict[str, str]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values: dict[str, dict[str, str]] = {s: {} for s in _SCHEMA}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        if key in values[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{section}]")
        caster = _SCHEMA[section][key][0]
        if caster is str:
            values[section][key] = value
        else:
            try:
                values[section][key] = caster(value)
            except ValueError:
                raise ConfigError(
                    f"line {lineno}: {key} expects {caster.__name__}, got {value!r}"
                ) from None
    return values


def _resolved(values: dict, section: str, key: str):
    if key in values[section]:
        return values[section][key]
    return _SCHEMA[section][key][1]


def parse_config(path: Path) -> RunConfig:
    """Parse and validate a sectioned key = value run configuration."""
    values = _parse_lines(path)
    g = lambda s, k: _resolved(values, s, k)

    try:
        model = ModelConfig(
            n=g("model", "frames"), h=g("model", "height"),
            w=g("model", "width"), c=g("model", "channels"),
            d_model=g("model", "d_model"), heads=g("model", "heads"),
            d_head=g("model", "d_head"), blocks=g("model", "blocks"),
            d_text=g("model", "d_text"), seed=g("model", "seed"))

        mode = g("edit", "preset")
        edit = preset(mode)
        overrides = {k: values["edit"][k]
                     for k in ("t_s", "t_c", "tau", "s_cfg")
                     if k in values["edit"]}
        if overrides:
            edit = dataclasses.replace(edit, **overrides)
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc

    steps = g("schedule", "steps")
    beta_start = g("schedule", "beta_start")
    beta_end = g("schedule", "beta_end")

    video = None
    video_dir = None
    source = g("video", "source")
    if source == "synth":
        n = model.n
        start = (g("video", "start_row"), g("video", "start_col"))
        step = (g("video", "step_row"), g("video", "step_col"))
        offsets = tuple((i * step[0], i * step[1]) for i in range(n))
        try:
            video = VideoSpec(n=n, h=model.h, w=model.w,
                              shape=g("video", "shape"),
                              object_color=g("video", "object_color"),
                              background_color=g("video", "background_color"),
                              size=g("video", "object_size"),
                              start=start, offsets=offsets)
        except ContractViolation as exc:
            raise ConfigError(str(exc)) from exc
    elif source == "dir":
        video_dir = Path(g("video", "dir"))
        if not video_dir.is_dir():
            raise ConfigError(f"video dir does not exist: {video_dir}")
    else:
        raise ConfigError(f"video source must be synth or dir, got {source!r}")

    echo = {section: {key: _resolved(values, section, key)
                      for key in sorted(_SCHEMA[section])}
            for section in _SCHEMA}
    echo["edit"].update(preset=edit.mode, t_s=edit.t_s, t_c=edit.t_c,
                        tau=edit.tau, s_cfg=edit.s_cfg)
    return RunConfig(model=model, steps=steps, beta_start=beta_start,
                     beta_end=beta_end, edit=edit,
                     source_prompt=g("edit", "source_prompt"),
                     edit_prompt=g("edit", "edit_prompt"),
                     video=video, video_dir=video_dir, seed=model.seed,
                     out_dir=Path("out"), workers=0, echo=echo)


def _apply_overrides(rc: RunConfig, seed: int | None, out: str | None) -> RunConfig:
    if seed is not None:
        rc.seed = seed
        rc.model = dataclasses.replace(rc.model, seed=seed)
        rc.echo["model"]["seed"] = seed
    if out is not None:
        rc.out_dir = Path(out)
    return rc


def _worker_count() -> int:
    raw = os.environ.get(ENV_THREADS, "0")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    if workers < 0:
        raise ConfigError(f"{ENV_THREADS} must be >= 0, got {workers}")
    return workers


def _load_source_video(rc: RunConfig) -> np.ndarray:
    if rc.video_dir is not None:
        pixels = read_frame_dir(rc.video_dir)
        require(pixels.shape[0] == rc.model.n,
                f"input has {pixels.shape[0]} frames, config expects {rc.model.n}")
        require(pixels.shape[2:] == (rc.model.h, rc.model.w),
                f"input frames are {pixels.shape[2:]}, config expects "
                f"({rc.model.h}, {rc.model.w})")
        return pixels
    rng = SeededRng(derived_seed(rc.seed, "video"))
    pixels, _ = synth_video(rc.video, rng)
    return pixels


def write_heatmap(map2d: np.ndarray, path: Path) -> None:
    """Max-normalized grayscale PGM of a per-frame attention aggregate."""
    arr = np.asarray(map2d, dtype=np.float64)
    require(arr.ndim == 2, f"heatmap expects a 2-D map, got {arr.shape}")
    norm = maxnorm_frame(arr.reshape(1, -1)).reshape(arr.shape)
    write_pgm(path, quantize(norm * 255.0))


def _write_visuals(out_dir: Path, rc: RunConfig, store, alignment, sched) -> None:
    h, w = rc.model.h, rc.model.w
    positions = mask_positions(alignment)

    mask_dir = out_dir / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    if positions:
        t_low = max(1, math.ceil(rc.edit.t_s * sched.T - 1e-9))
        mask = build_blend_mask(store, source_step(t_low), 0, positions,
                                rc.edit.tau).mask
    else:
        mask = np.zeros((rc.model.n, h * w), dtype=bool)
    for i in range(rc.model.n):
        write_pgm(mask_dir / f"{i:04d}.pgm",
                  np.where(mask[i].reshape(h, w), 255, 0).astype(np.uint8))

    heat_dir = out_dir / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    rec = store.query(0, 0, "cross")
    columns = list(positions) if positions else list(range(1, rec.attn.shape[-1]))
    if not columns:
        columns = [0]
    agg = rec.attn.mean(axis=1)[..., columns].sum(axis=-1)
    for i in range(rc.model.n):
        write_heatmap(agg[i].reshape(h, w), heat_dir / f"{i:04d}.pgm")


def _run_edit(rc: RunConfig, identity: bool) -> int:
    sched = make_schedule(rc.steps, rc.beta_start, rc.beta_end)
    weights = make_denoiser_weights(rc.model)
    edit_text = rc.source_prompt if identity else rc.edit_prompt
    if not identity and not rc.edit_prompt:
        raise ConfigError("edit requires edit_prompt in [edit]")

    pixels = _load_source_video(rc)
    z0 = pixels_to_latent(pixels, rc.model.c)
    src_emb = embed_prompt(rc.source_prompt, rc.model)
    edit_emb = embed_prompt(edit_text, rc.model)

    z_T, store = invert_video(z0, src_emb, sched, weights)
    alignment = align_prompts(src_emb.tokens, edit_emb.tokens)
    z_out = run_denoise(z_T, edit_emb, sched, weights, rc.edit,
                        store=store, alignment=alignment, workers=rc.workers)
    out_pixels = quantize(latent_to_pixels(z_out, rc.model.c)).astype(np.float64)

    rc.out_dir.mkdir(parents=True, exist_ok=True)
    write_frame_dir(rc.out_dir / "frames", out_pixels)
    _write_visuals(rc.out_dir, rc, store, alignment, sched)
    echo = dict(rc.echo)
    echo["prompts"] = {"source": rc.source_prompt, "edit": edit_text}
    report = compute_metrics(pixels, out_pixels, config_echo=echo)
    (rc.out_dir / "metrics.json").write_text(report.to_json())
    print(f"wrote {rc.model.n} frames, masks, heatmaps, metrics to {rc.out_dir}")
    return 0


def _run_invert(rc: RunConfig) -> int:
    sched = make_schedule(rc.steps, rc.beta_start, rc.beta_end)
    weights = make_denoiser_weights(rc.model)
    pixels = _load_source_video(rc)
    z0 = pixels_to_latent(pixels, rc.model.c)
    src_emb = embed_prompt(rc.source_prompt, rc.model)
    z_T, store = invert_video(z0, src_emb, sched, weights)

    rc.out_dir.mkdir(parents=True, exist_ok=True)
    blobio.write_blob(rc.out_dir / "z_T.bin", config_hash(rc.model), [z_T])
    store.dump(rc.out_dir / "store")
    print(f"inverted {rc.model.n} frames over {sched.T} steps; "
          f"{len(store)} attention records in {rc.out_dir}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    lines = ["config file keys and defaults:"]
    for section, keys in _SCHEMA.items():
        lines.append(f"  [{section}]")
        for key, (caster, default, help_text) in keys.items():
            shown = "(from preset)" if default is None else default
            lines.append(f"    {key} = {shown}  # {help_text}")
    parser = _Parser(
        prog="attnfuse",
        description="Prompt-driven video editing by attention fusion on a "
                    "deterministic toy diffusion stack.",
        epilog="\n".join(lines),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command",
                        choices=("invert", "edit", "reconstruct", "selfcheck"))
    parser.add_argument("--config", help="path to the run configuration file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override [model] seed")
    parser.add_argument("--out", default=None,
                        help="output directory (default ./out)")
    return parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # bad usage should exit 3, not argparse's 2
        raise ConfigError(message)


def run(argv: list[str]) -> int:
    """Execute one subcommand; returns the process exit code."""
    try:
        args = _build_parser().parse_args(argv)
        if args.command == "selfcheck":
            return 1 if run_selfcheck() else 0
        if not args.config:
            raise ConfigError(f"{args.command} requires --config")
        rc = parse_config(Path(args.config))
        rc.workers = _worker_count()
        rc = _apply_overrides(rc, args.seed, args.out)
        if args.command == "invert":
            return _run_invert(rc)
        if args.command == "edit":
            return _run_edit(rc, identity=False)
        return _run_edit(rc, identity=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
