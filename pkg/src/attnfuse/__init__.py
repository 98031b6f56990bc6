"""Prompt-driven video editing by attention fusion.

A compact, fully deterministic latent-diffusion stack: DDIM inversion
archives every attention map of a toy denoiser, and the editing pass
replays those maps through cross-attention column fusion and masked
self-attention blending, so edits keep the source video's layout and
motion.
"""

from .errors import ConfigError, ContractViolation, MissingRecordError
from .fusion import (BlendMask, EditConfig, PromptAlignment, align_prompts,
                     blend_self, build_blend_mask, fuse_cross,
                     identity_alignment, preset)
from .model import (AttentionRecord, DenoiserWeights, ModelConfig,
                    PromptEmbedding, attend, denoiser_forward, embed_prompt,
                    load_weights, make_denoiser_weights, make_oracle_denoiser,
                    save_weights, spatiotemporal_attend)
from .numerics import SeededRng, gaussian, matmul, maxnorm_frame, softmax_lastdim
from .pipeline import (MetricsReport, VideoSpec, compute_metrics, decode,
                       encode, invert_video, run_denoise, synth_video)
from .schedule import (NoiseSchedule, cfg_combine, ddim_invert_step,
                       ddim_step, make_schedule)
from .store import AttentionKey, AttentionStore, StoreMeta, load_store_dump

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
