"""End-to-end orchestration: caption, attentions, weight assembly, modulation,
optimization, image generation and provenance.

A run is reproducible from its manifest: the manifest snapshots the full
config, the master seed, the per-stage derived seeds and the backend
identities, and (with deterministic backends) replaying it bit-reproduces
every artifact.  Timings are recorded only when ``record_timings`` is set,
so default manifests are byte-stable across repeated runs.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (
    AttentionVector,
    AudioClip,
    BackendError,
    Caption,
    GeneratedImage,
    LatentConditioning,
    RunManifest,
    TokenWeights,
    ValidationError,
    amplify,
    derive_seed,
    write_tensor,
)
from .backends import (
    BackendSet,
    CaptionerBackend,
    MockSuite,
    SamplerSettings,
    TaggerBackend,
    create_backend_set,
)
from .fusion import (
    FusionConfig,
    fuse_token_weight,
    positional_arguments,
    scatter_word_weights,
    sentence_attention,
    assemble_token_weights,
    modulate,
)
from .optimize import LossBreakdown, OptimizationConfig, optimize_conditioning

NO_AUDIO_ATTENTION = "no_audio_attention"
NO_SENTENCE_ATTENTION = "no_sentence_attention"
NO_ALL_ATTENTIONS = "no_all_attentions"
NO_OPTIMIZATION = "no_optimization"
NO_ALL = "no_all"

ABLATION_FLAGS = frozenset(
    {NO_AUDIO_ATTENTION, NO_SENTENCE_ATTENTION, NO_ALL_ATTENTIONS, NO_OPTIMIZATION, NO_ALL}
)

PREPEND = "prepend"
APPEND = "append"


def normalize_ablation(flags) -> frozenset[str]:
    """Validate flag names and expand ``no_all`` into the four it implies."""
    flags = frozenset(flags)
    unknown = flags - ABLATION_FLAGS
    if unknown:
        raise ValidationError(f"unknown ablation flags: {sorted(unknown)}")
    if NO_ALL in flags:
        flags = flags | {NO_AUDIO_ATTENTION, NO_SENTENCE_ATTENTION, NO_ALL_ATTENTIONS, NO_OPTIMIZATION}
    return flags


@dataclass(frozen=True)
class PipelineConfig:
    backend_set: str = "mock"
    backend_overrides: tuple[tuple[str, str], ...] = ()
    fusion: FusionConfig = field(default_factory=FusionConfig)
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)
    sampler: str = "plms"
    diffusion_steps: int = 40
    image_size: int = 512
    seed: int = 0
    ablation: frozenset = frozenset()
    user_text: str = ""
    text_position: str = PREPEND
    amplify: float = 1.0
    mock_token_count: int = 32
    mock_channel_dim: int = 16
    record_timings: bool = False
    dump_tensors: bool = False
    write_trace: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ablation", normalize_ablation(self.ablation))
        if self.text_position not in (PREPEND, APPEND):
            raise ValidationError(f"text_position must be prepend or append, got {self.text_position!r}")
        if not (self.amplify > 0):
            raise ValidationError("amplify must be > 0")
        if self.diffusion_steps <= 0 or self.image_size <= 0:
            raise ValidationError("diffusion_steps and image_size must be positive")

    def sampler_settings(self) -> SamplerSettings:
        return SamplerSettings(name=self.sampler, steps=self.diffusion_steps, image_size=self.image_size)

    def backend_names(self) -> dict[str, str]:
        names = {role: self.backend_set for role in
                 ("captioner", "tagger", "text_encoder", "generator", "scorer", "detector", "classifier")}
        names.update(dict(self.backend_overrides))
        return names

    def to_dict(self) -> dict:
        return {
            "backend_set": self.backend_set,
            "backend_overrides": [list(kv) for kv in self.backend_overrides],
            "fusion": {
                "noun_audio_scale": self.fusion.noun_audio_scale,
                "noun_threshold": self.fusion.noun_threshold,
                "positional_argument_mode": self.fusion.positional_argument_mode,
            },
            "optimization": {
                "weight_audio": self.optimization.weight_audio,
                "weight_clip": self.optimization.weight_clip,
                "weight_l2": self.optimization.weight_l2,
                "steps": self.optimization.steps,
                "lr_noun": self.optimization.lr_noun,
                "lr_non_noun": self.optimization.lr_non_noun,
                "adam_beta1": self.optimization.adam_beta1,
                "adam_beta2": self.optimization.adam_beta2,
                "adam_epsilon": self.optimization.adam_epsilon,
                "augmentation_count": self.optimization.augmentation_count,
                "rescore_every": self.optimization.rescore_every,
                "l2_squared": self.optimization.l2_squared,
            },
            "sampler": self.sampler,
            "diffusion_steps": self.diffusion_steps,
            "image_size": self.image_size,
            "seed": self.seed,
            "ablation": sorted(self.ablation),
            "user_text": self.user_text,
            "text_position": self.text_position,
            "amplify": self.amplify,
            "mock_token_count": self.mock_token_count,
            "mock_channel_dim": self.mock_channel_dim,
            "record_timings": self.record_timings,
            "dump_tensors": self.dump_tensors,
            "write_trace": self.write_trace,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        return cls(
            backend_set=doc["backend_set"],
            backend_overrides=tuple((k, v) for k, v in doc.get("backend_overrides", [])),
            fusion=FusionConfig(**doc["fusion"]),
            optimization=OptimizationConfig(**doc["optimization"]),
            sampler=doc["sampler"],
            diffusion_steps=doc["diffusion_steps"],
            image_size=doc["image_size"],
            seed=doc["seed"],
            ablation=frozenset(doc.get("ablation", [])),
            user_text=doc.get("user_text", ""),
            text_position=doc.get("text_position", PREPEND),
            amplify=doc.get("amplify", 1.0),
            mock_token_count=doc.get("mock_token_count", 32),
            mock_channel_dim=doc.get("mock_channel_dim", 16),
            record_timings=doc.get("record_timings", False),
            dump_tensors=doc.get("dump_tensors", False),
            write_trace=doc.get("write_trace", False),
        )


def build_backend_set(cfg: PipelineConfig) -> BackendSet:
    suite = MockSuite(
        seed=derive_seed(cfg.seed, "mock-suite"),
        token_count=cfg.mock_token_count,
        channel_dim=cfg.mock_channel_dim,
    )
    return create_backend_set(cfg.backend_names(), suite)


def caption_audio(
    clip: AudioClip, captioner: CaptionerBackend, tagger: TaggerBackend
) -> tuple[Caption, AttentionVector, AttentionVector]:
    """Caption the clip and attach both attentions (alignment comes later)."""
    try:
        caption, audio_attn = captioner.caption(clip)
    except (ValidationError, BackendError) as exc:
        raise BackendError(f"captioner: {exc}") from exc
    if len(caption.words) == 0:
        raise BackendError("captioner: empty caption")
    if len(audio_attn) != len(caption.words):
        raise BackendError(
            f"captioner: attention length {len(audio_attn)} != word count {len(caption.words)}"
        )
    sent_attn = sentence_attention(caption, tagger)
    caption = replace(caption, noun_probability=tuple(float(p) for p in sent_attn.values))
    return caption, audio_attn, sent_attn


def combine_prompt(caption: Caption, user_text: str, position: str = PREPEND) -> str:
    """Merge an optional user prompt with the caption text.

    The user text goes first by default (encoder truncation keeps early
    tokens); its tokens stay neutral in fusion and optimization.
    """
    user_text = user_text.strip()
    if not user_text:
        return caption.text
    if position == PREPEND:
        return f"{user_text}, {caption.text}"
    if position == APPEND:
        return f"{caption.text}, {user_text}"
    raise ValidationError(f"text position must be prepend or append, got {position!r}")


def apply_ablation(
    attns: tuple[AttentionVector, AttentionVector],
    weights: TokenWeights,
    flags,
    *,
    caption: Caption,
    fusion_cfg: FusionConfig,
    encoder_token_count: int,
) -> tuple[tuple[AttentionVector, AttentionVector], TokenWeights]:
    """Rewrite attention vectors and token weights for the requested ablation.

    - no_audio_attention removes the audio term and its positional term.
    - no_sentence_attention removes the sentence term (the noun mask stays,
      the optimizer still needs its groups).
    - no_all_attentions forces every caption-token weight to exactly 1.0.
    Disabling both individual attentions without no_all_attentions leaves
    the literal arithmetic: all caption weights drop to zero.
    """
    audio_attn, sent_attn = attns
    flags = normalize_ablation(flags)
    if not flags - {NO_OPTIMIZATION}:
        return (audio_attn, sent_attn), weights

    noun_flags = caption.noun_flags(fusion_cfg.noun_threshold)
    if NO_ALL_ATTENTIONS in flags:
        new_weights = scatter_word_weights(
            caption, [1.0] * len(caption.words), noun_flags, encoder_token_count
        )
        return (audio_attn.zeroed(), sent_attn.zeroed()), new_weights

    include_audio = NO_AUDIO_ATTENTION not in flags
    include_sentence = NO_SENTENCE_ATTENTION not in flags
    pe_args = positional_arguments(caption, audio_attn, fusion_cfg)
    word_weights = []
    for i in range(len(caption.words)):
        value = 0.0
        if include_sentence:
            value += float(sent_attn.values[i])
        if include_audio:
            value = fuse_token_weight(
                value, float(audio_attn.values[i]), float(pe_args[i]), noun_flags[i], fusion_cfg
            )
        word_weights.append(value)
    new_weights = scatter_word_weights(caption, word_weights, noun_flags, encoder_token_count)
    new_audio = audio_attn if include_audio else audio_attn.zeroed()
    new_sent = sent_attn if include_sentence else sent_attn.zeroed()
    return (new_audio, new_sent), new_weights


@dataclass(frozen=True)
class RunResult:
    final_image: GeneratedImage
    initial_image: GeneratedImage
    conditioning: LatentConditioning
    conditioning_initial: LatentConditioning
    conditioning_final: LatentConditioning
    caption: Caption
    audio_attention: AttentionVector
    sentence_attention: AttentionVector
    weights_initial: TokenWeights
    weights_final: TokenWeights
    trace: tuple[LossBreakdown, ...]
    manifest: RunManifest
    out_dir: Path | None


def _run_id(clip: AudioClip, cfg: PipelineConfig) -> str:
    h = hashlib.sha256()
    h.update(clip.content_digest().encode())
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:12]


def run_generation(
    clip: AudioClip, cfg: PipelineConfig, out_dir: str | Path | None = None
) -> RunResult:
    """Execute the full two-stage pipeline for one clip.

    Stage one fuses attentions into the initial token weights; stage two
    optimizes them and regenerates the image with the same seed, so any
    change in the output is attributable to the conditioning alone.
    Artifacts (PNGs, manifest, optional trace and tensor dumps) land in
    ``out_dir`` when given.
    """
    t_start = time.perf_counter()
    flags = normalize_ablation(cfg.ablation)
    clip = amplify(clip, cfg.amplify)
    backends = build_backend_set(cfg)
    settings = cfg.sampler_settings()
    seed = cfg.seed

    caption, audio_attn, sent_attn = caption_audio(clip, backends.captioner, backends.tagger)
    prompt = combine_prompt(caption, cfg.user_text, cfg.text_position)
    try:
        latent, alignment = backends.text_encoder.encode(prompt)
    except (ValidationError, BackendError) as exc:
        raise BackendError(f"text_encoder: {exc}") from exc

    # The encoder aligned the combined prompt; keep only the caption's words.
    offset = 0
    if cfg.user_text.strip() and cfg.text_position == PREPEND:
        offset = len(cfg.user_text.strip().split())
    caption_alignment = alignment[offset : offset + len(caption.words)]
    if len(caption_alignment) != len(caption.words):
        raise BackendError("text_encoder: alignment does not cover the caption words")
    caption = replace(caption, encoder_alignment=tuple(caption_alignment))

    weights0 = assemble_token_weights(caption, audio_attn, sent_attn, cfg.fusion, latent.token_count)
    (audio_attn, sent_attn), weights_init = apply_ablation(
        (audio_attn, sent_attn),
        weights0,
        flags,
        caption=caption,
        fusion_cfg=cfg.fusion,
        encoder_token_count=latent.token_count,
    )

    conditioning_initial = modulate(latent, weights_init)
    t_gen0 = time.perf_counter()
    initial_image = backends.generator.generate(conditioning_initial, seed, settings)

    if NO_OPTIMIZATION in flags:
        weights_final = weights_init
        conditioning_final = conditioning_initial
        trace: tuple[LossBreakdown, ...] = ()
    else:
        result = optimize_conditioning(
            latent, weights_init, clip, caption, backends, cfg.optimization, seed, settings
        )
        weights_final = result.weights
        conditioning_final = result.conditioning
        trace = result.trace

    final_image = backends.generator.generate(conditioning_final, seed, settings)
    t_done = time.perf_counter()

    outputs: dict = {"image": "image.png", "initial_image": "i_init.png"}
    if cfg.write_trace:
        outputs["trace"] = "trace.jsonl"
    if cfg.dump_tensors:
        outputs["tensors"] = {
            "caption_latent": "caption_latent.wtb1",
            "conditioning_initial": "conditioning_initial.wtb1",
            "conditioning_final": "conditioning_final.wtb1",
        }

    timings = None
    if cfg.record_timings:
        timings = {
            "total_seconds": t_done - t_start,
            "setup_seconds": t_gen0 - t_start,
        }

    manifest = RunManifest(
        run_id=_run_id(clip, cfg),
        seed=seed,
        derived_seeds={
            "mock_suite": derive_seed(seed, "mock-suite"),
            "augment": derive_seed(seed, "augment"),
        },
        audio={
            "path": clip.source_path,
            "sha256": clip.content_digest(),
            "sample_rate": clip.sample_rate,
            "sample_count": int(clip.samples.size),
            "label": clip.label,
        },
        config=cfg.to_dict(),
        backends=backends.infos(),
        prompt=prompt,
        caption={
            "text": caption.text,
            "words": list(caption.words),
            "noun_probability": list(caption.noun_probability),
            "encoder_alignment": [list(a) for a in caption.encoder_alignment],
        },
        attention={
            "audio": audio_attn.values.tolist(),
            "sentence": sent_attn.values.tolist(),
        },
        ablation=tuple(sorted(flags)),
        token_weights={
            "initial": weights_init.weights.tolist(),
            "final": weights_final.weights.tolist(),
            "noun_mask": weights_init.noun_mask.tolist(),
            "caption_mask": weights_init.caption_mask.tolist(),
        },
        losses=tuple(b.to_dict() for b in trace),
        outputs=outputs,
        timings=timings,
    )

    out_path: Path | None = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        final_image.save_png(out_path / "image.png")
        initial_image.save_png(out_path / "i_init.png")
        if cfg.write_trace:
            lines = [json.dumps({"step": i, **b.to_dict()}) for i, b in enumerate(trace)]
            (out_path / "trace.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")
        if cfg.dump_tensors:
            write_tensor(latent.embedding, out_path / "caption_latent.wtb1")
            write_tensor(conditioning_initial.embedding, out_path / "conditioning_initial.wtb1")
            write_tensor(conditioning_final.embedding, out_path / "conditioning_final.wtb1")
        manifest.write(out_path / "manifest.json")

    return RunResult(
        final_image=final_image,
        initial_image=initial_image,
        conditioning=latent,
        conditioning_initial=conditioning_initial,
        conditioning_final=conditioning_final,
        caption=caption,
        audio_attention=audio_attn,
        sentence_attention=sent_attn,
        weights_initial=weights_init,
        weights_final=weights_final,
        trace=trace,
        manifest=manifest,
        out_dir=out_path,
    )


def replay_manifest(
    manifest: RunManifest, clip: AudioClip, out_dir: str | Path | None = None
) -> RunResult:
    """Re-execute a run from its manifest; with deterministic backends the
    outputs are identical to the original run."""
    cfg = PipelineConfig.from_dict(manifest.config)
    if clip.content_digest() != manifest.audio["sha256"]:
        raise ValidationError("audio content does not match the manifest's digest")
    return run_generation(clip, cfg, out_dir)
