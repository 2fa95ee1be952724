"""Direct sound optimization of the conditioning weights.

The loop keeps the caption latent fixed and optimizes the per-token weight
vector: each step re-modulates the latent, regenerates and augments the
image, scores audio-image and text-image similarity through the scorer
contract, and applies one Adam update.  Caption tokens split into a noun
group and a non-noun group with independent learning rates (the noun group
moves faster); neutral tokens never change.

The composite loss is
    l_total = -weight_audio * s_audio - weight_clip * s_clip + weight_l2 * l2
so minimizing the total maximizes both similarities while the squared-L2
anchor keeps the modulated latent near the caption latent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import (
    AudioClip,
    BackendError,
    Caption,
    GeneratedImage,
    LatentConditioning,
    OptimizationDivergedError,
    TensorBuffer,
    TokenWeights,
    ValidationError,
    derive_seed,
)
from .backends import BackendSet, SamplerSettings
from .fusion import modulate


@dataclass(frozen=True)
class OptimizationConfig:
    weight_audio: float = 0.9
    weight_clip: float = 1.0
    weight_l2: float = 0.01
    steps: int = 10
    lr_noun: float = 0.01
    lr_non_noun: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    augmentation_count: int = 8
    rescore_every: int = 1
    l2_squared: bool = True  # squared distance keeps the anchor smooth at zero

    def __post_init__(self):
        if min(self.weight_audio, self.weight_clip, self.weight_l2) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.steps < 0:
            raise ValidationError("steps must be non-negative")
        if self.lr_noun < 0 or self.lr_non_noun < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.lr_noun < self.lr_non_noun:
            raise ValidationError("lr_noun must be at least lr_non_noun")
        if self.augmentation_count < 1:
            raise ValidationError("augmentation_count must be at least 1")
        if self.rescore_every < 1:
            raise ValidationError("rescore_every must be at least 1")


@dataclass(frozen=True)
class LossBreakdown:
    """Raw similarity/anchor values plus the weighted total for one step."""

    l_aclip: float
    l_clip: float
    l_l2: float
    l_total: float

    def to_dict(self) -> dict:
        return {
            "l_aclip": self.l_aclip,
            "l_clip": self.l_clip,
            "l_l2": self.l_l2,
            "l_total": self.l_total,
        }


def compose_loss(
    s_audio: float, s_clip: float, l2: float, cfg: OptimizationConfig
) -> LossBreakdown:
    """Fold raw similarities and the anchor into the minimized total."""
    for name, v in (("s_audio", s_audio), ("s_clip", s_clip), ("l2", l2)):
        if not np.isfinite(v):
            raise ValidationError(f"{name} must be finite, got {v}")
    total = -cfg.weight_audio * s_audio - cfg.weight_clip * s_clip + cfg.weight_l2 * l2
    return LossBreakdown(l_aclip=float(s_audio), l_clip=float(s_clip), l_l2=float(l2), l_total=float(total))


def split_param_groups(w: TokenWeights) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the noun and non-noun caption tokens; neutral tokens in neither."""
    noun = np.flatnonzero(w.caption_mask & w.noun_mask)
    non_noun = np.flatnonzero(w.caption_mask & ~w.noun_mask)
    return noun, non_noun


@dataclass(frozen=True)
class ParamGroup:
    values: np.ndarray
    lr: float
    m: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class OptimizerState:
    groups: tuple[ParamGroup, ...]
    step: int
    beta1: float
    beta2: float
    epsilon: float


def init_optimizer(
    group_values: Sequence[np.ndarray], learning_rates: Sequence[float], cfg: OptimizationConfig
) -> OptimizerState:
    groups = tuple(
        ParamGroup(
            values=np.asarray(vals, dtype=np.float64).copy(),
            lr=float(lr),
            m=np.zeros(len(vals)),
            v=np.zeros(len(vals)),
        )
        for vals, lr in zip(group_values, learning_rates)
    )
    return OptimizerState(
        groups=groups,
        step=0,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        epsilon=cfg.adam_epsilon,
    )


def adam_step(state: OptimizerState, grads: Sequence[np.ndarray]) -> OptimizerState:
    """One bias-corrected Adam update; each group uses its own learning rate."""
    if len(grads) != len(state.groups):
        raise ValidationError(f"expected {len(state.groups)} gradient groups, got {len(grads)}")
    t = state.step + 1
    new_groups = []
    for group, grad in zip(state.groups, grads):
        g = np.asarray(grad, dtype=np.float64)
        if g.shape != group.values.shape:
            raise ValidationError(
                f"gradient shape {g.shape} does not match group shape {group.values.shape}"
            )
        if not np.isfinite(g).all():
            raise OptimizationDivergedError("non-finite gradient", step=t)
        m = state.beta1 * group.m + (1.0 - state.beta1) * g
        v = state.beta2 * group.v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        values = group.values - group.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_groups.append(ParamGroup(values=values, lr=group.lr, m=m, v=v))
    return replace(state, groups=tuple(new_groups), step=t)


@dataclass(frozen=True)
class AugmentPolicy:
    """Seeded random-crop + horizontal-flip policy in the style of cut-out guidance."""

    count: int = 8
    crop_min: float = 0.7
    crop_max: float = 1.0
    flip_probability: float = 0.5
    seed: int = 0
    output_size: tuple[int, int] | None = None  # None keeps the input resolution

    def __post_init__(self):
        if self.count < 1:
            raise ValidationError("augmentation count must be at least 1")
        if not (0.0 < self.crop_min <= self.crop_max <= 1.0):
            raise ValidationError("crop fractions must satisfy 0 < min <= max <= 1")
        if not (0.0 <= self.flip_probability <= 1.0):
            raise ValidationError("flip probability must lie in [0, 1]")


def _resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    top = a * (1.0 - wx) + b * wx
    bottom = c * (1.0 - wx) + d * wx
    return top * (1.0 - wy) + bottom * wy


def augment_batch(img: GeneratedImage, policy: AugmentPolicy) -> list[GeneratedImage]:
    """Produce `policy.count` seeded crop/flip views of the image.

    Draw order per view is fixed (fraction, y, x, flip) so batches are
    reproducible from the policy seed alone.
    """
    rng = np.random.default_rng(policy.seed)
    arr = img.array
    h, w = arr.shape[:2]
    out_h, out_w = policy.output_size if policy.output_size is not None else (h, w)
    views = []
    for _ in range(policy.count):
        fraction = rng.uniform(policy.crop_min, policy.crop_max)
        crop_h = max(1, int(round(fraction * h)))
        crop_w = max(1, int(round(fraction * w)))
        y = int(rng.integers(0, h - crop_h + 1))
        x = int(rng.integers(0, w - crop_w + 1))
        crop = arr[y : y + crop_h, x : x + crop_w]
        if rng.random() < policy.flip_probability:
            crop = crop[:, ::-1]
        view = _resize_bilinear(np.ascontiguousarray(crop, dtype=np.float64), out_h, out_w)
        view = np.clip(view, 0.0, 1.0).astype(np.float32)
        views.append(GeneratedImage(pixels=TensorBuffer.from_array(view), seed=img.seed))
    return views


@dataclass(frozen=True)
class OptimizationContext:
    """Everything needed to evaluate the step loss for a given weight vector."""

    latent: LatentConditioning
    template: TokenWeights
    audio: AudioClip
    caption: Caption
    backends: BackendSet
    settings: SamplerSettings
    cfg: OptimizationConfig
    seed: int


def _anchor_distance(z_n: np.ndarray, z: np.ndarray, squared: bool) -> tuple[float, np.ndarray]:
    diff = z_n - z
    sq = float(np.sum(diff * diff))
    if squared:
        return sq, 2.0 * diff
    dist = float(np.sqrt(sq))
    if dist == 0.0:
        return 0.0, np.zeros_like(diff)
    return dist, diff / dist


def evaluate_step(
    weights: np.ndarray, ctx: OptimizationContext, augment_seed: int
) -> tuple[LossBreakdown, np.ndarray]:
    """Score one weight vector: full generate/augment/score pass plus the
    assembled gradient of the total loss with respect to every token weight."""
    scorer = ctx.backends.scorer
    if not getattr(scorer, "supports_conditioning_gradient", False):
        raise BackendError("scorer does not support conditioning gradients")
    w = np.asarray(weights, dtype=np.float64)
    z = ctx.latent.array.astype(np.float64)
    z_n = w[:, None] * z
    # Build the modulated conditioning directly so the loss stays defined on a
    # full neighborhood of w (finite-difference probes may perturb any token).
    z_n32 = LatentConditioning(TensorBuffer.from_array(z_n.astype(np.float32)))
    image = ctx.backends.generator.generate(z_n32, ctx.seed, ctx.settings)
    policy = AugmentPolicy(count=ctx.cfg.augmentation_count, seed=augment_seed)
    batch = augment_batch(image, policy)
    s_audio, grad_audio = scorer.audio_similarity_with_gradient(z_n, batch, ctx.audio)
    s_clip, grad_clip = scorer.text_similarity_with_gradient(z_n, batch, ctx.caption.text)
    l2, grad_l2 = _anchor_distance(z_n, z, ctx.cfg.l2_squared)
    breakdown = compose_loss(s_audio, s_clip, l2, ctx.cfg)
    grad_z = (
        -ctx.cfg.weight_audio * np.asarray(grad_audio, dtype=np.float64)
        - ctx.cfg.weight_clip * np.asarray(grad_clip, dtype=np.float64)
        + ctx.cfg.weight_l2 * grad_l2
    )
    grad_w = np.sum(grad_z * z, axis=1)
    return breakdown, grad_w


@dataclass(frozen=True)
class OptimizationResult:
    conditioning: LatentConditioning
    weights: TokenWeights
    trace: tuple[LossBreakdown, ...]


def optimize_conditioning(
    z: LatentConditioning,
    initial_weights: TokenWeights,
    audio: AudioClip,
    caption: Caption,
    backends: BackendSet,
    cfg: OptimizationConfig,
    seed: int,
    settings: SamplerSettings | None = None,
) -> OptimizationResult:
    """Run the full optimization loop and return the refined conditioning.

    The trace records one loss breakdown per step, evaluated before that
    step's parameter update.
    """
    if len(initial_weights) != z.token_count:
        raise ValidationError("weight length does not match the conditioning token count")
    settings = settings if settings is not None else SamplerSettings()
    ctx = OptimizationContext(
        latent=z,
        template=initial_weights,
        audio=audio,
        caption=caption,
        backends=backends,
        settings=settings,
        cfg=cfg,
        seed=seed,
    )
    noun_idx, non_noun_idx = split_param_groups(initial_weights)
    w = initial_weights.weights.astype(np.float64).copy()
    state = init_optimizer(
        (w[noun_idx], w[non_noun_idx]), (cfg.lr_noun, cfg.lr_non_noun), cfg
    )
    aug_root = derive_seed(seed, "augment")
    trace: list[LossBreakdown] = []
    cached: tuple[LossBreakdown, np.ndarray] | None = None
    for step in range(cfg.steps):
        if cached is None or step % cfg.rescore_every == 0:
            cached = evaluate_step(w, ctx, derive_seed(aug_root, f"step:{step}"))
        breakdown, grad_w = cached
        if not np.isfinite(breakdown.l_total):
            raise OptimizationDivergedError("non-finite loss", step=step)
        trace.append(breakdown)
        state = adam_step(state, (grad_w[noun_idx], grad_w[non_noun_idx]))
        w[noun_idx] = state.groups[0].values
        w[non_noun_idx] = state.groups[1].values
        cached = None if (step + 1) % cfg.rescore_every == 0 else (breakdown, grad_w)
    final_weights = initial_weights.with_weights(w)
    return OptimizationResult(
        conditioning=modulate(z, final_weights),
        weights=final_weights,
        trace=tuple(trace),
    )
