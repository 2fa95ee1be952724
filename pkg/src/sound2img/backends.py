"""Backend contracts plus a deterministic mock suite.

The pipeline consumes six external model roles (captioner, tagger, text
encoder, generator, scorer, detector) and an image classifier used only by
the evaluation metrics.  Real model adapters register under the same
contracts; the bundled "mock" suite is a set of pure functions of
(inputs, seed) that keep every downstream formula testable without weights.

The scorer's optimization route returns (similarity, gradient with respect
to the conditioning) pairs; the mock computes the similarity as the cosine
between the mean-pooled conditioning and a fixed per-modality target vector,
for which the gradient is analytic.
"""

from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np

from .core import (
    AUDIO_ATTENTION,
    AttentionVector,
    AudioClip,
    BackendError,
    Caption,
    GeneratedImage,
    LatentConditioning,
    TensorBuffer,
    ValidationError,
)

BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
PAD_TOKEN = "<pad>"


@dataclass(frozen=True)
class BackendInfo:
    """Capability descriptor every backend carries."""

    id: str
    version: str
    concurrent_safe: bool = True
    deterministic: bool = True


@dataclass(frozen=True)
class SamplerSettings:
    """Generator sampler knobs, passed through to the backend untouched."""

    name: str = "plms"
    steps: int = 40
    image_size: int = 512

    def __post_init__(self):
        if self.steps <= 0 or self.image_size <= 0:
            raise ValidationError("sampler steps and image size must be positive")


@dataclass(frozen=True)
class Detection:
    """One detected object: class name, confidence and pixel bounding box."""

    class_name: str
    confidence: float
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValidationError(f"detection confidence {self.confidence} outside [0, 1]")
        x, y, w, h = self.bbox
        if w < 0 or h < 0 or x < 0 or y < 0:
            raise ValidationError(f"bad bounding box {self.bbox}")


@runtime_checkable
class CaptionerBackend(Protocol):
    info: BackendInfo

    def caption(self, clip: AudioClip) -> tuple[Caption, AttentionVector]: ...


@runtime_checkable
class TaggerBackend(Protocol):
    info: BackendInfo

    def noun_probabilities(self, words: Sequence[str]) -> list[float]: ...


@runtime_checkable
class TextEncoderBackend(Protocol):
    info: BackendInfo
    token_count: int
    channel_dim: int

    def encode(self, text: str) -> tuple[LatentConditioning, tuple[tuple[int, ...], ...]]: ...


@runtime_checkable
class GeneratorBackend(Protocol):
    info: BackendInfo

    def generate(
        self, conditioning: LatentConditioning, seed: int, settings: SamplerSettings
    ) -> GeneratedImage: ...


@runtime_checkable
class ScorerBackend(Protocol):
    info: BackendInfo
    supports_conditioning_gradient: bool

    def text_image_similarity(self, image: GeneratedImage, text: str) -> float: ...

    def audio_image_similarity(self, image: GeneratedImage, audio: AudioClip) -> float: ...

    def text_similarity_with_gradient(
        self, conditioning: np.ndarray, images: Sequence[GeneratedImage], text: str
    ) -> tuple[float, np.ndarray]: ...

    def audio_similarity_with_gradient(
        self, conditioning: np.ndarray, images: Sequence[GeneratedImage], audio: AudioClip
    ) -> tuple[float, np.ndarray]: ...


@runtime_checkable
class DetectorBackend(Protocol):
    info: BackendInfo

    def detect(self, image: GeneratedImage) -> list[Detection]: ...


@runtime_checkable
class ClassifierBackend(Protocol):
    info: BackendInfo
    n_classes: int

    def class_probabilities(self, image: GeneratedImage) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Deterministic hashing helpers
# ---------------------------------------------------------------------------


def _digest(*parts: object) -> bytes:
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.digest()


def _hash_int(*parts: object) -> int:
    return int.from_bytes(_digest(*parts), "little")


def _hash01(*parts: object) -> float:
    return _hash_int(*parts) / 2.0**64


def _hash_rng(*parts: object) -> np.random.Generator:
    return np.random.default_rng(_hash_int(*parts))


def _unit_vector(dim: int, *key: object) -> np.ndarray:
    v = _hash_rng(*key).standard_normal(dim)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# Mock suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MockSuite:
    """Shared parameters for the mock backends; all outputs are pure in (inputs, seed)."""

    seed: int = 0
    token_count: int = 32
    channel_dim: int = 16
    n_classes: int = 10

    def __post_init__(self):
        if self.token_count < 4:
            raise ValidationError("mock token_count must leave room for markers")
        if self.channel_dim < 2 or self.n_classes < 2:
            raise ValidationError("mock channel_dim and n_classes must be at least 2")

    def target(self, kind: str) -> np.ndarray:
        """Fixed unit target vector for one modality ('audio' or 'text')."""
        if kind not in ("audio", "text"):
            raise ValidationError(f"unknown target modality {kind!r}")
        return _unit_vector(self.channel_dim, self.seed, "target", kind)


def mock_tokenize(text: str, capacity: int) -> tuple[list[str], tuple[tuple[int, ...], ...]]:
    """Split text into a begin marker, per-word sub-tokens, end marker and padding.

    Words of 7+ characters split into two sub-tokens, mimicking sub-word
    encoders.  Words that do not fit in the window keep an empty alignment.
    """
    words = text.split()
    tokens = [BOS_TOKEN]
    alignment: list[tuple[int, ...]] = []
    for word in words:
        if len(word) >= 7:
            mid = len(word) // 2
            subs = [word[:mid], word[mid:]]
        else:
            subs = [word]
        idxs = []
        for sub in subs:
            if len(tokens) < capacity - 1:  # reserve one slot for the end marker
                idxs.append(len(tokens))
                tokens.append(sub)
        alignment.append(tuple(idxs))
    tokens.append(EOS_TOKEN)
    while len(tokens) < capacity:
        tokens.append(PAD_TOKEN)
    return tokens, tuple(alignment)


def mock_text_encoder(text: str, suite: MockSuite) -> LatentConditioning:
    """Deterministic stand-in for a text encoder.

    Each embedding row is derived by seeded hashing of (token index, token
    text) and L2-normalized.
    """
    if not text:
        raise ValidationError("text must be non-empty")
    tokens, _ = mock_tokenize(text, suite.token_count)
    rows = np.stack(
        [
            _unit_vector(suite.channel_dim, suite.seed, "encoder", i, tok)
            for i, tok in enumerate(tokens)
        ]
    )
    return LatentConditioning(TensorBuffer.from_array(rows.astype(np.float32)))


def pooled_cosine_with_gradient(
    conditioning: np.ndarray, target: np.ndarray
) -> tuple[float, np.ndarray]:
    """Cosine between the token-mean of `conditioning` and `target`, with its
    exact derivative with respect to every conditioning element."""
    z = np.asarray(conditioning, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64).ravel()
    if z.ndim != 2 or z.shape[1] != t.size:
        raise ValidationError(
            f"conditioning {z.shape} and target ({t.size},) channel dims differ"
        )
    n_tokens = z.shape[0]
    pooled = z.mean(axis=0)
    norm_p = np.linalg.norm(pooled)
    norm_t = np.linalg.norm(t)
    if norm_p == 0.0 or norm_t == 0.0:
        raise ValidationError("degenerate input: zero-norm vector in cosine similarity")
    dot = float(pooled @ t)
    value = dot / (norm_p * norm_t)
    dcos_dpool = t / (norm_p * norm_t) - dot * pooled / (norm_p**3 * norm_t)
    grad = np.tile(dcos_dpool / n_tokens, (n_tokens, 1))
    return float(value), grad


def toy_similarity(
    z_n: LatentConditioning | TensorBuffer | np.ndarray, target: TensorBuffer | np.ndarray
) -> tuple[float, TensorBuffer]:
    """Analytic toy scorer: cosine of mean-pooled conditioning against a target."""
    if isinstance(z_n, LatentConditioning):
        z = z_n.array
    elif isinstance(z_n, TensorBuffer):
        z = z_n.array
    else:
        z = np.asarray(z_n)
    t = target.array if isinstance(target, TensorBuffer) else np.asarray(target)
    value, grad = pooled_cosine_with_gradient(z, t)
    return value, TensorBuffer.from_array(grad)


def finite_diff_gradient(
    f: Callable[[TensorBuffer], float], x: TensorBuffer, h: float
) -> TensorBuffer:
    """Central-difference gradient oracle, (f(x+h e_i) - f(x-h e_i)) / delta_i.

    The denominator uses the realized float32 perturbation rather than the
    nominal 2h, which keeps the estimate accurate on 32-bit storage.
    """
    if not (h > 0):
        raise ValidationError("finite difference step must be positive")
    base = x.data.astype(np.float64)
    grad = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] += h
        minus[i] -= h
        tb_plus = TensorBuffer(x.shape, plus)
        tb_minus = TensorBuffer(x.shape, minus)
        f_plus = float(f(tb_plus))
        f_minus = float(f(tb_minus))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValidationError(f"non-finite evaluation in finite-difference oracle at element {i}")
        delta = float(tb_plus.data[i]) - float(tb_minus.data[i])
        grad[i] = (f_plus - f_minus) / delta
    return TensorBuffer(x.shape, grad)


# Small noun lexicon for the mock part-of-speech tagger.
_NOUN_LEXICON = frozenset(
    """
    dog dogs cat cats man men woman women person people baby babies bird birds
    rain thunder water waves wave beach sea ocean engine engines car cars tires
    motorcycle train boat door paper wind fire crowd children child street park
    horse sheep cow clock bell bells laughter voice voices sound sounds helicopter
    gun siren drum drums guitar piano rooster hen chicken insects bee bees frog
    """.split()
)

_SCENES = (
    "a dog barks loudly in the rain",
    "water splashing and birds chirping",
    "a man speaks as paper crumples",
    "an engine revving and tires squealing",
    "thunder rumbling far away over the sea",
    "a baby crying while people are laughing",
    "waves crashing on a beach in the wind",
    "a cat meowing near a wooden door",
)


class MockCaptioner:
    """Maps a clip to a canned caption and per-word pseudo-probabilities.

    Attention values stand in for the per-word decoder probabilities of a
    captioning transformer: each word gets a hash-derived base value scaled
    by the clip's RMS energy, so louder clips attend harder.
    """

    def __init__(self, suite: MockSuite):
        self.suite = suite
        self.info = BackendInfo(id="mock-captioner", version="1")

    def caption(self, clip: AudioClip) -> tuple[Caption, AttentionVector]:
        digest = clip.content_digest()
        if clip.label:
            label_words = [w for w in clip.label.replace("_", " ").replace("+", " ").split() if w]
            words = ["a", *label_words, "sound"]
        else:
            scene = _SCENES[_hash_int(self.suite.seed, "scene", digest) % len(_SCENES)]
            words = scene.split()
        rms = float(np.sqrt(np.mean(clip.samples**2)))
        loudness = min(1.0, 0.35 + 2.0 * rms)
        values = np.array(
            [
                min(1.0, (0.2 + 0.75 * _hash01(self.suite.seed, "attn", digest, i)) * loudness)
                for i in range(len(words))
            ]
        )
        caption = Caption(
            text=" ".join(words),
            words=tuple(words),
            noun_probability=(0.0,) * len(words),
            encoder_alignment=((),) * len(words),
        )
        return caption, AttentionVector(AUDIO_ATTENTION, values)


class MockTagger:
    """Lexicon lookup: known nouns get probability 0.9, everything else 0.1."""

    def __init__(self, suite: MockSuite):
        self.suite = suite
        self.info = BackendInfo(id="mock-tagger", version="1")

    def noun_probabilities(self, words: Sequence[str]) -> list[float]:
        stripped = (w.lower().strip(string.punctuation) for w in words)
        return [0.9 if w in _NOUN_LEXICON else 0.1 for w in stripped]


class MockTextEncoder:
    def __init__(self, suite: MockSuite):
        self.suite = suite
        self.token_count = suite.token_count
        self.channel_dim = suite.channel_dim
        self.info = BackendInfo(id="mock-text-encoder", version="1")

    def encode(self, text: str) -> tuple[LatentConditioning, tuple[tuple[int, ...], ...]]:
        conditioning = mock_text_encoder(text, self.suite)
        _, alignment = mock_tokenize(text, self.suite.token_count)
        return conditioning, alignment


_IMAGE_SIZE = 64


class MockGenerator:
    """Renders a 64x64 image whose pixel ramps are a linear map of the pooled
    conditioning; the seed and sampler settings rotate a deterministic phase."""

    def __init__(self, suite: MockSuite):
        self.suite = suite
        self.info = BackendInfo(id="mock-generator", version="1")

    def generate(
        self, conditioning: LatentConditioning, seed: int, settings: SamplerSettings
    ) -> GeneratedImage:
        pooled = conditioning.array.astype(np.float64).mean(axis=0)
        mix = _hash_rng(self.suite.seed, "generator-mix").standard_normal((9, pooled.size))
        coef = (mix @ pooled) * 0.5
        phase = 2.0 * np.pi * _hash01(
            self.suite.seed, "phase", seed, settings.name, settings.steps, settings.image_size
        )
        axis = np.linspace(0.0, 1.0, _IMAGE_SIZE)
        yy, xx = np.meshgrid(axis, axis, indexing="ij")
        img = np.empty((_IMAGE_SIZE, _IMAGE_SIZE, 3))
        for c in range(3):
            a, b, d = coef[3 * c : 3 * c + 3]
            img[:, :, c] = 0.5 + 0.35 * (
                a * xx + b * yy + d * np.sin(2.0 * np.pi * (xx + yy) + phase)
            )
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        return GeneratedImage(pixels=TensorBuffer.from_array(img), seed=seed)


def image_statistics(image: GeneratedImage) -> np.ndarray:
    """Summary vector used by the mock scorer, detector and classifier."""
    arr = image.array.astype(np.float64)
    luma = arr.mean(axis=2)
    half = arr.shape[0] // 2
    return np.array(
        [
            *arr.mean(axis=(0, 1)),
            *arr.std(axis=(0, 1)),
            luma.mean(),
            luma.std(),
            luma[:half].mean(),
            luma[half:].mean(),
            luma[:, :half].mean(),
            luma[:, half:].mean(),
        ]
    )


class MockScorer:
    """Similarity backend over hash-derived embeddings.

    Image/text/audio embeddings live in the suite's channel space, so plain
    similarities are bounded cosines.  The optimization route is the
    analytic pooled-cosine against the per-modality target vectors; the
    augmented images are accepted for contract compatibility but do not
    enter the mock's similarity.
    """

    def __init__(self, suite: MockSuite):
        self.suite = suite
        self.supports_conditioning_gradient = True
        self.info = BackendInfo(id="mock-scorer", version="1")

    def embed_image(self, image: GeneratedImage) -> np.ndarray:
        stats = image_statistics(image)
        proj = _hash_rng(self.suite.seed, "scorer-image").standard_normal(
            (self.suite.channel_dim, stats.size)
        )
        v = proj @ stats
        return v / np.linalg.norm(v)

    def embed_text(self, text: str) -> np.ndarray:
        words = text.split()
        if not words:
            raise ValidationError("cannot embed empty text")
        rows = np.stack(
            [_unit_vector(self.suite.channel_dim, self.suite.seed, "scorer-text", w) for w in words]
        )
        pooled = rows.mean(axis=0)
        norm = np.linalg.norm(pooled)
        if norm == 0.0:
            raise ValidationError("degenerate text embedding")
        return pooled / norm

    def embed_audio(self, audio: AudioClip) -> np.ndarray:
        rms = float(np.sqrt(np.mean(audio.samples**2)))
        crossings = float(np.mean(np.abs(np.diff(np.signbit(audio.samples).astype(np.float64)))))
        feats = np.array([rms, crossings, np.log1p(audio.duration), np.mean(np.abs(audio.samples))])
        proj = _hash_rng(self.suite.seed, "scorer-audio").standard_normal(
            (self.suite.channel_dim, feats.size)
        )
        v = proj @ feats
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise ValidationError("degenerate audio embedding")
        return v / norm

    def text_image_similarity(self, image: GeneratedImage, text: str) -> float:
        return float(self.embed_image(image) @ self.embed_text(text))

    def audio_image_similarity(self, image: GeneratedImage, audio: AudioClip) -> float:
        return float(self.embed_image(image) @ self.embed_audio(audio))

    def _with_gradient(
        self, conditioning: np.ndarray, images: Sequence[GeneratedImage], kind: str
    ) -> tuple[float, np.ndarray]:
        if len(images) == 0:
            raise ValidationError("scorer needs at least one image")
        value, grad = pooled_cosine_with_gradient(conditioning, self.suite.target(kind))
        # Mean over the augmented batch of a batch-constant similarity.
        return value, grad

    def text_similarity_with_gradient(self, conditioning, images, text):
        return self._with_gradient(conditioning, images, "text")

    def audio_similarity_with_gradient(self, conditioning, images, audio):
        return self._with_gradient(conditioning, images, "audio")


_DETECTOR_VOCAB = (
    "person", "dog", "cat", "car", "bird", "motorcycle", "baby", "train", "boat", "clock",
)


class MockDetector:
    def __init__(self, suite: MockSuite):
        self.suite = suite
        self.info = BackendInfo(id="mock-detector", version="1")

    def detect(self, image: GeneratedImage) -> list[Detection]:
        stats = image_statistics(image)
        key = hashlib.blake2b(stats.tobytes(), digest_size=8).hexdigest()
        count = 1 + _hash_int(self.suite.seed, "det-count", key) % 2
        h, w = image.pixels.shape[:2]
        out = []
        for i in range(count):
            cls = _DETECTOR_VOCAB[_hash_int(self.suite.seed, "det-class", key, i) % len(_DETECTOR_VOCAB)]
            conf = 0.35 + 0.6 * _hash01(self.suite.seed, "det-conf", key, i)
            x = (w / 4.0) * (_hash_int(self.suite.seed, "det-x", key, i) % 2)
            y = (h / 4.0) * (_hash_int(self.suite.seed, "det-y", key, i) % 2)
            out.append(Detection(class_name=cls, confidence=conf, bbox=(x, y, w / 2.0, h / 2.0)))
        return out


class MockClassifier:
    def __init__(self, suite: MockSuite):
        self.suite = suite
        self.n_classes = suite.n_classes
        self.info = BackendInfo(id="mock-classifier", version="1")

    def class_probabilities(self, image: GeneratedImage) -> np.ndarray:
        stats = image_statistics(image)
        proj = _hash_rng(self.suite.seed, "classifier").standard_normal(
            (self.n_classes, stats.size)
        )
        logits = 4.0 * (proj @ stats)
        logits -= logits.max()
        probs = np.exp(logits)
        return probs / probs.sum()


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

BACKEND_ROLES = (
    "captioner",
    "tagger",
    "text_encoder",
    "generator",
    "scorer",
    "detector",
    "classifier",
)

_REGISTRY: dict[str, dict[str, Callable[[MockSuite], object]]] = {role: {} for role in BACKEND_ROLES}


def register_backend(role: str, name: str, factory: Callable[[MockSuite], object]) -> None:
    if role not in _REGISTRY:
        raise ValidationError(f"unknown backend role {role!r}")
    _REGISTRY[role][name] = factory


def create_backend(role: str, name: str, suite: MockSuite):
    if role not in _REGISTRY:
        raise ValidationError(f"unknown backend role {role!r}")
    try:
        factory = _REGISTRY[role][name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY[role])) or "none"
        raise BackendError(f"no {role} backend named {name!r} (available: {known})") from None
    return factory(suite)


register_backend("captioner", "mock", MockCaptioner)
register_backend("tagger", "mock", MockTagger)
register_backend("text_encoder", "mock", MockTextEncoder)
register_backend("generator", "mock", MockGenerator)
register_backend("scorer", "mock", MockScorer)
register_backend("detector", "mock", MockDetector)
register_backend("classifier", "mock", MockClassifier)


@dataclass(frozen=True)
class BackendSet:
    """Resolved backend instances for one pipeline run."""

    captioner: CaptionerBackend
    tagger: TaggerBackend
    text_encoder: TextEncoderBackend
    generator: GeneratorBackend
    scorer: ScorerBackend
    detector: DetectorBackend
    classifier: ClassifierBackend

    def infos(self) -> dict[str, dict[str, str]]:
        return {
            role: {"id": getattr(self, role).info.id, "version": getattr(self, role).info.version}
            for role in BACKEND_ROLES
        }

    def all_concurrent_safe(self) -> bool:
        return all(getattr(self, role).info.concurrent_safe for role in BACKEND_ROLES)


def create_backend_set(names: dict[str, str], suite: MockSuite) -> BackendSet:
    """Resolve one backend per role; `names` maps role to registry name."""
    missing = [role for role in BACKEND_ROLES if role not in names]
    if missing:
        raise ValidationError(f"backend names missing for roles: {missing}")
    return BackendSet(**{role: create_backend(role, names[role], suite) for role in BACKEND_ROLES})
