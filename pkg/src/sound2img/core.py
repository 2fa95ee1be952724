"""Shared domain types, the tensor exchange file format, audio I/O and run manifests.

Every value exchanged between pipeline stages or with a backend is one of the
immutable types defined here.  Arrays are frozen (non-writeable) on
construction so instances can be shared across threads without copying.

Tensor exchange uses a minimal binary format ("WTB1"): a 4-byte magic, a
4-byte little-endian header length, a UTF-8 JSON header
``{"dtype": "f32", "shape": [...], "order": "C"}`` and the raw little-endian
IEEE-754 32-bit payload.  All serialized floating point is 32-bit; internal
computation may run in 64-bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TENSOR_MAGIC = b"WTB1"


class Sound2ImgError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(Sound2ImgError):
    """An argument or constructed value violates a documented invariant."""


class TensorFormatError(Sound2ImgError):
    """A tensor file is not a valid WTB1 stream (bad magic or header)."""


class TensorCorruptionError(TensorFormatError):
    """A tensor file's header and payload disagree (truncation, size mismatch)."""


class BackendError(Sound2ImgError):
    """A backend failed, broke its contract, or lacks a required capability."""


class OptimizationDivergedError(Sound2ImgError):
    """The optimization loop produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class DatasetError(Sound2ImgError):
    """Dataset construction could not proceed (missing class, bad layout)."""


def derive_seed(seed: int, stage: str) -> int:
    """Fan one master seed out to a named stage, stable across runs and platforms."""
    digest = hashlib.blake2b(f"{seed}:{stage}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class TensorBuffer:
    """Shape-tagged flat array of 32-bit reals in row-major order."""

    shape: tuple[int, ...]
    data: np.ndarray

    def __init__(self, shape: Sequence[int], data: Sequence[float] | np.ndarray):
        shape_t = tuple(int(d) for d in shape)
        if any(d <= 0 for d in shape_t):
            raise ValidationError(f"tensor shape must be positive, got {shape_t}")
        flat = np.asarray(data, dtype=np.float32).ravel()
        expected = math.prod(shape_t)
        if flat.size != expected:
            raise ValidationError(
                f"shape {shape_t} implies {expected} elements, data has {flat.size}"
            )
        if not np.isfinite(flat).all():
            raise ValidationError("tensor data contains NaN or Inf")
        object.__setattr__(self, "shape", shape_t)
        object.__setattr__(self, "data", _freeze(flat))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TensorBuffer":
        arr = np.asarray(arr)
        return cls(arr.shape, arr.astype(np.float32, copy=False).ravel())

    @property
    def array(self) -> np.ndarray:
        """Read-only view reshaped to ``shape``."""
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorBuffer):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )

    def __hash__(self):  # frozen dataclass with ndarray field
        return hash((self.shape, self.data.tobytes()))


def write_tensor(t: TensorBuffer, path: str | Path) -> None:
    """Serialize ``t`` to a WTB1 file at ``path``.

    The parent directory must exist; I/O failures propagate as ``OSError``.
    """
    header = json.dumps(
        {"dtype": "f32", "shape": list(t.shape), "order": "C"},
        separators=(",", ":"),
    ).encode("utf-8")
    payload = t.data.astype("<f4", copy=False).tobytes()
    blob = TENSOR_MAGIC + struct.pack("<I", len(header)) + header + payload
    Path(path).write_bytes(blob)


def read_tensor(path: str | Path) -> TensorBuffer:
    """Read a WTB1 file back into a :class:`TensorBuffer`."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: not a WTB1 tensor file")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise TensorCorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("dtype") != "f32" or header.get("order") != "C":
        raise TensorFormatError(f"{path}: unsupported dtype/order in header {header}")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(d, int) and d > 0 for d in shape):
        raise TensorFormatError(f"{path}: bad shape in header: {shape!r}")
    payload = blob[8 + header_len :]
    expected = 4 * math.prod(shape)
    if len(payload) != expected:
        raise TensorCorruptionError(
            f"{path}: payload is {len(payload)} bytes, shape {shape} needs {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4")
    return TensorBuffer(shape, data)


@dataclass(frozen=True)
class AudioClip:
    """A mono audio signal with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    source_path: str = ""
    label: str | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if samples.size == 0:
            raise ValidationError("audio clip has no samples")
        rate = int(self.sample_rate)
        if rate <= 0:
            raise ValidationError(f"sample rate must be positive, got {rate}")
        if not np.isfinite(samples).all():
            raise ValidationError("audio samples contain NaN or Inf")
        if samples.min() < -1.0 or samples.max() > 1.0:
            raise ValidationError("audio samples outside [-1, 1]")
        object.__setattr__(self, "samples", _freeze(samples))
        object.__setattr__(self, "sample_rate", rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def energy(self) -> float:
        """Sum of squared samples."""
        return float(np.sum(self.samples * self.samples))

    def content_digest(self) -> str:
        """Stable hex digest of the quantized signal, used to key mock behavior."""
        quantized = np.clip(np.round(self.samples * 32768.0), -32768, 32767).astype("<i2")
        h = hashlib.blake2b(digest_size=16)
        h.update(str(self.sample_rate).encode())
        h.update((self.label or "").encode("utf-8"))
        h.update(quantized.tobytes())
        return h.hexdigest()


def amplify(a: AudioClip, k: float) -> AudioClip:
    """Scale every sample by ``k`` and clamp back into [-1, 1]."""
    if not (k > 0):
        raise ValidationError("amplify must be > 0")
    scaled = np.clip(a.samples * float(k), -1.0, 1.0)
    return replace(a, samples=scaled)


def read_wav(path: str | Path, label: str | None = None) -> AudioClip:
    """Read a 16-bit PCM WAV file (mono or stereo; stereo is downmixed)."""
    with wave.open(str(path), "rb") as wav:
        if wav.getcomptype() != "NONE":
            raise ValidationError(f"{path}: compressed WAV not supported")
        if wav.getsampwidth() != 2:
            raise ValidationError(
                f"{path}: only 16-bit PCM WAV is supported, got {8 * wav.getsampwidth()}-bit"
            )
        channels = wav.getnchannels()
        if channels not in (1, 2):
            raise ValidationError(f"{path}: expected mono or stereo, got {channels} channels")
        rate = wav.getframerate()
        raw = wav.readframes(wav.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    return AudioClip(samples=samples, sample_rate=rate, source_path=str(path), label=label)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as mono 16-bit PCM WAV."""
    quantized = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(clip.sample_rate)
        wav.writeframes(quantized.tobytes())


@dataclass(frozen=True)
class Caption:
    """Caption text plus per-word noun probabilities and encoder-token alignment.

    ``encoder_alignment[i]`` lists the encoder-token indices that word ``i``
    occupies; lists are strictly increasing and globally disjoint.  A word
    that did not fit in the encoder window has an empty alignment.
    """

    text: str
    words: tuple[str, ...]
    noun_probability: tuple[float, ...]
    encoder_alignment: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        words = tuple(str(w) for w in self.words)
        probs = tuple(float(p) for p in self.noun_probability)
        alignment = tuple(tuple(int(i) for i in a) for a in self.encoder_alignment)
        if not (len(words) == len(probs) == len(alignment)):
            raise ValidationError(
                "caption words, noun probabilities and alignment must have equal length"
            )
        if any(p < 0.0 or p > 1.0 for p in probs):
            raise ValidationError("noun probabilities must lie in [0, 1]")
        seen: set[int] = set()
        for word_idxs in alignment:
            if any(b <= a for a, b in zip(word_idxs, word_idxs[1:])):
                raise ValidationError("alignment indices must be strictly increasing per word")
            for idx in word_idxs:
                if idx < 0:
                    raise ValidationError("alignment indices must be non-negative")
                if idx in seen:
                    raise ValidationError(f"alignment index {idx} assigned to two words")
                seen.add(idx)
        object.__setattr__(self, "words", words)
        object.__setattr__(self, "noun_probability", probs)
        object.__setattr__(self, "encoder_alignment", alignment)

    def noun_flags(self, threshold: float) -> tuple[bool, ...]:
        return tuple(p >= threshold for p in self.noun_probability)

    def aligned_indices(self) -> tuple[int, ...]:
        return tuple(sorted(i for word in self.encoder_alignment for i in word))


AUDIO_ATTENTION = "audio"
SENTENCE_ATTENTION = "sentence"


@dataclass(frozen=True)
class AttentionVector:
    """Per-word scalar attention in [0, 1]; kind is 'audio' or 'sentence'."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in (AUDIO_ATTENTION, SENTENCE_ATTENTION):
            raise ValidationError(f"unknown attention kind {self.kind!r}")
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size == 0:
            raise ValidationError("attention vector is empty")
        if not np.isfinite(values).all() or values.min() < 0.0 or values.max() > 1.0:
            raise ValidationError("attention values must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(values))

    def __len__(self) -> int:
        return int(self.values.size)

    def zeroed(self) -> "AttentionVector":
        return AttentionVector(self.kind, np.zeros_like(self.values))


@dataclass(frozen=True)
class TokenWeights:
    """Per-encoder-token scalar weights with noun / caption membership masks.

    Tokens outside the caption span (begin/end markers, padding, user text)
    are neutral: weight exactly 1.0, excluded from both optimization groups.
    """

    weights: np.ndarray
    noun_mask: np.ndarray
    caption_mask: np.ndarray
    caption_token_count: int

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        noun = np.asarray(self.noun_mask, dtype=bool).ravel()
        cap = np.asarray(self.caption_mask, dtype=bool).ravel()
        if not (weights.size == noun.size == cap.size):
            raise ValidationError("weights and masks must have equal length")
        if not np.isfinite(weights).all():
            raise ValidationError("token weights must be finite")
        if np.any(noun & ~cap):
            raise ValidationError("noun tokens must be caption tokens")
        neutral = ~cap
        if np.any(weights[neutral] != 1.0):
            raise ValidationError("non-caption tokens must keep weight exactly 1.0")
        count = int(cap.sum())
        if int(self.caption_token_count) != count:
            raise ValidationError(
                f"caption_token_count {self.caption_token_count} != mask population {count}"
            )
        object.__setattr__(self, "weights", _freeze(weights))
        object.__setattr__(self, "noun_mask", _freeze(noun))
        object.__setattr__(self, "caption_mask", _freeze(cap))
        object.__setattr__(self, "caption_token_count", count)

    def __len__(self) -> int:
        return int(self.weights.size)

    def with_weights(self, weights: np.ndarray) -> "TokenWeights":
        return TokenWeights(weights, self.noun_mask, self.caption_mask, self.caption_token_count)


@dataclass(frozen=True)
class LatentConditioning:
    """Text-encoder output: one embedding row per encoder token."""

    embedding: TensorBuffer

    def __post_init__(self):
        if len(self.embedding.shape) != 2:
            raise ValidationError(
                f"conditioning must be 2-D [tokens, channels], got shape {self.embedding.shape}"
            )

    @property
    def token_count(self) -> int:
        return self.embedding.shape[0]

    @property
    def channel_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def array(self) -> np.ndarray:
        return self.embedding.array


@dataclass(frozen=True)
class GeneratedImage:
    """RGB image with float pixels in [0, 1] plus the seed that produced it."""

    pixels: TensorBuffer
    seed: int

    def __post_init__(self):
        shape = self.pixels.shape
        if len(shape) != 3 or shape[2] != 3:
            raise ValidationError(f"image must be [height, width, 3], got {shape}")
        arr = self.pixels.data
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def array(self) -> np.ndarray:
        return self.pixels.array

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.round(self.array * 255.0), 0, 255).astype(np.uint8)

    def save_png(self, path: str | Path) -> None:
        from PIL import Image

        Image.fromarray(self.to_uint8(), mode="RGB").save(str(path), format="PNG")


def load_png(path: str | Path, seed: int = 0) -> GeneratedImage:
    from PIL import Image

    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return GeneratedImage(pixels=TensorBuffer.from_array(arr), seed=seed)


def write_json_atomic(obj: object, path: str | Path) -> None:
    """Write pretty-printed JSON via a temp file + rename (no partial files)."""
    path = Path(path)
    text = json.dumps(obj, indent=2, ensure_ascii=False) + "\n"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


@dataclass(frozen=True)
class RunManifest:
    """Full provenance record of one generation run.

    Serialized as pretty-printed UTF-8 JSON with keys in the fixed order of
    :meth:`to_dict`.  With deterministic backends and ``timings`` disabled,
    two runs with equal inputs produce byte-identical manifest files.
    """

    run_id: str
    seed: int
    derived_seeds: dict
    audio: dict
    config: dict
    backends: dict
    prompt: str
    caption: dict
    attention: dict
    ablation: tuple[str, ...]
    token_weights: dict
    losses: tuple[dict, ...]
    outputs: dict
    timings: dict | None = None

    def to_dict(self) -> dict:
        doc = {
            "schema": "sound2img-run/1",
            "run_id": self.run_id,
            "seed": self.seed,
            "derived_seeds": self.derived_seeds,
            "audio": self.audio,
            "config": self.config,
            "backends": self.backends,
            "prompt": self.prompt,
            "caption": self.caption,
            "attention": self.attention,
            "ablation": list(self.ablation),
            "token_weights": self.token_weights,
            "losses": list(self.losses),
            "outputs": self.outputs,
        }
        if self.timings is not None:
            doc["timings"] = self.timings
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        if doc.get("schema") != "sound2img-run/1":
            raise ValidationError(f"unknown manifest schema {doc.get('schema')!r}")
        return cls(
            run_id=doc["run_id"],
            seed=doc["seed"],
            derived_seeds=doc["derived_seeds"],
            audio=doc["audio"],
            config=doc["config"],
            backends=doc["backends"],
            prompt=doc["prompt"],
            caption=doc["caption"],
            attention=doc["attention"],
            ablation=tuple(doc["ablation"]),
            token_weights=doc["token_weights"],
            losses=tuple(doc["losses"]),
            outputs=doc["outputs"],
            timings=doc.get("timings"),
        )

    def write(self, path: str | Path) -> None:
        write_json_atomic(self.to_dict(), path)

    @staticmethod
    def read(path: str | Path) -> "RunManifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return RunManifest.from_dict(doc)
