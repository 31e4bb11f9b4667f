"""Prompt rendering and the frozen text-embedding cache.

Embeddings come from an external frozen encoder (a real CLIP-style model, or the
deterministic hashing stand-in used throughout the test suite). They are computed
once per (modality, class) and cached to disk; nothing downstream ever touches the
encoder again.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .core import ClassTable, Modality
from .errors import CompatibilityError, ConfigError, FormatError, ProtocolError

MAGIC = b"MMSEGEMB"
FORMAT_VERSION = 1


class TemplateVariant(Enum):
    """Prompt template flavours; ONE_HOT bypasses text entirely."""

    V1 = "A photo of a {CLS}."
    V2 = "There is a {CLS} in this {MODALITY}."
    V3 = "A {MODALITY} imaging of a {CLS}."
    ONE_HOT = ""

    @property
    def pattern(self) -> str:
        if self is TemplateVariant.ONE_HOT:
            raise ConfigError("one-hot embeddings have no prompt pattern")
        return self.value

    @property
    def modality_sensitive(self) -> bool:
        """Whether CT and MR prompts differ textually."""
        return self in (TemplateVariant.V2, TemplateVariant.V3)


def render_prompt(template: TemplateVariant, modality: Modality, cls_name: str) -> str:
    """Expand a template for one class, spelling the modality out in full."""
    if template is TemplateVariant.ONE_HOT:
        raise ConfigError("ONE_HOT has no prompt text to render")
    return template.pattern.format(MODALITY=modality.long_name, CLS=cls_name)


@runtime_checkable
class TextEncoderProvider(Protocol):
    """A frozen text encoder: identical text must always yield identical vectors."""

    encoder_id: str

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return an (N, d) float array of embeddings, one row per input text."""
        ...


class HashingTextEncoder:
    """Deterministic pseudo-encoder: seeds a PRNG from the SHA-256 of each text.

    Stands in for a real language model so the full pipeline runs offline.
    Distinct texts get (almost surely) distinct unit vectors; identical texts get
    bit-identical vectors across processes and platforms.
    """

    def __init__(self, d_txt: int = 512):
        if d_txt < 1:
            raise ConfigError(f"embedding dimension must be >= 1, got {d_txt}")
        self.d_txt = d_txt
        self.encoder_id = f"hash-sha256-{d_txt}d"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.d_txt), dtype=np.float32)
        for i, text in enumerate(texts):
            seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
            rng = np.random.Generator(np.random.PCG64(seed))
            v = rng.standard_normal(self.d_txt)
            out[i] = (v / np.linalg.norm(v)).astype(np.float32)
        return out


class ClipTextEncoder:
    """Adapter around a pretrained CLIP text tower (frozen, eval mode).

    Requires ``transformers`` plus locally available weights; import and load are
    deferred so offline environments only pay when the adapter is actually used.
    """

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:
            raise ConfigError("ClipTextEncoder needs the 'transformers' package") from exc
        try:
            self._tokenizer = CLIPTokenizer.from_pretrained(model_name)
            self._model = CLIPModel.from_pretrained(model_name).to(device)
        except OSError as exc:
            raise ConfigError(f"could not load pretrained weights for {model_name!r}") from exc
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self._device = device
        self.encoder_id = model_name

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        import torch

        tokens = self._tokenizer(list(texts), padding=True, return_tensors="pt").to(self._device)
        with torch.no_grad():
            feats = self._model.get_text_features(**tokens)
        return feats.cpu().numpy().astype(np.float32)


@dataclass(frozen=True)
class EmbeddingHeader:
    encoder_id: str
    variant: TemplateVariant
    num_classes: int
    d_txt: int
    class_hash: bytes
    version: int = FORMAT_VERSION


@dataclass(frozen=True)
class EmbeddingTable:
    """Frozen per-(modality, class) text vectors: ``ct``/``mr`` are (K, d_txt)."""

    header: EmbeddingHeader
    ct: np.ndarray
    mr: np.ndarray

    def __post_init__(self) -> None:
        k, d = self.header.num_classes, self.header.d_txt
        for name, arr in (("ct", self.ct), ("mr", self.mr)):
            if arr.shape != (k, d):
                raise ProtocolError(f"{name} vectors have shape {arr.shape}, expected {(k, d)}")
            arr.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return self.header.num_classes

    @property
    def d_txt(self) -> int:
        return self.header.d_txt

    def vector(self, modality: Modality, k: int) -> np.ndarray:
        """The frozen vector for class k (1-based) under the given modality's prompt."""
        if not 1 <= k <= self.num_classes:
            raise IndexError(f"class index {k} outside 1..{self.num_classes}")
        arr = self.ct if modality is Modality.CT else self.mr
        return arr[k - 1]

    def stacked(self) -> np.ndarray:
        """(2, K, d_txt) array ordered CT, MR; handy for model buffers."""
        return np.stack([self.ct, self.mr], axis=0)


def build_embedding_table(
    provider: TextEncoderProvider | None,
    template: TemplateVariant,
    classes: ClassTable,
) -> EmbeddingTable:
    """Embed every (modality, class) prompt once and freeze the result.

    ONE_HOT ignores the provider: vectors are the K standard basis vectors,
    identical for both modalities.
    """
    k = classes.num_classes
    if template is TemplateVariant.ONE_HOT:
        eye = np.eye(k, dtype=np.float32)
        header = EmbeddingHeader("one-hot", template, k, k, classes.content_hash())
        return EmbeddingTable(header, eye.copy(), eye.copy())

    if provider is None:
        raise ConfigError(f"template {template.name} needs a text encoder provider")

    per_modality = {}
    d_txt: int | None = None
    for modality in (Modality.CT, Modality.MR):
        prompts = [render_prompt(template, modality, name) for name in classes.names]
        vectors = np.asarray(provider.embed(prompts), dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != k:
            raise ProtocolError(
                f"provider returned shape {vectors.shape} for {k} prompts"
            )
        if d_txt is None:
            d_txt = vectors.shape[1]
        elif vectors.shape[1] != d_txt:
            raise ProtocolError(
                f"provider dimension changed between calls: {vectors.shape[1]} vs {d_txt}"
            )
        per_modality[modality] = vectors

    header = EmbeddingHeader(provider.encoder_id, template, k, int(d_txt), classes.content_hash())
    return EmbeddingTable(header, per_modality[Modality.CT], per_modality[Modality.MR])


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("embedding cache file is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def take_u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def take_str(self) -> str:
        return self.take(self.take_u32()).decode("utf-8")


def dumps_table(table: EmbeddingTable) -> bytes:
    """Serialize to the fixed little-endian binary cache layout."""
    h = table.header
    parts = [
        MAGIC,
        struct.pack("<I", h.version),
        _pack_str(h.encoder_id),
        _pack_str(h.variant.name),
        struct.pack("<I", h.num_classes),
        struct.pack("<I", h.d_txt),
        h.class_hash,
    ]
    for arr in (table.ct, table.mr):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_table(table: EmbeddingTable, path: str | Path) -> None:
    Path(path).write_bytes(dumps_table(table))


def loads_table(blob: bytes, expected_classes: ClassTable | None = None) -> EmbeddingTable:
    """Parse the binary layout; verify the class-table hash when one is supplied."""
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not an embedding cache (bad magic)")
    version = r.take_u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported cache version {version}")
    encoder_id = r.take_str()
    variant_name = r.take_str()
    try:
        variant = TemplateVariant[variant_name]
    except KeyError:
        raise FormatError(f"unknown template variant {variant_name!r} in cache") from None
    k = r.take_u32()
    d_txt = r.take_u32()
    class_hash = r.take(32)

    vec_bytes = k * d_txt * 4
    ct = np.frombuffer(r.take(vec_bytes), dtype="<f4").reshape(k, d_txt).copy()
    mr = np.frombuffer(r.take(vec_bytes), dtype="<f4").reshape(k, d_txt).copy()
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes in embedding cache")

    if expected_classes is not None and expected_classes.content_hash() != class_hash:
        raise CompatibilityError(
            "embedding cache was built for a different class table "
            f"(task {expected_classes.task_id!r} does not match)"
        )
    header = EmbeddingHeader(encoder_id, variant, k, d_txt, class_hash, version)
    return EmbeddingTable(header, ct, mr)


def load_table(path: str | Path, expected_classes: ClassTable | None = None) -> EmbeddingTable:
    """Load a cache file; verify its class-table hash when one is supplied."""
    try:
        return loads_table(Path(path).read_bytes(), expected_classes)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
