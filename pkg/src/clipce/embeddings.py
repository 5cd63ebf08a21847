"""Vision-language embedding providers and mutually exclusive prompt pairs.

Two backends share one interface:

* :class:`StubProvider` - deterministic, weight-free. Text embeddings are
  pseudo-random unit vectors seeded from a hash of the text. Image crops
  embed as a convex mixture of the positive and negative prompt embeddings,
  steered by a degradation score, so AME weights are predictable in tests.
* :class:`ClipProvider` - a pretrained CLIP ViT-B/32 loaded lazily through
  ``transformers``.

Embeddings are plain 1-D ``float64`` numpy arrays with unit L2 norm.
"""

from __future__ import annotations

import hashlib
import re
import threading
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image

from .exceptions import InputError, ProviderError, TemplateError

CLS_TOKEN = "{cls}"
DEFAULT_TEMPLATE_POS = "a photo of a {cls}"
DEFAULT_TEMPLATE_NEG = "a photo without {cls}"

STUB_TOKEN_LIMIT = 77


class TruncationWarning(UserWarning):
    """Text was cut to fit the backend's token limit."""


@dataclass(frozen=True)
class PromptPair:
    class_name: str
    positive_text: str
    negative_text: str


@dataclass(frozen=True)
class ProviderDescriptor:
    backend_id: str
    embedding_dim: int
    deterministic: bool


@dataclass(frozen=True)
class CropPolicy:
    """How an object box becomes an encoder input.

    The box is grown to a square by padding its shorter side symmetrically,
    clipped to the image, then resized to ``target_size`` pixels a side.
    """

    square_pad: bool = True
    target_size: int = 224

    def __post_init__(self):
        if self.target_size < 1:
            raise InputError(f"target_size must be positive, got {self.target_size}")


def build_prompt_pair(
    class_name: str,
    template_pos: str = DEFAULT_TEMPLATE_POS,
    template_neg: str = DEFAULT_TEMPLATE_NEG,
) -> PromptPair:
    if not class_name:
        raise InputError("class name must be nonempty")
    for name, tmpl in (("template_pos", template_pos), ("template_neg", template_neg)):
        if tmpl.count(CLS_TOKEN) != 1:
            raise TemplateError(
                f"{name} must contain {CLS_TOKEN!r} exactly once, got {tmpl!r}"
            )
    pos = template_pos.replace(CLS_TOKEN, class_name)
    neg = template_neg.replace(CLS_TOKEN, class_name)
    if pos == neg:
        raise TemplateError("positive and negative prompts are identical")
    return PromptPair(class_name, pos, neg)


def l2_normalize(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v)):
        raise InputError("embedding has non-finite entries")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise InputError("cannot normalize a zero vector")
    return v / norm


def check_embedding(v: np.ndarray, dim: int | None = None, atol: float = 1e-5) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise InputError(f"embedding must be 1-D, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise InputError(f"embedding has dim {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise InputError("embedding has non-finite entries")
    if abs(np.linalg.norm(v) - 1.0) > atol:
        raise InputError("embedding is not unit-norm")
    return v


def square_box(box, image_shape) -> tuple[int, int, int, int]:
    """Expand an (x, y, w, h) box to a square and clip it to the image.

    Returns integer pixel bounds ``(x0, y0, x1, y1)``, exclusive at the far
    end. Raises :class:`InputError` if nothing is left after clipping.
    """
    x, y, w, h = (float(c) for c in box)
    if w <= 0 or h <= 0:
        raise InputError(f"crop box has zero area: {box}")
    side = max(w, h)
    cx, cy = x + w / 2.0, y + h / 2.0
    return _clip_bounds(cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0, image_shape)


def _clip_bounds(x0, y0, x1, y1, image_shape):
    H, W = image_shape[:2]
    ix0 = max(0, int(np.floor(x0)))
    iy0 = max(0, int(np.floor(y0)))
    ix1 = min(W, int(np.ceil(x1)))
    iy1 = min(H, int(np.ceil(y1)))
    if ix1 <= ix0 or iy1 <= iy0:
        raise InputError("crop is empty after clipping to image bounds")
    return ix0, iy0, ix1, iy1


def crop_region(image: np.ndarray, box, policy: CropPolicy | None = None) -> np.ndarray:
    """Cut ``box`` out of an HxWx3 float image following ``policy``."""
    policy = policy or CropPolicy()
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"image must be HxWx3, got shape {image.shape}")
    if policy.square_pad:
        x0, y0, x1, y1 = square_box(box, image.shape)
    else:
        x, y, w, h = (float(c) for c in box)
        if w <= 0 or h <= 0:
            raise InputError(f"crop box has zero area: {box}")
        x0, y0, x1, y1 = _clip_bounds(x, y, x + w, y + h, image.shape)
    crop = image[y0:y1, x0:x1]
    return resize_image(crop, policy.target_size)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return np.ascontiguousarray(image, dtype=np.float64)
    out = np.empty((size, size, 3), dtype=np.float64)
    for c in range(3):
        chan = Image.fromarray(np.asarray(image[..., c], dtype=np.float32), mode="F")
        out[..., c] = np.asarray(chan.resize((size, size), Image.BILINEAR))
    return out


def _digest_seed(*parts: bytes) -> int:
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(8, "little"))
        h.update(p)
    return int.from_bytes(h.digest()[:8], "little")


class EmbeddingProvider:
    """Interface every backend implements."""

    descriptor: ProviderDescriptor

    @property
    def dim(self) -> int:
        return self.descriptor.embedding_dim

    @property
    def backend_id(self) -> str:
        return self.descriptor.backend_id

    def encode_text(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def encode_texts(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.encode_text(t) for t in texts]

    def encode_image_crop(self, crop, policy=None, *, prompt=None, degradation=None):
        raise NotImplementedError


class StubProvider(EmbeddingProvider):
    """Deterministic stand-in for a CLIP backend.

    Parameters
    ----------
    seed : int
        Mixed into every hash, so different seeds give unrelated spaces.
    dim : int
        Embedding dimension.
    noise : float
        Norm of the seeded perturbation added to image embeddings before
        normalisation.
    contrast_ref : float
        Pixel standard deviation treated as fully visible when no explicit
        degradation score is supplied.
    """

    def __init__(self, seed: int = 0, dim: int = 64, noise: float = 0.02, contrast_ref: float = 0.25):
        if dim < 2:
            raise InputError("stub embedding dim must be at least 2")
        self.seed = int(seed)
        self.noise = float(noise)
        self.contrast_ref = float(contrast_ref)
        self.descriptor = ProviderDescriptor(f"stub:{self.seed}", int(dim), True)

    def _seed_bytes(self) -> bytes:
        return str(self.seed).encode()

    def encode_text(self, text: str) -> np.ndarray:
        if not text:
            raise InputError("text must be nonempty")
        tokens = text.split()
        if len(tokens) > STUB_TOKEN_LIMIT:
            warnings.warn(
                f"text truncated from {len(tokens)} to {STUB_TOKEN_LIMIT} tokens",
                TruncationWarning,
                stacklevel=2,
            )
            text = " ".join(tokens[:STUB_TOKEN_LIMIT])
        rng = np.random.default_rng(_digest_seed(b"text", self._seed_bytes(), text.encode()))
        return l2_normalize(rng.standard_normal(self.dim))

    def degradation_from_pixels(self, crop: np.ndarray) -> float:
        """Contrast-based visibility proxy: flat crops count as degraded."""
        std = float(np.asarray(crop, dtype=np.float64).std())
        return float(np.clip(1.0 - std / self.contrast_ref, 0.0, 1.0))

    def encode_image_crop(self, crop, policy=None, *, prompt: PromptPair | None = None, degradation=None):
        crop = np.ascontiguousarray(crop, dtype=np.float64)
        if crop.ndim != 3 or crop.shape[0] == 0 or crop.shape[1] == 0:
            raise InputError(f"crop must be a non-empty HxWxC array, got shape {crop.shape}")
        pix_seed = _digest_seed(b"image", self._seed_bytes(), str(crop.shape).encode(), crop.tobytes())
        rng = np.random.default_rng(pix_seed)
        eps = rng.standard_normal(self.dim)
        eps *= self.noise / np.linalg.norm(eps)
        if prompt is None:
            return l2_normalize(rng.standard_normal(self.dim))
        g = self.degradation_from_pixels(crop) if degradation is None else float(degradation)
        if not 0.0 <= g <= 1.0:
            raise InputError(f"degradation must lie in [0, 1], got {g}")
        t_pos = self.encode_text(prompt.positive_text)
        t_neg = self.encode_text(prompt.negative_text)
        return l2_normalize((1.0 - g) * t_pos + g * t_neg + eps)


class ClipProvider(EmbeddingProvider):
    """Pretrained CLIP ViT-B/32 via ``transformers``; frozen, loaded on first use."""

    MODEL_NAME = "openai/clip-vit-base-patch32"

    def __init__(self, model_name: str = MODEL_NAME, device: str = "cpu"):
        self.model_name = model_name
        self.device = device
        self._model = None
        self._processor = None
        self._lock = threading.Lock()
        self.descriptor = ProviderDescriptor(f"real:{model_name}", 512, False)

    def _load(self):
        with self._lock:
            if self._model is not None:
                return
            try:
                import torch  # noqa: F401
                from transformers import CLIPModel, CLIPProcessor

                model = CLIPModel.from_pretrained(self.model_name)
                processor = CLIPProcessor.from_pretrained(self.model_name)
            except Exception as exc:  # any load failure means no backend
                raise ProviderError(f"cannot load CLIP backend {self.model_name!r}: {exc}") from exc
            model.eval().to(self.device)
            for p in model.parameters():
                p.requires_grad_(False)
            self._model, self._processor = model, processor
            self.descriptor = ProviderDescriptor(
                f"real:{self.model_name}", int(model.config.projection_dim), False
            )

    def encode_text(self, text: str) -> np.ndarray:
        if not text:
            raise InputError("text must be nonempty")
        self._load()
        import torch

        limit = self._processor.tokenizer.model_max_length
        n_tokens = len(self._processor.tokenizer(text)["input_ids"])
        if n_tokens > limit:
            warnings.warn(f"text truncated from {n_tokens} to {limit} tokens", TruncationWarning, stacklevel=2)
        inputs = self._processor(text=[text], return_tensors="pt", padding=True, truncation=True)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs.to(self.device))
        return l2_normalize(feats[0].double().cpu().numpy())

    def encode_image_crop(self, crop, policy=None, *, prompt=None, degradation=None):
        crop = np.asarray(crop, dtype=np.float64)
        if crop.ndim != 3 or crop.shape[0] == 0 or crop.shape[1] == 0:
            raise InputError(f"crop must be a non-empty HxWxC array, got shape {crop.shape}")
        self._load()
        import torch

        pil = Image.fromarray(np.uint8(np.round(np.clip(crop, 0, 1) * 255)))
        inputs = self._processor(images=[pil], return_tensors="pt")
        with torch.no_grad():
            feats = self._model.get_image_features(**inputs.to(self.device))
        return l2_normalize(feats[0].double().cpu().numpy())


_STUB_RE = re.compile(r"^stub:(-?\d+)$")


def make_provider(backend: str, dim: int | None = None) -> EmbeddingProvider:
    """Build a provider from an ``embeddings.backend`` config value."""
    if backend == "real":
        return ClipProvider()
    m = _STUB_RE.match(backend)
    if m:
        return StubProvider(seed=int(m.group(1)), dim=dim or 64)
    raise ProviderError(f"unknown embeddings backend {backend!r}; expected 'real' or 'stub:<seed>'")
