"""Frozen surrogate image/text encoder pair and the contrastive head.

The image encoder is a frozen affine map followed by L2 normalization. The
text encoder is a frozen two-layer tanh map over the concatenation of a
flattened prompt block and a class word embedding, also L2-normalized.
Classification scores are cosine similarities divided by a temperature and
softmaxed. Only the prompt is ever learnable, so the text path exposes an
analytic vector-Jacobian product with respect to the prompt.

Two constructors are provided. ``build_random`` draws every weight from the
seed stream. ``build_aligned`` additionally calibrates the image map so that
clean class prototypes land exactly on the zero-prompt text features of
their class; this plays the role of pretraining and gives the zero-shot
baseline real skill that domain shift then erodes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable

import numpy as np

from .numerics import (
    InvalidArgumentError,
    check_finite,
    freeze,
    l2_normalize,
    named_stream,
    softmax,
)

ENCODER_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 32
    embed_dim: int = 16
    prompt_len: int = 4
    feature_dim: int = 32
    num_classes: int = 10
    hidden_dim: int = 64
    clip_temperature: float = 0.07
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("input_dim", "embed_dim", "prompt_len", "feature_dim",
                     "num_classes", "hidden_dim"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if not self.clip_temperature > 0:
            raise InvalidArgumentError("clip_temperature must be positive")

    @property
    def prompt_shape(self) -> tuple[int, int]:
        return (self.prompt_len, self.embed_dim)


@dataclass(eq=False)
class EncoderPair:
    """Frozen weights of both encoders; arrays are write-protected."""

    config: EncoderConfig
    w_img: np.ndarray   # (d_img, d_in)
    b_img: np.ndarray   # (d_img,)
    w1: np.ndarray      # (hidden, s*d + d)
    b1: np.ndarray      # (hidden,)
    w2: np.ndarray      # (d_img, hidden)
    b2: np.ndarray      # (d_img,)
    class_emb: np.ndarray  # (C, d)
    text_encode_calls: int = 0  # instrumentation only, not serialized

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.w_img, self.b_img, self.w1, self.b1, self.w2, self.b2,
                    self.class_emb):
            h.update(arr.tobytes())
        return h.hexdigest()


def _draw_text_side(cfg: EncoderConfig, rng: np.random.Generator):
    fan_in = cfg.prompt_len * cfg.embed_dim + cfg.embed_dim
    w1 = rng.standard_normal((cfg.hidden_dim, fan_in)) / np.sqrt(fan_in)
    b1 = 0.1 * rng.standard_normal(cfg.hidden_dim)
    w2 = rng.standard_normal((cfg.feature_dim, cfg.hidden_dim)) / np.sqrt(cfg.hidden_dim)
    b2 = 0.1 * rng.standard_normal(cfg.feature_dim)
    class_emb = rng.standard_normal((cfg.num_classes, cfg.embed_dim))
    return w1, b1, w2, b2, class_emb


def build_random(cfg: EncoderConfig) -> EncoderPair:
    """Encoder pair with purely random frozen weights."""
    rng = named_stream(cfg.seed, "encoder")
    w1, b1, w2, b2, class_emb = _draw_text_side(cfg, rng)
    w_img = rng.standard_normal((cfg.feature_dim, cfg.input_dim)) / np.sqrt(cfg.input_dim)
    b_img = np.zeros(cfg.feature_dim)
    return EncoderPair(
        config=cfg,
        w_img=freeze(w_img), b_img=freeze(b_img),
        w1=freeze(w1), b1=freeze(b1), w2=freeze(w2), b2=freeze(b2),
        class_emb=freeze(class_emb),
    )


def build_aligned(cfg: EncoderConfig, class_prototypes: np.ndarray) -> EncoderPair:
    """Encoder pair calibrated so prototypes hit their class text features.

    The image map is solved so that W @ prototype_c equals the zero-prompt
    text feature of class c exactly, with a random component in the
    prototype null space so off-prototype inputs still map richly. This is
    the surrogate for a pretrained contrastive pair: at zero shift and zero
    noise, zero-shot classification is perfect, and domain shift degrades it.
    """
    protos = np.asarray(class_prototypes, dtype=np.float64)
    if protos.shape != (cfg.num_classes, cfg.input_dim):
        raise InvalidArgumentError(
            f"prototypes must have shape {(cfg.num_classes, cfg.input_dim)}, "
            f"got {protos.shape}"
        )
    rng = named_stream(cfg.seed, "encoder")
    w1, b1, w2, b2, class_emb = _draw_text_side(cfg, rng)
    zero_u = np.hstack([np.zeros((cfg.num_classes, cfg.prompt_len * cfg.embed_dim)), class_emb])
    targets = l2_normalize(np.tanh(zero_u @ w1.T + b1) @ w2.T + b2, axis=1)
    # W solving W @ protos[c] = targets[c], plus a null-space random part.
    w_sig = targets.T @ np.linalg.pinv(protos.T)
    null_proj = np.eye(cfg.input_dim) - np.linalg.pinv(protos) @ protos
    w_rand = rng.standard_normal((cfg.feature_dim, cfg.input_dim)) / np.sqrt(cfg.input_dim)
    w_img = w_sig + w_rand @ null_proj
    return EncoderPair(
        config=cfg,
        w_img=freeze(w_img), b_img=freeze(np.zeros(cfg.feature_dim)),
        w1=freeze(w1), b1=freeze(b1), w2=freeze(w2), b2=freeze(b2),
        class_emb=freeze(class_emb),
    )


# ---------------------------------------------------------------------------
# Image path
# ---------------------------------------------------------------------------

def encode_image(pair: EncoderPair, x: np.ndarray) -> np.ndarray:
    """Unit-norm image feature of a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (pair.config.input_dim,):
        raise InvalidArgumentError(
            f"expected input of shape ({pair.config.input_dim},), got {x.shape}"
        )
    check_finite(x, "image input")
    return l2_normalize(pair.w_img @ x + pair.b_img)


def encode_images(pair: EncoderPair, xs: np.ndarray) -> np.ndarray:
    """Unit-norm image features for a batch, shape (B, d_img)."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != pair.config.input_dim:
        raise InvalidArgumentError(
            f"expected batch of shape (B, {pair.config.input_dim}), got {xs.shape}"
        )
    return l2_normalize(xs @ pair.w_img.T + pair.b_img, axis=1)


# ---------------------------------------------------------------------------
# Text path with analytic prompt gradient
# ---------------------------------------------------------------------------

def text_features_with_vjp(
    pair: EncoderPair, prompt_rows: np.ndarray
) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Text features for per-class prompt rows plus a prompt VJP.

    Args:
        pair: frozen encoders.
        prompt_rows: (C, s, d) prompt block per class.

    Returns:
        (features, vjp) where features is (C, d_img) with unit rows, and
        vjp maps an upstream gradient of shape (C, d_img) to the gradient
        with respect to prompt_rows, shape (C, s, d).
    """
    cfg = pair.config
    prompt_rows = np.asarray(prompt_rows, dtype=np.float64)
    n_cls, s, d = prompt_rows.shape
    if (s, d) != cfg.prompt_shape or n_cls != cfg.num_classes:
        raise InvalidArgumentError(
            f"prompt block must have shape ({cfg.num_classes}, {cfg.prompt_len}, "
            f"{cfg.embed_dim}), got {prompt_rows.shape}"
        )
    sd = s * d
    u = np.hstack([prompt_rows.reshape(n_cls, sd), pair.class_emb])
    h = np.tanh(u @ pair.w1.T + pair.b1)
    f_raw = h @ pair.w2.T + pair.b2
    norms = np.linalg.norm(f_raw, axis=1, keepdims=True)
    feats = f_raw / norms
    pair.text_encode_calls += n_cls

    def vjp(upstream: np.ndarray) -> np.ndarray:
        g = np.asarray(upstream, dtype=np.float64)
        g_raw = (g - (g * feats).sum(axis=1, keepdims=True) * feats) / norms
        g_h = (g_raw @ pair.w2) * (1.0 - h * h)
        g_u = g_h @ pair.w1
        return g_u[:, :sd].reshape(n_cls, s, d)

    return feats, vjp


def encode_text(pair: EncoderPair, prompt_row: np.ndarray, class_id: int) -> np.ndarray:
    """Unit-norm text feature of one class under one prompt block."""
    cfg = pair.config
    if not 0 <= class_id < cfg.num_classes:
        raise InvalidArgumentError(f"class_id {class_id} out of range [0, {cfg.num_classes})")
    prompt_row = np.asarray(prompt_row, dtype=np.float64)
    if prompt_row.shape != cfg.prompt_shape:
        raise InvalidArgumentError(
            f"prompt row must have shape {cfg.prompt_shape}, got {prompt_row.shape}"
        )
    u = np.concatenate([prompt_row.ravel(), pair.class_emb[class_id]])
    h = np.tanh(pair.w1 @ u + pair.b1)
    pair.text_encode_calls += 1
    return l2_normalize(pair.w2 @ h + pair.b2)


def class_text_features(pair: EncoderPair, prompt_values: np.ndarray) -> np.ndarray:
    """Text features (C, d_img) for class-specific or class-shared prompts."""
    cfg = pair.config
    prompt_values = np.asarray(prompt_values, dtype=np.float64)
    if prompt_values.ndim == 2:
        prompt_values = np.tile(prompt_values, (cfg.num_classes, 1, 1))
    feats, _ = text_features_with_vjp(pair, prompt_values)
    return feats


# ---------------------------------------------------------------------------
# Contrastive head
# ---------------------------------------------------------------------------

def clip_probs(text_feats: np.ndarray, image_feat: np.ndarray, tau: float) -> np.ndarray:
    """Class probabilities from unit text rows and a unit image feature."""
    text_feats = np.asarray(text_feats, dtype=np.float64)
    image_feat = np.asarray(image_feat, dtype=np.float64)
    if text_feats.ndim != 2 or text_feats.shape[1] != image_feat.shape[0]:
        raise InvalidArgumentError(
            f"shape mismatch: text {text_feats.shape} vs image {image_feat.shape}"
        )
    return softmax(text_feats @ image_feat, tau)


def zero_shot_predict(
    pair: EncoderPair, fixed_prompt: np.ndarray | None, x: np.ndarray
) -> int:
    """Argmax class under an untrained fixed prompt (zeros by default)."""
    if fixed_prompt is None:
        fixed_prompt = np.zeros(pair.config.prompt_shape)
    feats = class_text_features(pair, fixed_prompt)
    probs = clip_probs(feats, encode_image(pair, x), pair.config.clip_temperature)
    return int(np.argmax(probs))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_WEIGHT_FIELDS = ("w_img", "b_img", "w1", "b1", "w2", "b2", "class_emb")


def encoders_to_json(pair: EncoderPair) -> str:
    doc = {
        "format_version": ENCODER_FORMAT_VERSION,
        "config": asdict(pair.config),
        "weights": {
            name: {"shape": list(getattr(pair, name).shape),
                   "data": getattr(pair, name).ravel().tolist()}
            for name in _WEIGHT_FIELDS
        },
    }
    return json.dumps(doc)


def encoders_from_json(text: str) -> EncoderPair:
    doc = json.loads(text)
    if doc.get("format_version") != ENCODER_FORMAT_VERSION:
        raise InvalidArgumentError(
            f"unsupported encoder format version {doc.get('format_version')}"
        )
    cfg = EncoderConfig(**doc["config"])
    weights = {}
    for name in _WEIGHT_FIELDS:
        entry = doc["weights"][name]
        weights[name] = freeze(
            np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        )
    return EncoderPair(config=cfg, **weights)


def save_encoders(path: str | Path, pair: EncoderPair) -> None:
    Path(path).write_text(encoders_to_json(pair))


def load_encoders(path: str | Path) -> EncoderPair:
    return encoders_from_json(Path(path).read_text())
