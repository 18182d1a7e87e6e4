"""Meta prompt, frozen domain keys, and the adaptive composition rules.

A learnable prompt (class-specific ``(C, s, d)`` or class-shared ``(s, d)``)
is modulated multiplicatively by frozen random key matrices, one per domain.
At inference a small linear adaptive network turns an image feature into a
soft domain-membership vector q, and the served prompt is

    p + p * sum_k q_k key_k        (global composition)

while a client training against its own domain key k uses the one-hot case

    p + p * key_k                  (local composition).

Keys are never trained; the gradient of the local composition with respect
to the prompt is simply (1 + key_k) elementwise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .numerics import InvalidArgumentError, check_finite, freeze, named_stream, softmax

CLASS_SPECIFIC = "class-specific"
CLASS_SHARED = "class-shared"

KEY_SCHEMES = ("rand_U", "rand_N", "rand_01", "rand_O", "zeros")


@dataclass(eq=False)
class Prompt:
    """Learnable continuous prompt tensor."""

    mode: str
    values: np.ndarray  # (C, s, d) for class-specific, (s, d) for class-shared

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mode == CLASS_SPECIFIC and self.values.ndim != 3:
            raise InvalidArgumentError("class-specific prompt must be rank 3")
        if self.mode == CLASS_SHARED and self.values.ndim != 2:
            raise InvalidArgumentError("class-shared prompt must be rank 2")
        if self.mode not in (CLASS_SPECIFIC, CLASS_SHARED):
            raise InvalidArgumentError(f"unknown prompt mode {self.mode!r}")
        check_finite(self.values, "prompt")

    def copy(self) -> "Prompt":
        return Prompt(mode=self.mode, values=self.values.copy())


@dataclass(eq=False)
class KeySet:
    """Frozen per-domain key matrices, shape (K, s, d)."""

    keys: np.ndarray
    scheme: str
    seed: int

    def __post_init__(self) -> None:
        self.keys = freeze(self.keys)

    @property
    def num_keys(self) -> int:
        return self.keys.shape[0]

    def fingerprint(self) -> str:
        return hashlib.sha256(self.keys.tobytes()).hexdigest()


@dataclass(eq=False)
class AdaptiveNet:
    """Linear map from image features to domain logits, with softmax temperature."""

    phi: np.ndarray  # (d_img, K)
    temperature: float = 1.0

    def __post_init__(self) -> None:
        self.phi = np.asarray(self.phi, dtype=np.float64)
        check_finite(self.phi, "adaptive network weights")

    def copy(self) -> "AdaptiveNet":
        return AdaptiveNet(phi=self.phi.copy(), temperature=self.temperature)


def _gram_schmidt_rows(g: np.ndarray) -> np.ndarray:
    """Orthonormalize rows by modified Gram-Schmidt with reorthogonalization."""
    out = np.array(g, dtype=np.float64)
    for i in range(out.shape[0]):
        for _ in range(2):  # second pass keeps pairwise dots below 1e-12
            for j in range(i):
                out[i] -= (out[i] @ out[j]) * out[j]
        out[i] /= np.linalg.norm(out[i])
    return out


def init_keys(num_domains: int, prompt_len: int, embed_dim: int,
              scheme: str = "rand_U", seed: int = 0) -> KeySet:
    """Draw one frozen key per domain under the named initialization scheme.

    rand_U is uniform on [0, 1), rand_N standard normal, rand_01 a fair coin
    matrix, rand_O orthonormal flattened rows (requires K <= s*d), and zeros
    an all-zero set used to strip the key path out of the model.
    """
    if num_domains < 1 or prompt_len < 1 or embed_dim < 1:
        raise InvalidArgumentError("key dimensions must be >= 1")
    if scheme not in KEY_SCHEMES:
        raise InvalidArgumentError(f"unknown key scheme {scheme!r}")
    shape = (num_domains, prompt_len, embed_dim)
    rng = named_stream(seed, "keys")
    if scheme == "rand_U":
        keys = rng.random(shape)
    elif scheme == "rand_N":
        keys = rng.standard_normal(shape)
    elif scheme == "rand_01":
        keys = (rng.random(shape) < 0.5).astype(np.float64)
    elif scheme == "zeros":
        keys = np.zeros(shape)
    else:  # rand_O
        flat_dim = prompt_len * embed_dim
        if num_domains > flat_dim:
            raise InvalidArgumentError(
                f"rand_O needs K <= s*d ({num_domains} > {flat_dim})"
            )
        flat = _gram_schmidt_rows(rng.standard_normal((num_domains, flat_dim)))
        keys = flat.reshape(shape)
    return KeySet(keys=keys, scheme=scheme, seed=seed)


def broadcast_key(key: np.ndarray, num_classes: int) -> np.ndarray:
    """Copy a key across classes to match a class-specific prompt.

    num_classes == 1 is the class-shared passthrough and returns the key
    unchanged.
    """
    if num_classes < 1:
        raise InvalidArgumentError("num_classes must be >= 1")
    if num_classes == 1:
        return key
    return np.tile(key, (num_classes, 1, 1))


def query_weights(net: AdaptiveNet, image_feat: np.ndarray) -> np.ndarray:
    """Soft domain-membership vector q = softmax(phi^T feat / temperature)."""
    if not net.temperature > 0:
        raise InvalidArgumentError("adaptive network temperature must be positive")
    image_feat = np.asarray(image_feat, dtype=np.float64)
    if image_feat.shape != (net.phi.shape[0],):
        raise InvalidArgumentError(
            f"expected feature of shape ({net.phi.shape[0]},), got {image_feat.shape}"
        )
    return softmax(net.phi.T @ image_feat, net.temperature)


def mixed_key(keys: KeySet, q: np.ndarray) -> np.ndarray:
    """Membership-weighted key sum_k q_k key_k, shape (s, d)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (keys.num_keys,):
        raise InvalidArgumentError(
            f"expected {keys.num_keys} membership weights, got shape {q.shape}"
        )
    if abs(float(q.sum()) - 1.0) > 1e-9:
        raise InvalidArgumentError("membership weights must sum to 1")
    return np.einsum("k,ksd->sd", q, keys.keys)


def compose_global(prompt: Prompt, keys: KeySet, q: np.ndarray) -> Prompt:
    """Serve-time composition p + p * sum_k q_k key_k; inputs unmodified."""
    mix = mixed_key(keys, q)
    if mix.shape != prompt.values.shape[-2:]:
        raise InvalidArgumentError(
            f"key shape {mix.shape} does not match prompt {prompt.values.shape}"
        )
    return Prompt(mode=prompt.mode, values=prompt.values * (1.0 + mix))


def compose_local(prompt: Prompt, key: np.ndarray) -> Prompt:
    """Training-time composition p + p * key_k for the client's frozen key."""
    key = np.asarray(key, dtype=np.float64)
    if key.shape != prompt.values.shape[-2:]:
        raise InvalidArgumentError(
            f"key shape {key.shape} does not match prompt {prompt.values.shape}"
        )
    return Prompt(mode=prompt.mode, values=prompt.values * (1.0 + key))
