"""Global-model inference and the report/ablation procedures.

The naive path composes a fresh prompt per test image from its soft
domain-membership weights, then re-encodes every class text feature. The
fast path precomputes one text-feature table per key and, because prompt
mixing happens before the nonlinear text encoder, hardens the membership
vector to one-hot and looks the table up. The two paths agree exactly
whenever the membership vector is (effectively) one-hot.

Reports carry per-domain accuracy, the per-key decomposition matrix
(rows: meta prompt only, then each forced key; columns: domains), the
adaptive network's domain-classification accuracy, and naive/fast timings.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .apt import KeySet, Prompt, compose_global, compose_local, query_weights
from .encoders import EncoderPair, class_text_features, encode_image, encode_images
from .numerics import InvalidArgumentError, softmax
from .world import Sample


class StaleHeadError(RuntimeError):
    """The precomputed head no longer matches the model that built it."""


def state_fingerprint(prompt: Prompt, keys: KeySet) -> str:
    h = hashlib.sha256()
    h.update(prompt.mode.encode())
    h.update(prompt.values.tobytes())
    h.update(keys.keys.tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class PrecomputedHead:
    per_key: np.ndarray  # (K, C, d_img)
    base: np.ndarray     # (C, d_img)
    fingerprint: str


@dataclass(eq=False)
class EvalReport:
    per_domain_accuracy: dict[int, float]
    overall_accuracy: float
    per_key_matrix: np.ndarray | None  # (K + 1, K): meta-only row, then keys
    adaptive_net_accuracy: float | None
    naive_us: float | None = None
    fast_us: float | None = None
    unseen_accuracy: float | None = None
    num_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "per_domain_accuracy": {str(k): v for k, v in self.per_domain_accuracy.items()},
            "overall_accuracy": self.overall_accuracy,
            "per_key_matrix": None if self.per_key_matrix is None else self.per_key_matrix.tolist(),
            "adaptive_net_accuracy": self.adaptive_net_accuracy,
            "naive_us": self.naive_us,
            "fast_us": self.fast_us,
            "unseen_accuracy": self.unseen_accuracy,
            "num_samples": self.num_samples,
        }


# ---------------------------------------------------------------------------
# Naive path
# ---------------------------------------------------------------------------

def _harden(q: np.ndarray) -> np.ndarray:
    hard = np.zeros_like(q)
    hard[int(np.argmax(q))] = 1.0
    return hard


def predict_naive_features(
    pair: EncoderPair, state, feat: np.ndarray, harden_q: bool = False
) -> tuple[int, np.ndarray]:
    """Naive prediction from an already-encoded unit image feature."""
    q = query_weights(state.adaptive, feat)
    if harden_q:
        q = _harden(q)
    composed = compose_global(state.prompt, state.keys, q)
    text = class_text_features(pair, composed.values)
    probs = softmax(text @ feat, pair.config.clip_temperature)
    return int(np.argmax(probs)), probs


def predict_naive(
    pair: EncoderPair, state, x: np.ndarray, harden_q: bool = False
) -> tuple[int, np.ndarray]:
    """Per-sample prediction: membership weights, composed prompt, fresh text encodings."""
    return predict_naive_features(pair, state, encode_image(pair, x), harden_q)


# ---------------------------------------------------------------------------
# Precomputed fast path
# ---------------------------------------------------------------------------

def build_precomputed(pair: EncoderPair, state) -> PrecomputedHead:
    """Precompute per-key and meta-only class text features.

    Invokes the text encoder exactly K*C + C times.
    """
    per_key = np.stack([
        class_text_features(pair, compose_local(state.prompt, key).values)
        for key in state.keys.keys
    ]) if state.keys.num_keys else np.zeros((0, pair.config.num_classes, pair.config.feature_dim))
    base = class_text_features(pair, state.prompt.values)
    return PrecomputedHead(
        per_key=per_key,
        base=base,
        fingerprint=state_fingerprint(state.prompt, state.keys),
    )


def predict_fast_features(
    pair: EncoderPair, head: PrecomputedHead, state, feat: np.ndarray
) -> tuple[int, np.ndarray]:
    """Fast prediction from a unit feature: argmax key, table lookup."""
    if head.fingerprint != state_fingerprint(state.prompt, state.keys):
        raise StaleHeadError("precomputed head is stale; rebuild it from the current state")
    if head.per_key.shape[0] == 0:
        text = head.base
    else:
        q = query_weights(state.adaptive, feat)
        text = head.per_key[int(np.argmax(q))]
    probs = softmax(text @ feat, pair.config.clip_temperature)
    return int(np.argmax(probs)), probs


def predict_fast(
    pair: EncoderPair, head: PrecomputedHead, state, x: np.ndarray
) -> tuple[int, np.ndarray]:
    return predict_fast_features(pair, head, state, encode_image(pair, x))


def predict_naive_batch(
    pair: EncoderPair, state, feats: np.ndarray, harden_q: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Loop of naive predictions (one text-encoder sweep per sample)."""
    preds = np.empty(feats.shape[0], dtype=int)
    probs = np.empty((feats.shape[0], pair.config.num_classes))
    for i in range(feats.shape[0]):
        preds[i], probs[i] = predict_naive_features(pair, state, feats[i], harden_q)
    return preds, probs


def predict_fast_batch(
    pair: EncoderPair, head: PrecomputedHead, state, feats: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized fast predictions for a feature batch."""
    if head.fingerprint != state_fingerprint(state.prompt, state.keys):
        raise StaleHeadError("precomputed head is stale; rebuild it from the current state")
    if head.per_key.shape[0] == 0:
        cos = feats @ head.base.T
    else:
        q_logits = feats @ state.adaptive.phi
        ks = q_logits.argmax(axis=1)
        cos = np.einsum("bcd,bd->bc", head.per_key[ks], feats)
    probs = softmax(cos, pair.config.clip_temperature)
    return probs.argmax(axis=1), probs


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _accuracy_by_domain(
    preds: np.ndarray, labels: np.ndarray, domains: np.ndarray
) -> dict[int, float]:
    correct = preds == labels
    return {
        int(k): float(correct[domains == k].mean())
        for k in np.unique(domains)
    }


def evaluate(
    pair: EncoderPair,
    state,
    test_samples: list[Sample],
    per_key: bool = True,
    unseen_samples: list[Sample] | None = None,
    measure_timing: bool = False,
    harden_q: bool = False,
) -> EvalReport:
    """Full evaluation report for a trained (or initial) global state."""
    if not test_samples:
        raise InvalidArgumentError("test set must be nonempty")
    feats = encode_images(pair, np.stack([s.x for s in test_samples]))
    labels = np.array([s.label for s in test_samples], dtype=int)
    domains = np.array([s.domain for s in test_samples], dtype=int)

    preds, _ = predict_naive_batch(pair, state, feats, harden_q)
    per_domain = _accuracy_by_domain(preds, labels, domains)
    overall = float(np.mean(list(per_domain.values())))

    q_pred = (feats @ state.adaptive.phi).argmax(axis=1)
    adaptive_acc = float((q_pred == domains).mean())

    matrix = None
    if per_key:
        n_keys = state.keys.num_keys
        n_domains = len(per_domain)
        domain_order = sorted(per_domain)
        matrix = np.zeros((n_keys + 1, n_domains))
        rows = [state.prompt.values] + [
            compose_local(state.prompt, key).values for key in state.keys.keys
        ]
        for r, prompt_values in enumerate(rows):
            text = class_text_features(pair, prompt_values)
            row_preds = (feats @ text.T).argmax(axis=1)
            acc = _accuracy_by_domain(row_preds, labels, domains)
            matrix[r] = [acc[k] for k in domain_order]

    naive_us = fast_us = None
    if measure_timing:
        head = build_precomputed(pair, state)
        t0 = time.perf_counter()
        predict_naive_batch(pair, state, feats)
        naive_us = (time.perf_counter() - t0) * 1e6
        t0 = time.perf_counter()
        predict_fast_batch(pair, head, state, feats)
        fast_us = (time.perf_counter() - t0) * 1e6

    unseen_acc = None
    if unseen_samples:
        u_feats = encode_images(pair, np.stack([s.x for s in unseen_samples]))
        u_labels = np.array([s.label for s in unseen_samples], dtype=int)
        u_preds, _ = predict_naive_batch(pair, state, u_feats, harden_q)
        unseen_acc = float((u_preds == u_labels).mean())

    return EvalReport(
        per_domain_accuracy=per_domain,
        overall_accuracy=overall,
        per_key_matrix=matrix,
        adaptive_net_accuracy=adaptive_acc,
        naive_us=naive_us,
        fast_us=fast_us,
        unseen_accuracy=unseen_acc,
        num_samples=len(test_samples),
    )
