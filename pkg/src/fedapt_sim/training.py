"""Local training: losses, analytic gradients, and the client loops.

Supervised clients minimize a classification cross-entropy through the
key-composed prompt plus a domain cross-entropy for the adaptive network;
the two losses share no parameters, so their gradients are independent.

Unsupervised clients run two stages per local call. Stage one self-trains on
confident pseudo-labels taken from the frozen zero-shot model, using
augmented inputs. Stage two refines with a neighbor-consistency loss over a
feature bank / score bank pair (attract nearest neighbors' scores, repel the
rest) plus a KL term tying each sample's augmented prediction to its banked
score. Bank entries act as constants; gradients never flow into them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .apt import CLASS_SHARED, CLASS_SPECIFIC, AdaptiveNet, Prompt, compose_local
from .encoders import EncoderPair, encode_images, text_features_with_vjp
from .numerics import InvalidArgumentError, log_softmax, softmax, softmax_vjp
from .world import Sample, augment

logger = logging.getLogger(__name__)


class EmptyClientError(RuntimeError):
    """The client has no local data and must be skipped explicitly."""


@dataclass(frozen=True)
class UnsupConfig:
    confidence_threshold: float = 0.8
    num_neighbors: int = 3
    lam: float = 1.0
    stage1_rounds: int = 1
    augment_strength: float = 0.1

    def __post_init__(self) -> None:
        if not self.confidence_threshold > 0:
            raise InvalidArgumentError("confidence_threshold must be positive")
        if self.num_neighbors < 1:
            raise InvalidArgumentError("num_neighbors must be >= 1")
        if self.lam < 0:
            raise InvalidArgumentError("lam must be >= 0")
        if self.stage1_rounds < 0:
            raise InvalidArgumentError("stage1_rounds must be >= 0")
        if self.augment_strength < 0:
            raise InvalidArgumentError("augment_strength must be >= 0")


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.01
    batch_size: int = 256
    local_epochs: int = 1
    unsup: UnsupConfig = field(default_factory=UnsupConfig)

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.local_epochs < 0:
            raise InvalidArgumentError("local_epochs must be >= 0")


@dataclass(eq=False)
class LocalLearner:
    """One client's learnable state plus its frozen key."""

    prompt: Prompt
    adaptive: AdaptiveNet | None
    key: np.ndarray
    domain: int
    learning_rate: float = 0.01
    batch_size: int = 256
    local_epochs: int = 1


@dataclass(eq=False)
class Banks:
    """Per-sample caches: latest image features and prediction scores.

    Row i always holds the most recent encoding of dataset sample i. Score
    rows are probability vectors (sum 1); feature rows are unit vectors.
    """

    features: np.ndarray  # (m, d_img)
    scores: np.ndarray    # (m, C)


def _prompt_block(prompt: Prompt, key: np.ndarray, num_classes: int) -> np.ndarray:
    """Composed per-class prompt block (C, s, d) for the text encoder."""
    composed = compose_local(prompt, key)
    if prompt.mode == CLASS_SHARED:
        return np.tile(composed.values, (num_classes, 1, 1))
    return composed.values


def _reduce_prompt_grad(d_block: np.ndarray, prompt: Prompt, key: np.ndarray) -> np.ndarray:
    """Chain a (C, s, d) block gradient back to the raw prompt tensor."""
    if prompt.mode == CLASS_SHARED:
        return d_block.sum(axis=0) * (1.0 + key)
    return d_block * (1.0 + key)


# ---------------------------------------------------------------------------
# Losses with analytic gradients
# ---------------------------------------------------------------------------

def classification_loss_and_grad(
    pair: EncoderPair,
    prompt: Prompt,
    key: np.ndarray,
    feats: np.ndarray,
    labels: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the key-composed prompt classifier.

    Returns the loss and its gradient with respect to the raw prompt values.
    ``feats`` are unit image features (B, d_img).
    """
    labels = np.asarray(labels, dtype=int)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise InvalidArgumentError("batch must be a nonempty (B, d_img) array")
    n_cls = pair.config.num_classes
    if labels.min() < 0 or labels.max() >= n_cls:
        raise InvalidArgumentError("label out of range")
    block = _prompt_block(prompt, key, n_cls)
    text_feats, vjp = text_features_with_vjp(pair, block)
    cos = feats @ text_feats.T
    logp = log_softmax(cos, tau)
    b = feats.shape[0]
    loss = -float(logp[np.arange(b), labels].mean())
    d_cos = np.exp(logp)
    d_cos[np.arange(b), labels] -= 1.0
    d_cos /= tau * b
    d_block = vjp(d_cos.T @ feats)
    return loss, _reduce_prompt_grad(d_block, prompt, key)


def domain_loss_and_grad(
    phi: np.ndarray, feats: np.ndarray, domain: int
) -> tuple[float, np.ndarray]:
    """Mean domain cross-entropy of the adaptive network on a batch."""
    n_domains = phi.shape[1]
    if not 0 <= domain < n_domains:
        raise InvalidArgumentError(f"domain {domain} out of range [0, {n_domains})")
    logits = feats @ phi
    logp = log_softmax(logits)
    loss = -float(logp[:, domain].mean())
    d_logits = np.exp(logp)
    d_logits[:, domain] -= 1.0
    d_logits /= feats.shape[0]
    return loss, feats.T @ d_logits


def supervised_loss(
    pair: EncoderPair,
    learner: LocalLearner,
    feats: np.ndarray,
    labels: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Combined supervised objective: classification plus domain term.

    Returns (loss, prompt gradient, adaptive-net gradient). The two terms
    share no parameters, so each gradient excludes the other's path.
    """
    if learner.prompt.mode != CLASS_SPECIFIC:
        raise InvalidArgumentError("supervised training needs a class-specific prompt")
    if learner.adaptive is None:
        raise InvalidArgumentError("supervised training needs an adaptive network")
    l_c, grad_p = classification_loss_and_grad(
        pair, learner.prompt, learner.key, feats, labels, tau
    )
    l_q, grad_phi = domain_loss_and_grad(learner.adaptive.phi, feats, learner.domain)
    return l_c + l_q, grad_p, grad_phi


def inter_sample_loss(
    banks: Banks, idx: int, z_i: np.ndarray, cfg: UnsupConfig
) -> tuple[float, np.ndarray]:
    """Neighbor attraction / background repulsion for one sample's scores.

    Nearest neighbors (by feature-bank cosine, excluding the sample itself)
    contribute -z_i . z_j; every remaining bank entry contributes
    +lam * z_i . z_m. Bank scores are constants, so the gradient with
    respect to z_i is just the signed sum of neighbor and background scores.
    """
    m = banks.features.shape[0]
    if cfg.num_neighbors >= m:
        raise InvalidArgumentError(
            f"num_neighbors ({cfg.num_neighbors}) must be below bank size ({m})"
        )
    if not 0 <= idx < m:
        raise InvalidArgumentError(f"index {idx} outside bank of size {m}")
    sims = banks.features @ banks.features[idx]
    sims[idx] = -np.inf
    order = np.argsort(-sims, kind="stable")
    neighbors = order[: cfg.num_neighbors]
    rest = order[cfg.num_neighbors :]
    background = rest[rest != idx]
    grad = -banks.scores[neighbors].sum(axis=0) + cfg.lam * banks.scores[background].sum(axis=0)
    return float(z_i @ grad), grad


def intra_sample_loss(z_hat: np.ndarray, z_bank: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(z_hat || z_bank) with the banked score treated as a constant.

    Uses 0 * log 0 = 0 and floors z_bank at 1e-12 inside the log.
    """
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z_bank = np.asarray(z_bank, dtype=np.float64)
    if z_hat.shape != z_bank.shape:
        raise InvalidArgumentError("score vectors must have equal shape")
    if np.any(z_hat < 0) or np.any(z_bank < 0):
        raise InvalidArgumentError("score vectors must be nonnegative")
    log_hat = np.log(np.maximum(z_hat, 1e-12))
    log_bank = np.log(np.maximum(z_bank, 1e-12))
    loss = float(np.where(z_hat > 0, z_hat * (log_hat - log_bank), 0.0).sum())
    return loss, log_hat - log_bank + 1.0


def init_banks(
    pair: EncoderPair, prompt: Prompt, key: np.ndarray, xs: np.ndarray, tau: float
) -> Banks:
    """Full forward pass over the client dataset to seed both banks."""
    feats = encode_images(pair, xs)
    block = _prompt_block(prompt, key, pair.config.num_classes)
    text_feats, _ = text_features_with_vjp(pair, block)
    scores = softmax(feats @ text_feats.T, tau)
    return Banks(features=feats, scores=scores)


def stage2_batch_loss_and_grads(
    pair: EncoderPair,
    learner: LocalLearner,
    banks: Banks,
    idxs: np.ndarray,
    feats: np.ndarray,
    aug_feats: np.ndarray,
    cfg: UnsupConfig,
    tau: float,
) -> tuple[dict, np.ndarray, np.ndarray, np.ndarray]:
    """Second-stage objective on one batch: inter + intra + domain term.

    Returns (loss parts, fresh scores z for the batch, prompt gradient,
    adaptive-net gradient). Fresh scores and augmented scores are both
    differentiated through the text path; banked neighbor scores and banked
    KL targets are constants.
    """
    n_cls = pair.config.num_classes
    block = _prompt_block(learner.prompt, learner.key, n_cls)
    text_feats, vjp = text_features_with_vjp(pair, block)
    z = softmax(feats @ text_feats.T, tau)
    z_hat = softmax(aug_feats @ text_feats.T, tau)
    b = len(idxs)

    inter_total = 0.0
    d_z = np.zeros_like(z)
    for row, idx in enumerate(idxs):
        li, gi = inter_sample_loss(banks, int(idx), z[row], cfg)
        inter_total += li
        d_z[row] = gi
    inter_loss = inter_total / b
    d_z /= b

    intra_total = 0.0
    d_zh = np.zeros_like(z_hat)
    for row, idx in enumerate(idxs):
        li, gi = intra_sample_loss(z_hat[row], banks.scores[int(idx)])
        intra_total += li
        d_zh[row] = gi
    intra_loss = intra_total / b
    d_zh /= b

    d_cos = softmax_vjp(z, d_z) / tau
    d_cos_hat = softmax_vjp(z_hat, d_zh) / tau
    d_block = vjp(d_cos.T @ feats + d_cos_hat.T @ aug_feats)
    grad_p = _reduce_prompt_grad(d_block, learner.prompt, learner.key)

    l_q, grad_phi = domain_loss_and_grad(learner.adaptive.phi, feats, learner.domain)
    parts = {
        "inter": inter_loss,
        "intra": intra_loss,
        "domain": l_q,
        "total": inter_loss + intra_loss + l_q,
    }
    return parts, z, grad_p, grad_phi


def unsupervised_stage2_step(
    pair: EncoderPair,
    learner: LocalLearner,
    banks: Banks,
    xs: np.ndarray,
    idxs: np.ndarray,
    cfg: UnsupConfig,
    tau: float,
    rng: np.random.Generator,
) -> float:
    """One SGD step of the second stage.

    The batch's bank rows are refreshed with this step's fresh encodings
    before the losses read the bank, so with augmentation disabled the KL
    term is exactly zero. Bank reads stay constants for the gradients.
    """
    feats = encode_images(pair, xs[idxs])
    aug = np.stack([augment(xs[i], rng, cfg.augment_strength) for i in idxs])
    aug_feats = encode_images(pair, aug)
    block = _prompt_block(learner.prompt, learner.key, pair.config.num_classes)
    text_feats, _ = text_features_with_vjp(pair, block)
    banks.features[idxs] = feats
    banks.scores[idxs] = softmax(feats @ text_feats.T, tau)
    parts, _, grad_p, grad_phi = stage2_batch_loss_and_grads(
        pair, learner, banks, idxs, feats, aug_feats, cfg, tau
    )
    learner.prompt.values -= learner.learning_rate * grad_p
    learner.adaptive.phi -= learner.learning_rate * grad_phi
    return parts["total"]


# ---------------------------------------------------------------------------
# Stage 1: pseudo-label self-training
# ---------------------------------------------------------------------------

def pseudo_label_stage(
    pair: EncoderPair,
    learner: LocalLearner,
    xs: np.ndarray,
    cfg: UnsupConfig,
    zero_shot_text_feats: np.ndarray,
    tau: float,
    rng: np.random.Generator,
) -> bool:
    """Self-train on confident pseudo-labels from the frozen initial model.

    Pseudo-labels are computed once, from the untouched zero-shot text
    features, and never refreshed within the stage. Returns False when no
    sample clears the confidence threshold (stage skipped, learner intact).
    """
    feats = encode_images(pair, xs)
    probs = softmax(feats @ zero_shot_text_feats.T, tau)
    pseudo = probs.argmax(axis=1)
    confident = np.flatnonzero(probs.max(axis=1) >= cfg.confidence_threshold)
    if confident.size == 0:
        logger.warning(
            "pseudo-label stage skipped: no sample reached confidence %.3f",
            cfg.confidence_threshold,
        )
        return False
    for _ in range(cfg.stage1_rounds):
        perm = confident[rng.permutation(confident.size)]
        for start in range(0, perm.size, learner.batch_size):
            batch = perm[start : start + learner.batch_size]
            aug = np.stack([augment(xs[i], rng, cfg.augment_strength) for i in batch])
            aug_feats = encode_images(pair, aug)
            _, grad_p = classification_loss_and_grad(
                pair, learner.prompt, learner.key, aug_feats, pseudo[batch], tau
            )
            learner.prompt.values -= learner.learning_rate * grad_p
    return True


# ---------------------------------------------------------------------------
# Client loop
# ---------------------------------------------------------------------------

def local_train(
    pair: EncoderPair,
    learner: LocalLearner,
    samples: list[Sample],
    supervision: str,
    unsup_cfg: UnsupConfig,
    tau: float,
    rng: np.random.Generator,
    zero_shot_text_feats: np.ndarray | None = None,
) -> float:
    """Run the client's local epochs in place; returns the mean step loss.

    Supervised mode runs mini-batch SGD on the combined supervised loss.
    Unsupervised mode runs the pseudo-label stage, seeds the banks with a
    full forward pass, then runs the second-stage steps. The frozen key is
    never modified. local_epochs == 0 leaves all parameters untouched.
    """
    if not samples:
        raise EmptyClientError(f"client in domain {learner.domain} has no data")
    if learner.local_epochs == 0:
        return float("nan")
    xs = np.stack([s.x for s in samples])
    losses: list[float] = []
    if supervision == "supervised":
        labels = np.array([s.label for s in samples], dtype=int)
        feats = encode_images(pair, xs)
        for _ in range(learner.local_epochs):
            perm = rng.permutation(len(samples))
            for start in range(0, perm.size, learner.batch_size):
                batch = perm[start : start + learner.batch_size]
                if learner.adaptive is None:
                    loss, grad_p = classification_loss_and_grad(
                        pair, learner.prompt, learner.key, feats[batch], labels[batch], tau
                    )
                else:
                    loss, grad_p, grad_phi = supervised_loss(
                        pair, learner, feats[batch], labels[batch], tau
                    )
                    learner.adaptive.phi -= learner.learning_rate * grad_phi
                learner.prompt.values -= learner.learning_rate * grad_p
                losses.append(loss)
    elif supervision == "unsupervised":
        if learner.prompt.mode != CLASS_SHARED:
            raise InvalidArgumentError("unsupervised training needs a class-shared prompt")
        if zero_shot_text_feats is None:
            raise InvalidArgumentError("unsupervised training needs zero-shot text features")
        pseudo_label_stage(pair, learner, xs, unsup_cfg, zero_shot_text_feats, tau, rng)
        banks = init_banks(pair, learner.prompt, learner.key, xs, tau)
        for _ in range(learner.local_epochs):
            perm = rng.permutation(len(samples))
            for start in range(0, perm.size, learner.batch_size):
                batch = perm[start : start + learner.batch_size]
                loss = unsupervised_stage2_step(
                    pair, learner, banks, xs, batch, unsup_cfg, tau, rng
                )
                losses.append(loss)
    else:
        raise InvalidArgumentError(f"unknown supervision mode {supervision!r}")
    return float(np.mean(losses)) if losses else float("nan")
