"""Server-side round engine: key assignment, sampling, aggregation.

One round broadcasts the global parameters, runs local training on the
sampled clients, averages the returned parameters (unweighted, in client-id
order), and records evaluation metrics. Four method modes share the loop:

* fedapt   - key-composed prompts plus the adaptive network
* promptfl - plain shared-prompt tuning, no keys, no adaptive network
* clipfc   - a linear head on frozen image features
* zeroshot - no training at all, single evaluation

Client sampling draws from a stream keyed only by (seed, round) so that
different method modes see identical cohorts under equal seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .apt import (
    CLASS_SHARED,
    CLASS_SPECIFIC,
    AdaptiveNet,
    KeySet,
    Prompt,
    init_keys,
)
from .encoders import EncoderPair, class_text_features, encode_images
from .numerics import InvalidArgumentError, log_softmax, named_stream, softmax
from .training import (
    EmptyClientError,
    LocalLearner,
    TrainingConfig,
    local_train,
)
from .world import Sample

MODES = ("fedapt", "promptfl", "clipfc", "zeroshot")
SAMPLINGS = ("all", "by_domain", "by_random")
SUPERVISIONS = ("supervised", "unsupervised")


class FederationRoundError(RuntimeError):
    """A client failed inside a round; no partial aggregation is performed."""


@dataclass(eq=False)
class ClientSpec:
    client_id: int
    domain: int
    samples: list[Sample]


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 50
    sampling: str = "all"
    sample_count: int = 0
    mode: str = "fedapt"
    supervision: str = "supervised"
    seed: int = 0
    tau_q: float = 1.0
    key_scheme: str = "rand_U"
    weighted_average: bool = False  # dataset-size weighting, off by default

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise InvalidArgumentError("rounds must be >= 0")
        if self.sampling not in SAMPLINGS:
            raise InvalidArgumentError(f"unknown sampling {self.sampling!r}")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown mode {self.mode!r}")
        if self.supervision not in SUPERVISIONS:
            raise InvalidArgumentError(f"unknown supervision {self.supervision!r}")
        if self.sampling == "by_random" and self.sample_count < 1:
            raise InvalidArgumentError("by_random sampling needs sample_count >= 1")
        if not self.tau_q > 0:
            raise InvalidArgumentError("tau_q must be positive")


@dataclass(eq=False)
class RoundRecord:
    round: int
    client_ids: list[int]
    mean_local_loss: float
    per_domain_accuracy: dict[int, float]
    overall_accuracy: float
    adaptive_net_accuracy: float | None


@dataclass(eq=False)
class FedState:
    prompt: Prompt
    adaptive: AdaptiveNet
    keys: KeySet
    round: int
    history: list[RoundRecord] = field(default_factory=list)
    linear_head: np.ndarray | None = None
    mode: str = "fedapt"


def assign_keys(keys: KeySet, clients: Sequence[ClientSpec]) -> dict[int, np.ndarray]:
    """Map every client to its domain's frozen key; fixed for all rounds."""
    mapping = {}
    for client in clients:
        if not 0 <= client.domain < keys.num_keys:
            raise InvalidArgumentError(
                f"client {client.client_id} has unknown domain {client.domain}"
            )
        mapping[client.client_id] = keys.keys[client.domain]
    return mapping


def sample_clients(
    cfg: FedConfig, clients: Sequence[ClientSpec], round_idx: int
) -> list[int]:
    """Select the round's participants; deterministic per (seed, round).

    The stream never depends on the method mode, so runs that differ only in
    mode train on identical cohorts.
    """
    ids = sorted(c.client_id for c in clients)
    if cfg.sampling == "all":
        return ids
    rng = named_stream(cfg.seed, "sampling", round_idx)
    if cfg.sampling == "by_domain":
        by_domain: dict[int, list[int]] = {}
        for c in clients:
            by_domain.setdefault(c.domain, []).append(c.client_id)
        chosen = []
        for domain in sorted(by_domain):
            group = sorted(by_domain[domain])
            chosen.append(group[int(rng.integers(len(group)))])
        return sorted(chosen)
    if cfg.sample_count > len(ids):
        raise InvalidArgumentError("sample_count exceeds number of clients")
    picked = rng.choice(np.array(ids), size=cfg.sample_count, replace=False)
    return sorted(int(i) for i in picked)


def mean_arrays(arrays: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Arithmetic mean of equal-shaped arrays, summed in the given order."""
    if len(arrays) == 0:
        raise InvalidArgumentError("cannot aggregate an empty update list")
    shape = arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise InvalidArgumentError(f"shape mismatch in aggregation: {a.shape} vs {shape}")
    if weights is None:
        total = np.zeros(shape)
        for a in arrays:
            total = total + a
        return total / len(arrays)
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    total = np.zeros(shape)
    for a, wi in zip(arrays, w):
        total = total + wi * a
    return total


def aggregate(
    updates: Sequence[tuple[np.ndarray, np.ndarray | None]],
    weights: Sequence[float] | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Average client (prompt, adaptive-net) updates into the global pair."""
    prompts = [u[0] for u in updates]
    phis = [u[1] for u in updates]
    mean_prompt = mean_arrays(prompts, weights)
    if any(p is None for p in phis):
        if not all(p is None for p in phis):
            raise InvalidArgumentError("mixed None and array adaptive-net updates")
        return mean_prompt, None
    return mean_prompt, mean_arrays(phis, weights)


# ---------------------------------------------------------------------------
# Round-level evaluation helpers (full reports live in evaluation.py)
# ---------------------------------------------------------------------------

def _predict_round(
    pair: EncoderPair, state: FedState, feats: np.ndarray
) -> np.ndarray:
    """Predicted classes for a feature batch under the state's mode."""
    if state.mode == "clipfc":
        return (feats @ state.linear_head).argmax(axis=1)
    if state.mode in ("promptfl", "zeroshot"):
        text = class_text_features(pair, state.prompt.values)
        return (feats @ text.T).argmax(axis=1)
    # fedapt serves a per-sample prompt composed from the membership weights
    from .evaluation import predict_naive_features

    preds = np.empty(feats.shape[0], dtype=int)
    for i in range(feats.shape[0]):
        preds[i], _ = predict_naive_features(pair, state, feats[i])
    return preds


def round_metrics(
    pair: EncoderPair,
    state: FedState,
    feats: np.ndarray,
    labels: np.ndarray,
    domains: np.ndarray,
) -> tuple[dict[int, float], float, float | None]:
    """Per-domain accuracy, overall accuracy, adaptive-net domain accuracy."""
    preds = _predict_round(pair, state, feats)
    correct = preds == labels
    per_domain: dict[int, float] = {}
    for k in sorted(set(int(d) for d in domains)):
        mask = domains == k
        per_domain[k] = float(correct[mask].mean())
    overall = float(np.mean(list(per_domain.values())))
    adaptive_acc = None
    if state.mode == "fedapt":
        q_pred = (feats @ state.adaptive.phi).argmax(axis=1)
        adaptive_acc = float((q_pred == domains).mean())
    return per_domain, overall, adaptive_acc


# ---------------------------------------------------------------------------
# The round engine
# ---------------------------------------------------------------------------

def _train_linear_head(
    head: np.ndarray,
    feats: np.ndarray,
    labels: np.ndarray,
    train_cfg: TrainingConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Local epochs of cross-entropy SGD on the frozen-feature linear head."""
    head = head.copy()
    losses = []
    for _ in range(train_cfg.local_epochs):
        perm = rng.permutation(feats.shape[0])
        for start in range(0, perm.size, train_cfg.batch_size):
            batch = perm[start : start + train_cfg.batch_size]
            logits = feats[batch] @ head
            logp = log_softmax(logits)
            losses.append(-float(logp[np.arange(len(batch)), labels[batch]].mean()))
            d_logits = np.exp(logp)
            d_logits[np.arange(len(batch)), labels[batch]] -= 1.0
            d_logits /= len(batch)
            head -= train_cfg.learning_rate * (feats[batch].T @ d_logits)
    return head, float(np.mean(losses)) if losses else float("nan")


def initial_state(
    pair: EncoderPair, num_domains: int, fed_cfg: FedConfig
) -> FedState:
    """Fresh server state for the configured mode and supervision."""
    cfg = pair.config
    shape = (
        (cfg.num_classes, cfg.prompt_len, cfg.embed_dim)
        if fed_cfg.supervision == "supervised"
        else (cfg.prompt_len, cfg.embed_dim)
    )
    mode = CLASS_SPECIFIC if fed_cfg.supervision == "supervised" else CLASS_SHARED
    if fed_cfg.mode == "zeroshot":
        values = np.zeros(shape)
    else:
        values = 0.02 * named_stream(fed_cfg.seed, "init").standard_normal(shape)
    scheme = fed_cfg.key_scheme if fed_cfg.mode == "fedapt" else "zeros"
    keys = init_keys(num_domains, cfg.prompt_len, cfg.embed_dim,
                     scheme=scheme, seed=fed_cfg.seed)
    state = FedState(
        prompt=Prompt(mode=mode, values=values),
        adaptive=AdaptiveNet(phi=np.zeros((cfg.feature_dim, num_domains)),
                             temperature=fed_cfg.tau_q),
        keys=keys,
        round=0,
        linear_head=np.zeros((cfg.feature_dim, cfg.num_classes))
        if fed_cfg.mode == "clipfc" else None,
        mode=fed_cfg.mode,
    )
    return state


def run_federation(
    pair: EncoderPair,
    clients: Sequence[ClientSpec],
    test_samples: Sequence[Sample],
    fed_cfg: FedConfig,
    train_cfg: TrainingConfig,
) -> FedState:
    """Run the configured number of rounds and return the final state."""
    if not clients:
        raise InvalidArgumentError("need at least one client")
    num_domains = max(c.domain for c in clients) + 1
    state = initial_state(pair, num_domains, fed_cfg)
    by_id = {c.client_id: c for c in clients}
    key_map = assign_keys(state.keys, clients)
    tau = pair.config.clip_temperature

    test_feats = encode_images(pair, np.stack([s.x for s in test_samples]))
    test_labels = np.array([s.label for s in test_samples], dtype=int)
    test_domains = np.array([s.domain for s in test_samples], dtype=int)

    zero_shot_feats = None
    if fed_cfg.supervision == "unsupervised":
        zero_shot_feats = class_text_features(pair, np.zeros(pair.config.prompt_shape))

    if fed_cfg.mode == "zeroshot":
        per_domain, overall, _ = round_metrics(pair, state, test_feats, test_labels, test_domains)
        state.history.append(RoundRecord(
            round=0, client_ids=[], mean_local_loss=float("nan"),
            per_domain_accuracy=per_domain, overall_accuracy=overall,
            adaptive_net_accuracy=None,
        ))
        return state

    for round_idx in range(fed_cfg.rounds):
        selected = sample_clients(fed_cfg, clients, round_idx)
        updates: list[tuple[np.ndarray, np.ndarray | None]] = []
        head_updates: list[np.ndarray] = []
        sizes: list[float] = []
        losses: list[float] = []
        for cid in selected:
            client = by_id[cid]
            rng = named_stream(fed_cfg.seed, "training", round_idx, cid)
            try:
                if fed_cfg.mode == "clipfc":
                    if not client.samples:
                        raise EmptyClientError(f"client {cid} has no data")
                    feats = encode_images(pair, np.stack([s.x for s in client.samples]))
                    labels = np.array([s.label for s in client.samples], dtype=int)
                    head, loss = _train_linear_head(
                        state.linear_head, feats, labels, train_cfg, rng
                    )
                    head_updates.append(head)
                else:
                    learner = LocalLearner(
                        prompt=state.prompt.copy(),
                        adaptive=state.adaptive.copy() if fed_cfg.mode == "fedapt" else None,
                        key=key_map[cid],
                        domain=client.domain,
                        learning_rate=train_cfg.learning_rate,
                        batch_size=train_cfg.batch_size,
                        local_epochs=train_cfg.local_epochs,
                    )
                    loss = local_train(
                        pair, learner, client.samples, fed_cfg.supervision,
                        train_cfg.unsup, tau, rng, zero_shot_feats,
                    )
                    updates.append((
                        learner.prompt.values,
                        learner.adaptive.phi if learner.adaptive is not None else None,
                    ))
            except (EmptyClientError, InvalidArgumentError) as err:
                raise FederationRoundError(
                    f"round {round_idx}, client {cid}: {err}"
                ) from err
            sizes.append(float(len(client.samples)))
            losses.append(loss)

        weights = sizes if fed_cfg.weighted_average else None
        if fed_cfg.mode == "clipfc":
            state.linear_head = mean_arrays(head_updates, weights)
        else:
            mean_prompt, mean_phi = aggregate(updates, weights)
            state.prompt = Prompt(mode=state.prompt.mode, values=mean_prompt)
            if mean_phi is not None:
                state.adaptive = AdaptiveNet(phi=mean_phi, temperature=fed_cfg.tau_q)
        state.round = round_idx + 1

        per_domain, overall, adaptive_acc = round_metrics(
            pair, state, test_feats, test_labels, test_domains
        )
        state.history.append(RoundRecord(
            round=round_idx + 1,
            client_ids=selected,
            mean_local_loss=float(np.nanmean(losses)) if losses else float("nan"),
            per_domain_accuracy=per_domain,
            overall_accuracy=overall,
            adaptive_net_accuracy=adaptive_acc,
        ))
    return state
