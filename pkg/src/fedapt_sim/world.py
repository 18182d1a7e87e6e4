"""Synthetic multi-domain labeled world and client partitioning.

Each class owns a frozen prototype vector; each domain owns a frozen affine
style transform whose deviation from identity grows with
``domain_shift_strength``. A sample is the domain transform applied to its
class prototype plus Gaussian feature noise. Domain identity is therefore
linearly recoverable from the inputs, which is the one structural fact the
adaptive prompt machinery relies on.

Per-domain sample pools can be split across clients either evenly ("iid") or
with Dirichlet-distributed class proportions (small beta = highly skewed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .numerics import InvalidArgumentError, named_stream

WORLD_FORMAT_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    num_domains: int = 3
    num_classes: int = 10
    input_dim: int = 32
    samples_per_domain: int = 300
    domain_shift_strength: float = 1.0
    feature_noise: float = 0.1
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_domains < 1:
            raise InvalidArgumentError("num_domains must be >= 1")
        if self.num_classes < 2:
            raise InvalidArgumentError("num_classes must be >= 2")
        if self.input_dim < 1:
            raise InvalidArgumentError("input_dim must be >= 1")
        if self.samples_per_domain < self.num_classes:
            raise InvalidArgumentError(
                "samples_per_domain must be >= num_classes (cannot stratify)"
            )
        if self.domain_shift_strength < 0:
            raise InvalidArgumentError("domain_shift_strength must be >= 0")
        if self.feature_noise < 0:
            raise InvalidArgumentError("feature_noise must be >= 0")
        if not 0 <= self.label_noise < 1:
            raise InvalidArgumentError("label_noise must be in [0, 1)")


@dataclass(eq=False)
class Sample:
    x: np.ndarray
    label: int
    domain: int


@dataclass(frozen=True)
class PartitionConfig:
    clients_per_domain: int = 1
    beta: float | str = "iid"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clients_per_domain < 1:
            raise InvalidArgumentError("clients_per_domain must be >= 1")
        if self.beta != "iid" and not float(self.beta) > 0:
            raise InvalidArgumentError("beta must be positive or the string 'iid'")


def class_prototypes(cfg: WorldConfig) -> np.ndarray:
    """Frozen per-class prototype vectors, shape (C, d_in)."""
    rng = named_stream(cfg.seed, "prototypes")
    return rng.standard_normal((cfg.num_classes, cfg.input_dim))


def domain_transform(cfg: WorldConfig, domain: int) -> tuple[np.ndarray, np.ndarray]:
    """Frozen affine style transform (A_k, b_k) of one domain.

    A_k = I + strength * G / sqrt(d_in) with G standard normal, b_k scaled by
    strength, so strength 0 collapses to the identity. Each domain draws from
    its own substream, so adding a domain never perturbs existing ones.
    """
    d = cfg.input_dim
    s = cfg.domain_shift_strength
    rng = named_stream(cfg.seed, "domain", domain)
    a = np.eye(d) + s * rng.standard_normal((d, d)) / np.sqrt(d)
    b = s * rng.standard_normal(d)
    return a, b


def _stratified_class_counts(total: int, num_classes: int) -> np.ndarray:
    counts = np.full(num_classes, total // num_classes, dtype=int)
    counts[: total % num_classes] += 1
    return counts


def generate_world(cfg: WorldConfig) -> tuple[list[Sample], list[Sample]]:
    """Generate the train and test sets for every domain.

    The split is 80/20, stratified by (domain, class), with at least one test
    sample per occupied (domain, class) cell. Deterministic given cfg.seed.
    """
    protos = class_prototypes(cfg)
    train: list[Sample] = []
    test: list[Sample] = []
    counts = _stratified_class_counts(cfg.samples_per_domain, cfg.num_classes)
    for k in range(cfg.num_domains):
        a, b = domain_transform(cfg, k)
        rng = named_stream(cfg.seed, "samples", k)
        for c in range(cfg.num_classes):
            n = int(counts[c])
            noise = cfg.feature_noise * rng.standard_normal((n, cfg.input_dim))
            xs = (protos[c] + noise) @ a.T + b
            labels = np.full(n, c, dtype=int)
            if cfg.label_noise > 0:
                flip = rng.random(n) < cfg.label_noise
                offsets = rng.integers(1, cfg.num_classes, size=n)
                labels[flip] = (labels[flip] + offsets[flip]) % cfg.num_classes
            n_test = max(1, round(0.2 * n))
            for i in range(n):
                sample = Sample(x=xs[i], label=int(labels[i]), domain=k)
                (test if i >= n - n_test else train).append(sample)
    return train, test


def generate_unseen_domain(cfg: WorldConfig, offset: int = 0) -> list[Sample]:
    """Samples from a fresh domain whose transform never occurs in training.

    The new domain reuses the world's prototypes and noise model but draws
    its affine transform from the substream of domain index K + offset.
    """
    unseen = cfg.num_domains + offset
    protos = class_prototypes(cfg)
    a, b = domain_transform(cfg, unseen)
    rng = named_stream(cfg.seed, "samples", unseen)
    counts = _stratified_class_counts(cfg.samples_per_domain, cfg.num_classes)
    out = []
    for c in range(cfg.num_classes):
        n = int(counts[c])
        noise = cfg.feature_noise * rng.standard_normal((n, cfg.input_dim))
        xs = (protos[c] + noise) @ a.T + b
        for i in range(n):
            out.append(Sample(x=xs[i], label=c, domain=unseen))
    return out


def group_by_domain(samples: list[Sample], num_domains: int) -> list[list[Sample]]:
    groups: list[list[Sample]] = [[] for _ in range(num_domains)]
    for s in samples:
        groups[s.domain].append(s)
    return groups


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; ties go to the lower index."""
    base = np.floor(quotas).astype(int)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:short]] += 1
    return base


def dirichlet_partition(
    per_domain: list[list[Sample]], cfg: PartitionConfig
) -> list[list[Sample]]:
    """Split each domain's samples across its clients, class by class.

    For every (domain, class) cell a proportion vector is drawn from
    Dir(beta * 1) over that domain's clients (uniform for "iid"), converted
    to integer counts by largest-remainder rounding, and applied to a
    shuffled copy of the cell. The union of all client datasets equals the
    input exactly. Client ``domain * N + j`` is the j-th client of a domain.
    """
    rng = named_stream(cfg.seed, "partition")
    n_cli = cfg.clients_per_domain
    clients: list[list[Sample]] = [[] for _ in range(len(per_domain) * n_cli)]
    for k, samples in enumerate(per_domain):
        if not samples:
            raise InvalidArgumentError(f"domain {k} has no samples")
        by_class: dict[int, list[Sample]] = {}
        for s in samples:
            by_class.setdefault(s.label, []).append(s)
        for c in sorted(by_class):
            group = list(by_class[c])
            rng.shuffle(group)
            if cfg.beta == "iid":
                props = np.full(n_cli, 1.0 / n_cli)
            else:
                props = rng.dirichlet(float(cfg.beta) * np.ones(n_cli))
            counts = _largest_remainder(props * len(group), len(group))
            start = 0
            for j in range(n_cli):
                clients[k * n_cli + j].extend(group[start : start + counts[j]])
                start += counts[j]
    return clients


def augment(x: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Feature-space augmentation: random rescale plus Gaussian jitter.

    x_hat = s * x + eps with s ~ U(1 - strength, 1 + strength) and
    eps ~ N(0, strength^2 I). Strength 0 returns x exactly.
    """
    if strength < 0:
        raise InvalidArgumentError("augment strength must be >= 0")
    s = rng.uniform(1.0 - strength, 1.0 + strength)
    eps = rng.normal(0.0, strength, size=x.shape)
    return s * x + eps


# ---------------------------------------------------------------------------
# Versioned JSON export / import (byte-exact replay)
# ---------------------------------------------------------------------------

def _samples_to_obj(samples: list[Sample]) -> list[dict]:
    return [
        {"x": s.x.tolist(), "label": s.label, "domain": s.domain} for s in samples
    ]


def _samples_from_obj(obj: list[dict]) -> list[Sample]:
    return [
        Sample(x=np.asarray(o["x"], dtype=np.float64), label=int(o["label"]), domain=int(o["domain"]))
        for o in obj
    ]


def save_world(path: str | Path, cfg: WorldConfig, train: list[Sample], test: list[Sample]) -> None:
    doc = {
        "format_version": WORLD_FORMAT_VERSION,
        "config": asdict(cfg),
        "shapes": {"input_dim": cfg.input_dim, "train": len(train), "test": len(test)},
        "train": _samples_to_obj(train),
        "test": _samples_to_obj(test),
    }
    Path(path).write_text(json.dumps(doc))


def load_world(path: str | Path) -> tuple[WorldConfig, list[Sample], list[Sample]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != WORLD_FORMAT_VERSION:
        raise InvalidArgumentError(
            f"unsupported world format version {doc.get('format_version')}"
        )
    cfg = WorldConfig(**doc["config"])
    return cfg, _samples_from_obj(doc["train"]), _samples_from_obj(doc["test"])
