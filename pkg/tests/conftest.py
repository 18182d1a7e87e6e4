import numpy as np
import pytest

from fedapt_sim.encoders import EncoderConfig, build_aligned, build_random
from fedapt_sim.world import (
    PartitionConfig,
    WorldConfig,
    class_prototypes,
    dirichlet_partition,
    generate_world,
    group_by_domain,
)


@pytest.fixture(scope="session")
def tiny_encoder_cfg():
    # gradcheck-sized instance: d=8, s=2, C=3, K=2
    return EncoderConfig(
        input_dim=8, embed_dim=8, prompt_len=2, feature_dim=16,
        num_classes=3, hidden_dim=12, seed=5,
    )


@pytest.fixture(scope="session")
def tiny_pair(tiny_encoder_cfg):
    return build_random(tiny_encoder_cfg)


@pytest.fixture(scope="session")
def small_world_cfg():
    return WorldConfig(
        num_domains=3, num_classes=10, input_dim=32, samples_per_domain=150,
        domain_shift_strength=1.5, feature_noise=0.1, seed=0,
    )


@pytest.fixture(scope="session")
def small_world(small_world_cfg):
    return generate_world(small_world_cfg)


@pytest.fixture(scope="session")
def small_pair(small_world_cfg):
    ec = EncoderConfig(input_dim=32, num_classes=10, seed=0)
    return build_aligned(ec, class_prototypes(small_world_cfg))


@pytest.fixture(scope="session")
def small_clients(small_world, small_world_cfg):
    train, _ = small_world
    per_domain = group_by_domain(train, small_world_cfg.num_domains)
    return dirichlet_partition(
        per_domain, PartitionConfig(clients_per_domain=1, beta="iid", seed=0)
    )


def make_batch(pair, rng, size=4):
    """Random unit image features plus labels for the pair's class count."""
    from fedapt_sim.encoders import encode_images

    xs = rng.standard_normal((size, pair.config.input_dim))
    feats = encode_images(pair, xs)
    labels = rng.integers(0, pair.config.num_classes, size)
    return feats, labels
