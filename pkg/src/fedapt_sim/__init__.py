"""Desk-scale federated adaptive prompt tuning simulator.

A frozen surrogate contrastive encoder pair, a synthetic multi-domain world,
key-conditioned prompt composition with an adaptive domain network, FedAvg
style rounds, and baselines (shared-prompt tuning, linear head, zero-shot)
in one harness.
"""

__version__ = "0.1.0"
