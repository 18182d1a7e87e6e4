"""Config-driven experiment runner: build, train, report.

A run executes ``repeats`` seeds of the configured federation, writing per
repeat a ``metrics.csv`` (one row per round and domain), a ``summary.json``
(final accuracies, per-key matrix, timings), and a ``checkpoint.json``
(global prompt, adaptive network, keys). A mean/std aggregate across
repeats lands next to them, and the report figures are rendered alongside
the delimited output unless disabled.

Every output file carries the tool version and the hash of the effective
config, so results remain attributable to an exact run plan.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .apt import KEY_SCHEMES
from .encoders import EncoderConfig, build_aligned
from .evaluation import EvalReport, evaluate
from .federation import ClientSpec, FedConfig, FedState, round_metrics, run_federation
from .numerics import InvalidArgumentError
from .training import TrainingConfig, UnsupConfig
from .world import (
    PartitionConfig,
    WorldConfig,
    class_prototypes,
    dirichlet_partition,
    generate_world,
    group_by_domain,
)
from .encoders import encode_images


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    output_dir: str = "runs/experiment"
    repeats: int = 1

    def __post_init__(self) -> None:
        if self.repeats < 1:
            raise InvalidArgumentError("repeats must be >= 1")
        if self.encoder.num_classes != self.world.num_classes:
            raise InvalidArgumentError("encoder.num_classes must match world.num_classes")
        if self.encoder.input_dim != self.world.input_dim:
            raise InvalidArgumentError("encoder.input_dim must match world.input_dim")
        if self.fed.key_scheme not in KEY_SCHEMES:
            raise InvalidArgumentError(f"unknown key scheme {self.fed.key_scheme!r}")
        total_clients = self.world.num_domains * self.partition.clients_per_domain
        if self.fed.sampling == "by_random" and self.fed.sample_count > total_clients:
            raise InvalidArgumentError("sample_count exceeds total client count")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def config_from_dict(doc: dict) -> ExperimentConfig:
    def sub(cls, key):
        return cls(**doc[key]) if key in doc else cls()

    training_doc = dict(doc.get("training", {}))
    unsup = UnsupConfig(**training_doc.pop("unsup", {}))
    return ExperimentConfig(
        world=sub(WorldConfig, "world"),
        partition=sub(PartitionConfig, "partition"),
        encoder=sub(EncoderConfig, "encoder"),
        fed=sub(FedConfig, "fed"),
        training=TrainingConfig(unsup=unsup, **training_doc),
        output_dir=doc.get("output_dir", "runs/experiment"),
        repeats=doc.get("repeats", 1),
    )


def apply_overrides(doc: dict, overrides: dict[str, str]) -> dict:
    """Apply dotted-path overrides like {"fed.rounds": "50"} to a config dict.

    Values parse as JSON when possible (numbers, booleans) and stay strings
    otherwise, which covers tokens like "iid" or "rand_N".
    """
    out = json.loads(json.dumps(doc))
    for path, raw in overrides.items():
        try:
            value = json.loads(raw)
        except (json.JSONDecodeError, TypeError):
            value = raw
        node = out
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def world_fingerprint(cfg: ExperimentConfig) -> str:
    doc = {"world": asdict(cfg.world), "repeats": cfg.repeats}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return repr(value) if isinstance(value, float) else str(value)


def _header_line(cfg_hash: str) -> str:
    return f"# fedapt-sim {__version__} config_sha256={cfg_hash}"


def write_metrics_csv(path: Path, rows: list[dict], cfg_hash: str) -> None:
    columns = ["round", "seed", "mode", "domain", "accuracy",
               "adaptive_net_acc", "mean_local_loss"]
    with path.open("w", newline="") as fh:
        fh.write(_header_line(cfg_hash) + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _sanitize(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_sanitize(v) for v in obj]
    return obj


def write_json(path: Path, doc: dict, cfg_hash: str) -> None:
    doc = {"tool_version": __version__, "config_sha256": cfg_hash, **doc}
    path.write_text(json.dumps(_sanitize(doc), indent=2, sort_keys=True))


def checkpoint_dict(state: FedState, encoder_fp: str) -> dict:
    doc = {
        "prompt": {
            "mode": state.prompt.mode,
            "shape": list(state.prompt.values.shape),
            "data": state.prompt.values.ravel().tolist(),
        },
        "adaptive_net": {
            "shape": list(state.adaptive.phi.shape),
            "data": state.adaptive.phi.ravel().tolist(),
            "temperature": state.adaptive.temperature,
        },
        "keys": {
            "scheme": state.keys.scheme,
            "seed": state.keys.seed,
            "shape": list(state.keys.keys.shape),
            "data": state.keys.keys.ravel().tolist(),
        },
        "round": state.round,
        "mode": state.mode,
        "encoder_fingerprint": encoder_fp,
    }
    if state.linear_head is not None:
        doc["linear_head"] = {
            "shape": list(state.linear_head.shape),
            "data": state.linear_head.ravel().tolist(),
        }
    return doc


# ---------------------------------------------------------------------------
# Single repeat
# ---------------------------------------------------------------------------

def _offset_seeds(cfg: ExperimentConfig, rep: int) -> ExperimentConfig:
    return replace(
        cfg,
        world=replace(cfg.world, seed=cfg.world.seed + rep),
        partition=replace(cfg.partition, seed=cfg.partition.seed + rep),
        encoder=replace(cfg.encoder, seed=cfg.encoder.seed + rep),
        fed=replace(cfg.fed, seed=cfg.fed.seed + rep),
    )


def run_single(cfg: ExperimentConfig) -> tuple[FedState, EvalReport, list[dict], dict]:
    """One seed of the configured experiment; returns state, report, rows."""
    train, test = generate_world(cfg.world)
    pair = build_aligned(cfg.encoder, class_prototypes(cfg.world))
    per_domain = group_by_domain(train, cfg.world.num_domains)
    client_data = dirichlet_partition(per_domain, cfg.partition)
    n_per = cfg.partition.clients_per_domain
    clients = [
        ClientSpec(client_id=i, domain=i // n_per, samples=data)
        for i, data in enumerate(client_data)
    ]
    state = run_federation(pair, clients, test, cfg.fed, cfg.training)

    if state.mode == "fedapt":
        report = evaluate(pair, state, test, per_key=True, measure_timing=True)
    else:
        feats = encode_images(pair, np.stack([s.x for s in test]))
        labels = np.array([s.label for s in test], dtype=int)
        domains = np.array([s.domain for s in test], dtype=int)
        per_dom, overall, adaptive_acc = round_metrics(pair, state, feats, labels, domains)
        report = EvalReport(
            per_domain_accuracy=per_dom,
            overall_accuracy=overall,
            per_key_matrix=None,
            adaptive_net_accuracy=adaptive_acc,
            num_samples=len(test),
        )

    rows = []
    history = state.history
    if not history:
        # rounds == 0: still emit the initial metrics
        for domain, acc in sorted(report.per_domain_accuracy.items()):
            rows.append({
                "round": 0, "seed": cfg.fed.seed, "mode": cfg.fed.mode,
                "domain": domain, "accuracy": acc,
                "adaptive_net_acc": report.adaptive_net_accuracy,
                "mean_local_loss": float("nan"),
            })
    for rec in history:
        for domain, acc in sorted(rec.per_domain_accuracy.items()):
            rows.append({
                "round": rec.round, "seed": cfg.fed.seed, "mode": cfg.fed.mode,
                "domain": domain, "accuracy": acc,
                "adaptive_net_acc": rec.adaptive_net_accuracy,
                "mean_local_loss": rec.mean_local_loss,
            })

    summary = {
        "mode": cfg.fed.mode,
        "supervision": cfg.fed.supervision,
        "seed": cfg.fed.seed,
        "rounds": state.round,
        "world_fingerprint": world_fingerprint(cfg),
        "encoder_fingerprint": pair.fingerprint(),
        "final": report.to_dict(),
    }
    return state, report, rows, summary


def run_experiment(cfg: ExperimentConfig, figures: bool = True) -> Path:
    """Execute every repeat, write all outputs, return the output directory."""
    out_root = Path(cfg.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(cfg)
    write_json(out_root / "config.json", {"config": config_to_dict(cfg)}, cfg_hash)

    finals: list[EvalReport] = []
    for rep in range(cfg.repeats):
        rep_cfg = _offset_seeds(cfg, rep)
        rep_dir = out_root / f"rep{rep}"
        rep_dir.mkdir(parents=True, exist_ok=True)
        state, report, rows, summary = run_single(rep_cfg)
        write_metrics_csv(rep_dir / "metrics.csv", rows, cfg_hash)
        write_json(rep_dir / "summary.json", summary, cfg_hash)
        train_pair_fp = summary["encoder_fingerprint"]
        write_json(rep_dir / "checkpoint.json", checkpoint_dict(state, train_pair_fp), cfg_hash)
        finals.append(report)
        if figures:
            from . import figures as fig
            fig.render_run_figures(rep_dir, rows, report)

    overalls = [r.overall_accuracy for r in finals]
    domain_keys = sorted(finals[0].per_domain_accuracy)
    per_domain_mean = {
        str(k): float(np.mean([r.per_domain_accuracy[k] for r in finals]))
        for k in domain_keys
    }
    per_domain_std = {
        str(k): float(np.std([r.per_domain_accuracy[k] for r in finals]))
        for k in domain_keys
    }
    aggregate_doc = {
        "mode": cfg.fed.mode,
        "supervision": cfg.fed.supervision,
        "repeats": cfg.repeats,
        "world_fingerprint": world_fingerprint(cfg),
        "overall_mean": float(np.mean(overalls)),
        "overall_std": float(np.std(overalls)),
        "per_seed_overall": overalls,
        "per_domain_mean": per_domain_mean,
        "per_domain_std": per_domain_std,
        "adaptive_net_mean": float(np.mean([
            r.adaptive_net_accuracy for r in finals
        ])) if all(r.adaptive_net_accuracy is not None for r in finals) else None,
    }
    write_json(out_root / "aggregate.json", aggregate_doc, cfg_hash)
    return out_root


# ---------------------------------------------------------------------------
# Run comparison
# ---------------------------------------------------------------------------

def compare_runs(run_dirs: list[str | Path], out_path: Path | None = None,
                 figures: bool = True) -> str:
    """Align per-domain accuracy across completed runs and tabulate deltas.

    Runs must share a world fingerprint; the first run is the baseline for
    the delta columns. Returns the aligned-text table, and writes CSV (plus
    a bar figure) next to it when ``out_path`` is given.
    """
    if len(run_dirs) < 2:
        raise InvalidArgumentError("compare needs at least two run directories")
    docs = []
    for d in run_dirs:
        path = Path(d) / "aggregate.json"
        if not path.exists():
            raise InvalidArgumentError(f"missing aggregate.json under {d}")
        docs.append(json.loads(path.read_text()))
    fingerprints = {doc["world_fingerprint"] for doc in docs}
    if len(fingerprints) != 1:
        raise InvalidArgumentError(
            f"world fingerprints differ across runs: {sorted(fingerprints)}"
        )
    labels = [f"{doc['mode']}@{Path(d).name}" for doc, d in zip(docs, run_dirs)]
    domains = sorted(docs[0]["per_domain_mean"], key=int)

    table_rows = []
    for dom in domains:
        row = {"domain": dom}
        for label, doc in zip(labels, docs):
            row[label] = doc["per_domain_mean"][dom]
        for label, doc in zip(labels[1:], docs[1:]):
            row[f"delta({label})"] = doc["per_domain_mean"][dom] - docs[0]["per_domain_mean"][dom]
        table_rows.append(row)
    avg_row = {"domain": "avg"}
    for label, doc in zip(labels, docs):
        avg_row[label] = doc["overall_mean"]
    for label, doc in zip(labels[1:], docs[1:]):
        avg_row[f"delta({label})"] = doc["overall_mean"] - docs[0]["overall_mean"]
    table_rows.append(avg_row)

    columns = ["domain"] + labels + [f"delta({label})" for label in labels[1:]]
    widths = {c: max(len(c), 10) for c in columns}
    lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
    for row in table_rows:
        cells = []
        for c in columns:
            v = row.get(c, "")
            cells.append((f"{v:.4f}" if isinstance(v, float) else str(v)).ljust(widths[c]))
        lines.append("  ".join(cells))
    text = "\n".join(lines)

    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        with (out_path / "comparison.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(table_rows)
        (out_path / "comparison.txt").write_text(text + "\n")
        if figures:
            from . import figures as fig
            fig.render_comparison_figure(out_path / "comparison.png", table_rows, labels)
    return text
