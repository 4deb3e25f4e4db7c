"""Encoder-depth x fusion on/off comparison at toy scale."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .evaluation import MetricReport
from .model import ModelConfig, build_model, count_parameters
from .preprocess import Sample
from .training import TrainConfig, evaluate_model, train_epoch

DEPTHS = (1, 2, 3, 4)


@dataclass(frozen=True)
class AblationRow:
    encoder_stages: int
    fusion: bool
    parameters: int
    report: MetricReport


def ablation_configs(base: ModelConfig) -> list[ModelConfig]:
    """Fusion off then on for each depth, shallowest first."""
    return [base.replace(encoder_stages=k, fusion_enabled=f) for k in DEPTHS for f in (False, True)]


def run_ablation(
    base: ModelConfig,
    train: Sequence[Sample],
    evaluate_on: Sequence[Sample],
    config: TrainConfig,
    seed: int = 0,
) -> list[AblationRow]:
    """Train every configuration from the same seed and report metrics on ``evaluate_on``."""
    rows = []
    for cfg in ablation_configs(base):
        model = build_model(cfg, seed)
        for epoch in range(1, config.epochs + 1):
            train_epoch(model, train, config, epoch)
        rows.append(AblationRow(cfg.encoder_stages, cfg.fusion_enabled, count_parameters(cfg), evaluate_model(model, evaluate_on).report))
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    head = "| Encoder | Cross-attention | Params | Acc | Pre | Recall | F-score | IOU |"
    lines = [head, "|" + "---|" * 8]
    for r in rows:
        m = r.report
        lines.append(
            f"| {r.encoder_stages} | {'yes' if r.fusion else 'no'} | {r.parameters} | "
            f"{100 * m.accuracy:.1f} | {100 * m.precision:.1f} | {100 * m.recall:.1f} | "
            f"{100 * m.f_score:.1f} | {100 * m.iou:.1f} |"
        )
    return "\n".join(lines) + "\n"
