"""Ranking evaluation: per-event ranks over the full catalog and the
HR@k / MRR@k / NDCG@k metrics, plus the variant-ablation harness.

Candidates are never filtered: resubmitting the current exercise is part
of the behaviour under study, so repeats stay in the candidate set. Ties
break toward the smaller index so reports are reproducible everywhere.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import perscell, training
from .codefeat import HashedTokenSource, PrecomputedSource
from .dataio import MaskedWindow, Vocabulary
from .encoder import HyperParams
from .perscell import assemble_batch, output_class_mask, run_window
from .training import Checkpoint, TrainConfig


class VocabularyMismatch(ValueError):
    """Checkpoint and dataset disagree about the exercise catalog."""


@dataclass(frozen=True)
class RankResult:
    learner_id: str
    event_index: int  # running index within the evaluation order
    rank: int
    hit: float
    reciprocal: float
    gain: float


def rank_event(scores: np.ndarray, target: int) -> int:
    """1-based rank of the target among all candidates.

    scores must already carry -inf at the masked indices 0 and 1; equal
    scores rank the smaller index first.
    """
    if target < 2:
        raise ValueError(f"target {target} is a masked index")
    s_t = scores[target]
    greater = int((scores > s_t).sum())
    tied_before = int((scores[:target] == s_t).sum())
    return 1 + greater + tied_before


def contributions(rank: int, k: int = 10) -> tuple[float, float, float]:
    """(hit, reciprocal-rank, discounted-gain) for one event at cutoff k."""
    if rank <= k:
        return 1.0, 1.0 / rank, 1.0 / np.log2(rank + 1.0)
    return 0.0, 0.0, 0.0


@dataclass(frozen=True)
class Metrics:
    hr: float
    mrr: float
    ndcg: float
    events: int
    k: int = 10


def metrics_at_k(ranks, k: int = 10) -> Metrics:
    ranks = list(ranks)
    if not ranks:
        raise ValueError("metrics_at_k: no ranks")
    hits = rr = gain = 0.0
    for r in ranks:
        h, m, g = contributions(r, k)
        hits += h
        rr += m
        gain += g
    n = len(ranks)
    return Metrics(hits / n, rr / n, gain / n, n, k)


def _masked_scores(logits: np.ndarray) -> np.ndarray:
    scores = logits.copy()
    scores[:, :2] = -np.inf
    return scores


def evaluate(
    checkpoint: Checkpoint,
    test_windows: list[MaskedWindow],
    vocab: Vocabulary,
    code_source: PrecomputedSource | HashedTokenSource | None = None,
    batch_size: int | None = None,
) -> tuple[Metrics, list[RankResult]]:
    """Rank every held-out next-item target under the checkpoint model."""
    if vocab != checkpoint.vocab:
        raise VocabularyMismatch("checkpoint vocabulary differs from the dataset's")
    if not test_windows:
        raise ValueError("evaluate: empty test split")
    model = checkpoint.model
    hp = model.hyper
    if batch_size is None:
        batch_size = checkpoint.config.eval_batch_size
    needs_code = perscell.uses_code(model.variant)
    results: list[RankResult] = []
    event_index = 0
    for lo in range(0, len(test_windows), batch_size):
        chunk = test_windows[lo : lo + batch_size]
        batch = assemble_batch(chunk, vocab, hp, code_source if needs_code else None)
        run = run_window(model, batch)
        for t, logits in enumerate(run.logits):
            mask_t = batch.loss_mask[:, t]
            if not mask_t.any():
                continue
            scores = _masked_scores(logits.data)
            for row in np.nonzero(mask_t)[0]:
                r = rank_event(scores[row], int(batch.targets[row, t]))
                h, m, g = contributions(r)
                results.append(RankResult(batch.learner_ids[row], event_index, r, h, m, g))
                event_index += 1
    return metrics_at_k([r.rank for r in results]), results


@dataclass(frozen=True)
class AblationRow:
    variant: str
    metrics: Metrics


def ablate(
    train_windows: list[MaskedWindow],
    test_windows: list[MaskedWindow],
    vocab: Vocabulary,
    hp: HyperParams,
    config: TrainConfig,
    code_source: PrecomputedSource | HashedTokenSource | None = None,
    variants: tuple[str, ...] = perscell.VARIANTS,
) -> list[AblationRow]:
    """Train and evaluate each variant under one shared seed and budget so
    row differences are attributable to the ablation flags alone."""
    rows = []
    for variant in variants:
        cfg = TrainConfig(**{**asdict(config), "variant": variant})
        cp = training.train(train_windows, vocab, hp, cfg, code_source)
        metrics, _ = evaluate(cp, test_windows, vocab, code_source)
        rows.append(AblationRow(variant, metrics))
    return rows


REPORT_HEADER = ("variant", "HR@10", "MRR@10", "NDCG@10")


def report_tsv(rows: list[AblationRow]) -> str:
    lines = ["\t".join(REPORT_HEADER)]
    for row in rows:
        m = row.metrics
        lines.append(f"{row.variant}\t{m.hr:.6f}\t{m.mrr:.6f}\t{m.ndcg:.6f}")
    return "\n".join(lines) + "\n"


def report_json(rows: list[AblationRow]) -> str:
    payload = {
        "k": rows[0].metrics.k if rows else 10,
        "rows": [
            {
                "variant": row.variant,
                "hr": row.metrics.hr,
                "mrr": row.metrics.mrr,
                "ndcg": row.metrics.ndcg,
                "events": row.metrics.events,
            }
            for row in rows
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
