"""Latent-state export and linear style probes.

After training, each learner's final-step latent vectors are exported
and a logistic probe is fit per style dimension: the processing probe
reads the processing-style vector, the understanding probe the
understanding-style vector. Held-out probe accuracy far above the
permuted-label baseline is the quantitative stand-in for the qualitative
latent-trajectory claims.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codefeat import HashedTokenSource, PrecomputedSource
from .dataio import LearnerSequence, MaskedWindow
from .perscell import assemble_batch, run_window, uses_code
from .training import Checkpoint

DIMENSIONS = ("processing", "understanding")


@dataclass(frozen=True)
class LatentRow:
    learner_id: str
    length: int  # total events of the learner
    pa: np.ndarray
    ps: np.ndarray
    us: np.ndarray


def export_latents(
    checkpoint: Checkpoint,
    sequences: list[LearnerSequence],
    code_source: PrecomputedSource | HashedTokenSource | None = None,
    batch_size: int = 64,
) -> list[LatentRow]:
    """Latents at the last time step of each learner's full history.

    Training chunks histories into windows, but the style vectors are a
    property of the learner, so the export unrolls the recurrence over
    the concatenated windows in one stateful pass. Batches are small
    because full histories can be an order of magnitude longer than a
    training window.
    """
    model = checkpoint.model
    events: dict[str, list] = {}
    order: list[str] = []
    for seq in sequences:
        if seq.learner_id not in events:
            order.append(seq.learner_id)
            events[seq.learner_id] = []
        events[seq.learner_id].extend(seq.events)

    rows: list[LatentRow] = []
    source = code_source if uses_code(model.variant) else None
    for lo in range(0, len(order), batch_size):
        lids = order[lo : lo + batch_size]
        windows = [MaskedWindow(LearnerSequence(lid, tuple(events[lid])), ()) for lid in lids]
        batch = assemble_batch(windows, checkpoint.vocab, model.hyper, source)
        run = run_window(model, batch)
        for i, lid in enumerate(lids):
            rows.append(
                LatentRow(
                    learner_id=lid,
                    length=len(events[lid]),
                    pa=run.final_state.pa.data[i].copy(),
                    ps=run.final_state.ps.data[i].copy(),
                    us=run.final_state.us.data[i].copy(),
                )
            )
    return rows


def export_step_latents(
    checkpoint: Checkpoint,
    sequences: list[LearnerSequence],
    code_source: PrecomputedSource | HashedTokenSource | None = None,
) -> list[tuple[str, int, np.ndarray, np.ndarray, np.ndarray]]:
    """Per-step latents (learner, step, PA, PS, US) for external plotting.

    Uses the same stateful full-history unroll as export_latents, so the
    final row of each learner matches their exported final-step latents.
    """
    model = checkpoint.model
    source = code_source if uses_code(model.variant) else None
    events: dict[str, list] = {}
    order: list[str] = []
    for seq in sequences:
        if seq.learner_id not in events:
            order.append(seq.learner_id)
            events[seq.learner_id] = []
        events[seq.learner_id].extend(seq.events)
    out = []
    for lid in order:
        window = MaskedWindow(LearnerSequence(lid, tuple(events[lid])), ())
        batch = assemble_batch([window], checkpoint.vocab, model.hyper, source)
        run = run_window(model, batch, collect_traces=True)
        for t, tr in enumerate(run.traces):
            out.append((lid, t, tr.pa[0].copy(), tr.ps[0].copy(), tr.us[0].copy()))
    return out


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_latents(path, rows: list[LatentRow]) -> None:
    if not rows:
        raise ValueError("no latent rows to write")
    d_k = rows[0].pa.shape[0]
    cols = (
        ["learner_id", "length"]
        + [f"pa_{i}" for i in range(d_k)]
        + [f"ps_{i}" for i in range(d_k)]
        + [f"us_{i}" for i in range(d_k)]
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            vals = [row.learner_id, str(row.length)]
            for vec in (row.pa, row.ps, row.us):
                vals.extend(_fmt(v) for v in vec)
            fh.write("\t".join(vals) + "\n")


def read_latents(path) -> list[LatentRow]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        d_k = sum(1 for c in header if c.startswith("pa_"))
        rows = []
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            vec = np.array([float(x) for x in parts[2:]])
            rows.append(
                LatentRow(parts[0], int(parts[1]), vec[:d_k], vec[d_k : 2 * d_k], vec[2 * d_k :])
            )
    return rows


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    n_train: int
    n_test: int
    classes: tuple[str, str]


def _stratified_split(labels: np.ndarray, rng: np.random.Generator, test_frac: float = 0.2):
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        n_test = max(1, int(round(test_frac * len(idx))))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    return np.sort(np.array(train_idx)), np.sort(np.array(test_idx))


def fit_probe(
    features: np.ndarray,
    labels: list[str],
    seed: int = 0,
    min_per_class: int = 20,
    l2: float = 0.1,
    lr: float = 0.3,
    iterations: int = 400,
) -> ProbeResult:
    """Logistic probe by full-batch gradient descent on an 80/20
    stratified split; returns held-out accuracy.

    L2 keeps the probe from memorising noise, which pins permuted-label
    accuracy near chance without hurting genuinely separable latents.
    """
    features = np.asarray(features, dtype=np.float64)
    labels_arr = np.asarray(labels)
    classes = tuple(sorted(np.unique(labels_arr).tolist()))
    if len(classes) != 2:
        raise ValueError(f"probe needs exactly two classes, got {classes}")
    for cls in classes:
        n_cls = int((labels_arr == cls).sum())
        if n_cls < min_per_class:
            raise ValueError(f"class '{cls}' has {n_cls} learners; need >= {min_per_class}")

    y = (labels_arr == classes[1]).astype(np.float64)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = _stratified_split(labels_arr, rng)

    mu = features[train_idx].mean(axis=0)
    sd = features[train_idx].std(axis=0)
    sd[sd < 1e-8] = 1.0
    x_train = (features[train_idx] - mu) / sd
    x_test = (features[test_idx] - mu) / sd
    y_train = y[train_idx]

    n, d = x_train.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(iterations):
        z = x_train @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        err = p - y_train
        w -= lr * (x_train.T @ err / n + l2 * w)
        b -= lr * float(err.mean())

    pred = (x_test @ w + b) > 0.0
    accuracy = float((pred == (y[test_idx] > 0.5)).mean())
    return ProbeResult(accuracy, len(train_idx), len(test_idx), classes)


def mean_probe_accuracy(
    features: np.ndarray,
    labels: list[str],
    seed: int = 0,
    splits: int = 1,
    min_per_class: int = 20,
) -> float:
    """Held-out accuracy averaged over `splits` stratified splits.

    A single 20% holdout of a desk-scale population is only a few dozen
    learners, so one split's accuracy carries binomial noise of several
    points; averaging split seeds estimates the same quantity with a
    tighter spread.
    """
    accs = [
        fit_probe(features, labels, seed=seed + s, min_per_class=min_per_class).accuracy
        for s in range(splits)
    ]
    return float(np.mean(accs))


def dimension_features(
    rows: list[LatentRow], labels: dict[str, tuple[str, str]], dimension: str
) -> tuple[np.ndarray, list[str]]:
    """The latent matrix aligned with a style dimension: the processing
    probe reads PS, the understanding probe reads US."""
    if dimension not in DIMENSIONS:
        raise ValueError(f"dimension must be one of {DIMENSIONS}")
    feats, labs = [], []
    for row in rows:
        if row.learner_id not in labels:
            continue
        processing, understanding = labels[row.learner_id]
        if dimension == "processing":
            feats.append(row.ps)
            labs.append(processing)
        else:
            feats.append(row.us)
            labs.append(understanding)
    return np.array(feats), labs


def probe_dimension(
    rows: list[LatentRow],
    labels: dict[str, tuple[str, str]],
    dimension: str,
    seed: int = 0,
    min_per_class: int = 20,
) -> ProbeResult:
    """Probe one style dimension from its aligned latent vector."""
    feats, labs = dimension_features(rows, labels, dimension)
    return fit_probe(feats, labs, seed=seed, min_per_class=min_per_class)


def permutation_null(
    features: np.ndarray,
    labels: list[str],
    trials: int = 20,
    seed: int = 0,
    min_per_class: int = 20,
    splits: int = 5,
) -> list[float]:
    """Split-averaged held-out accuracies after destroying the
    label-feature pairing; the leakage check compares these to 0.65."""
    labels_arr = np.asarray(labels)
    out = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        permuted = labels_arr[rng.permutation(len(labels_arr))].tolist()
        out.append(
            mean_probe_accuracy(features, permuted, seed=seed, splits=splits, min_per_class=min_per_class)
        )
    return out
