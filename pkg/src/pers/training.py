"""Training: objective, negative sampling, epoch loop, checkpoints.

The trainer is deterministic by construction: parameter init, epoch
shuffles, dropout masks and negative draws all come from generators
seeded by (seed, purpose, epoch, batch), so resuming from a checkpoint
replays the identical randomness an uninterrupted run would have used.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import perscell, tensorkit as tk
from .codefeat import HashedTokenSource, PrecomputedSource
from .dataio import Interaction, LearnerSequence, MaskedWindow, Vocabulary
from .encoder import HyperParams
from .perscell import ModelParams, WindowBatch, assemble_batch, output_class_mask, run_window

CHECKPOINT_MAGIC = b"PERS1\n"
FORMAT_VERSION = 1

LOSS_MODES = ("full_softmax", "sampled_bce")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass(frozen=True)
class TrainConfig:
    """Trainer knobs. The reference grids are lr {0.1, 0.01, 0.001},
    layers {1, 2, 3} and dropout {0.1, 0.3, 0.5}; batch sizes default to
    2048 (train) and 4096 (eval)."""

    lr: float = 0.01
    layers: int = 1
    dropout: float = 0.1
    batch_size: int = 2048
    eval_batch_size: int = 4096
    epochs: int = 10
    seed: int = 0
    loss_mode: str = "full_softmax"
    negatives_per_positive: int = 4
    variant: str = "PERS"
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.variant not in perscell.VARIANTS:
            raise ValueError(f"variant must be one of {perscell.VARIANTS}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")


def _rng(seed: int, purpose: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *extra])


def sample_negatives(target: int, vocab_size: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct real-exercise indices (>= 2), never the target."""
    n_real = vocab_size - 2
    if n_real < k + 1:
        raise ValueError(f"catalog too small: {n_real} real exercises for k={k}")
    pool = np.arange(2, vocab_size)
    pool = pool[pool != target]
    return rng.choice(pool, size=k, replace=False)


def _batch_negatives(batch: WindowBatch, vocab_size: int, k: int, rng: np.random.Generator) -> np.ndarray:
    negs = np.zeros((batch.batch, batch.length, k), dtype=np.int64)
    rows, steps = np.nonzero(batch.loss_mask > 0.0)
    for r, t in zip(rows, steps):
        negs[r, t] = sample_negatives(int(batch.targets[r, t]), vocab_size, k, rng)
    return negs


def sequence_loss(
    run: perscell.WindowRun,
    batch: WindowBatch,
    vocab_size: int,
    mode: str = "full_softmax",
    negatives: np.ndarray | None = None,
) -> tk.Tensor:
    """Scalar loss over every masked step of a window batch."""
    masked = batch.loss_mask > 0.0
    if np.any(batch.targets[masked] < 2):
        raise ValueError("loss target is a padding/unknown index")
    total_count = float(masked.sum())
    if total_count == 0.0:
        raise ValueError("batch has no loss steps")
    class_mask = output_class_mask(vocab_size)
    total: tk.Tensor | None = None
    for t, logits in enumerate(run.logits):
        if not masked[:, t].any():
            continue
        if mode == "full_softmax":
            term = tk.cross_entropy(
                logits, batch.targets[:, t], batch.loss_mask[:, t], class_mask, denom=total_count
            )
        else:
            term = tk.bce_with_negatives(
                logits, batch.targets[:, t], negatives[:, t, :], batch.loss_mask[:, t], denom=total_count
            )
        total = term if total is None else tk.add(total, term)
    return total


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Global-norm clipping; the accumulating state update can grow with
    sequence length, so this is the minimal guard against blowups."""
    sq = sum(float((g * g).sum()) for g in grads.values())
    norm = np.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class Checkpoint:
    model: ModelParams  # final-epoch parameters; resume continues from these
    adam: tk.AdamState
    config: TrainConfig
    vocab: Vocabulary
    seed: int
    epochs_done: int
    loss_log: list[float] = field(default_factory=list)
    best_epoch: int = -1  # epoch with the lowest mean loss
    best_tensors: dict[str, tk.Tensor] | None = None

    def best_model(self) -> ModelParams:
        """Parameters of the lowest-loss epoch (the final ones if the run
        never improved or predates best-tracking)."""
        if self.best_tensors is None:
            return self.model
        return self.model.replace_tensors(self.best_tensors)


def train(
    train_windows: list[MaskedWindow],
    vocab: Vocabulary,
    hp: HyperParams,
    config: TrainConfig,
    code_source: PrecomputedSource | HashedTokenSource | None = None,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Run shuffled mini-batch epochs; returns the final checkpoint with
    the per-epoch mean-loss log (the best epoch is recoverable from it).
    """
    if not train_windows:
        raise ValueError("train split is empty")
    hp = hp.with_exercises(vocab.n_exercises)
    needs_code = perscell.uses_code(config.variant)
    dataset = assemble_batch(train_windows, vocab, hp, code_source if needs_code else None)

    if resume is not None:
        model = resume.model
        adam = resume.adam
        start_epoch = resume.epochs_done
        loss_log = list(resume.loss_log)
        best_epoch = resume.best_epoch
        best_tensors = resume.best_tensors
        if model.hyper != hp or resume.vocab != vocab:
            raise CheckpointError("resume checkpoint does not match the dataset/hyperparams")
    else:
        buckets = code_source.buckets if isinstance(code_source, HashedTokenSource) and needs_code else None
        model = perscell.init_model_params(
            _rng(config.seed, 0), hp, config.variant, config.layers, buckets
        )
        adam = tk.AdamState()
        start_epoch = 0
        loss_log = []
        best_epoch = -1
        best_tensors = None

    n = dataset.batch
    for epoch in range(start_epoch, config.epochs):
        order = _rng(config.seed, 1, epoch).permutation(n)
        epoch_loss = 0.0
        epoch_count = 0.0
        for bi, lo in enumerate(range(0, n, config.batch_size)):
            rows = order[lo : lo + config.batch_size]
            batch = dataset.take(rows)
            if not (batch.loss_mask > 0).any():
                continue
            batch_rng = _rng(config.seed, 2, epoch, bi)
            run = run_window(model, batch, dropout=config.dropout, rng=batch_rng)
            negatives = None
            if config.loss_mode == "sampled_bce":
                negatives = _batch_negatives(batch, hp.vocab_size, config.negatives_per_positive, batch_rng)
            loss = sequence_loss(run, batch, hp.vocab_size, config.loss_mode, negatives)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
            count = float((batch.loss_mask > 0).sum())
            epoch_loss += value * count
            epoch_count += count

            grads = tk.backward(loss, model.tensors)
            grads["E_p"][0, :] = 0.0  # the padding row is never trained
            grads = clip_gradients(grads, config.grad_clip)
            model = model.replace_tensors(tk.adam_step(model.tensors, grads, adam, config.lr))
        mean_loss = epoch_loss / max(epoch_count, 1.0)
        loss_log.append(mean_loss)
        if best_epoch < 0 or mean_loss < loss_log[best_epoch]:
            best_epoch = len(loss_log) - 1
            best_tensors = model.tensors  # tensors are immutable; keeping them is free

    return Checkpoint(
        model, adam, config, vocab, config.seed, config.epochs, loss_log, best_epoch, best_tensors
    )


# --- checkpoint file format --------------------------------------------------
#
# magic "PERS1\n", then a little-endian uint64 byte length, then that many
# bytes of UTF-8 JSON (hyperparams, config, vocabulary, tensor manifest),
# then the raw little-endian float64 tensor payloads in manifest order.


def save_checkpoint(path, cp: Checkpoint) -> None:
    names = sorted(cp.model.tensors)
    entries = []
    offset = 0
    payload_parts = []

    def push(name: str, arr: np.ndarray):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "dims": list(arr.shape), "offset": offset})
        payload_parts.append(data)
        offset += len(data)

    for name in names:
        push(name, cp.model.tensors[name].data)
    for name in names:
        if name in cp.adam.m:
            push(f"m:{name}", cp.adam.m[name])
            push(f"v:{name}", cp.adam.v[name])
    best_is_final = cp.best_tensors is cp.model.tensors or cp.best_tensors is None
    if not best_is_final:
        for name in sorted(cp.best_tensors):
            push(f"best:{name}", cp.best_tensors[name].data)

    header = {
        "format_version": FORMAT_VERSION,
        "hyper": asdict(cp.model.hyper),
        "variant": cp.model.variant,
        "layers": cp.model.layers,
        "code_buckets": cp.model.code_buckets,
        "config": asdict(cp.config),
        "vocab": cp.vocab.ids(),
        "adam_t": cp.adam.t,
        "seed": cp.seed,
        "epochs_done": cp.epochs_done,
        "loss_log": cp.loss_log,
        "best_epoch": cp.best_epoch,
        "best_is_final": best_is_final,
        "manifest": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for part in payload_parts:
            fh.write(part)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a version-1 checkpoint")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise CheckpointError("truncated header length")
        header_len = int.from_bytes(raw_len, "little")
        blob = fh.read(header_len)
        if len(blob) != header_len:
            raise CheckpointError("truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable header: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {header.get('format_version')}")
        payload = fh.read()

    hyper = HyperParams(**header["hyper"])
    arrays: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        dims = tuple(entry["dims"])
        size = 8 * int(np.prod(dims)) if dims else 8
        start = entry["offset"]
        chunk = payload[start : start + size]
        if len(chunk) != size:
            raise CheckpointError(f"truncated payload for tensor '{entry['name']}'")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(dims).copy()

    tensors = {}
    best_tensors: dict[str, tk.Tensor] = {}
    adam = tk.AdamState(t=header["adam_t"])
    for name, arr in arrays.items():
        if name.startswith("m:"):
            adam.m[name[2:]] = arr
        elif name.startswith("v:"):
            adam.v[name[2:]] = arr
        elif name.startswith("best:"):
            best_tensors[name[5:]] = tk.parameter(arr, name[5:])
        else:
            tensors[name] = tk.parameter(arr, name)

    if "E_p" not in tensors or tensors["E_p"].data.shape != (hyper.vocab_size, hyper.d_p):
        raise CheckpointError("E_p shape does not match the stored hyperparams")
    if len(header["vocab"]) != hyper.n_exercises:
        raise CheckpointError("vocabulary size does not match the stored hyperparams")

    model = ModelParams(hyper, header["variant"], header["layers"], header["code_buckets"], tensors)
    config = TrainConfig(**header["config"])
    if header.get("best_is_final", True):
        best = tensors if header.get("best_epoch", -1) >= 0 else None
    else:
        best = best_tensors
    return Checkpoint(
        model=model,
        adam=adam,
        config=config,
        vocab=Vocabulary(header["vocab"]),
        seed=header["seed"],
        epochs_done=header["epochs_done"],
        loss_log=list(header["loss_log"]),
        best_epoch=header.get("best_epoch", -1),
        best_tensors=best,
    )


def run_gradcheck(d_k: int = 8, n_exercises: int = 10, steps: int = 3, seed: int = 0) -> dict[str, float]:
    """Finite-difference check of the full model loss on a micro instance.

    The probe sequence contains a repeat attempt and an exercise switch so
    every update path is exercised; returns max relative error per
    parameter (vocabulary size is n_exercises + 2).
    """
    hp = HyperParams(
        d_p=d_k, d_c=6, d_k=d_k, d_pos=d_k, d_ct=3, d_cm=3, d_cs=3,
        max_len=max(steps, 2), n_exercises=n_exercises,
    )
    model = perscell.init_model_params(_rng(seed, 0), hp)
    vocab = Vocabulary([f"p{i}" for i in range(n_exercises)])
    # p0, p0, p1, p0, ...: a repeat attempt then switches, so both the
    # intra- and inter-exercise update paths carry gradient.
    ids = ["p0", "p0"] + [f"p{t % 2}" for t in range(1, steps - 1)]
    gen = _rng(seed, 3)
    events = tuple(
        Interaction(
            "probe", eid, t, "accepted" if t % 2 == 0 else "wrong_answer",
            5 * t + 1, 64 + t, code_vec_ref=f"probe:{t}",
        )
        for t, eid in enumerate(ids[:steps])
    )
    window = MaskedWindow(LearnerSequence("probe", events), tuple(range(steps - 1)))
    source = PrecomputedSource({f"probe:{t}": gen.normal(size=hp.d_c) for t in range(steps)}, hp.d_c)
    batch = assemble_batch([window], vocab, hp, source)

    def loss_fn(tensors):
        probe = model.replace_tensors(dict(tensors))
        run = run_window(probe, batch)
        return sequence_loss(run, batch, hp.vocab_size)

    return {
        name: tk.finite_diff_check(loss_fn, model.tensors, name, h=1e-5)
        for name in sorted(model.tensors)
    }
