"""The recurrence cell: differencing, latent-state updates, prediction.

One step consumes the enhanced exercise/code embeddings of the current
and previous events, updates the three latent vectors (programming
ability PA, processing style PS, understanding style US), and projects
them to next-exercise logits. `run_window` unrolls a batch of windows,
blending state through padding steps so trailing padding leaves state
untouched.

Ablation variants share this single code path and only flip inputs:
position or code inputs collapse to zeros, or one latent is replaced by
zeros in the prediction concat.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorkit as tk
from .codefeat import HashedTokenSource, PrecomputedSource
from .dataio import MaskedWindow, Vocabulary
from .encoder import (
    HyperParams,
    apply_mlp,
    enhance_code,
    enhance_exercise,
    init_encoder_params,
    memory_bucket,
    status_index,
    time_bucket,
)

VARIANTS = ("PERS", "ERS", "PERS-ep", "PERS-cr", "PERS-pa", "PERS-ps", "PERS-us")


def uses_code(variant: str) -> bool:
    return variant not in ("ERS", "PERS-cr")


def uses_position(variant: str) -> bool:
    return variant != "PERS-ep"


def ablated_latent(variant: str) -> str | None:
    return {"PERS-pa": "pa", "PERS-ps": "ps", "PERS-us": "us"}.get(variant)


def excluded_params(variant: str, names) -> set[str]:
    """Parameter names the variant starves of gradient by construction."""
    dead: set[str] = set()
    if not uses_code(variant):
        dead |= {"W_2", "status_table", "time_table", "memory_table", "code_table"}
    latent = ablated_latent(variant)
    if latent == "pa":
        dead |= {"W_5", "b_5", "W_6", "b_6"}
    elif latent == "ps":
        dead |= {"W_4", "b_4", "W_7", "b_7", "W_8", "b_8"}
    elif latent == "us":
        dead |= {"W_9", "b_9", "W_10"}
    return dead & set(names)


@dataclass
class LatentState:
    """The three intrinsic vectors, (B, d_k) nodes; zeros at t=0."""

    pa: tk.Tensor
    ps: tk.Tensor
    us: tk.Tensor

    @classmethod
    def zeros(cls, batch: int, d_k: int) -> "LatentState":
        return cls(
            tk.tensor(np.zeros((batch, d_k))),
            tk.tensor(np.zeros((batch, d_k))),
            tk.tensor(np.zeros((batch, d_k))),
        )


@dataclass
class StepTrace:
    """Raw values captured at one step of a batch (no graph references).

    Rows where `valid` is 0 are padding: their entries are carried state,
    not real computation, and `row_traces` filters them out.
    """

    valid: np.ndarray
    delta_exercise: np.ndarray
    delta_exercise_mlp: np.ndarray
    delta_code_mlp: np.ndarray
    gate_ps: np.ndarray
    gate_us: np.ndarray
    logits: np.ndarray
    pa: np.ndarray
    ps: np.ndarray
    us: np.ndarray


@dataclass
class ModelParams:
    """Every named tensor plus the knobs needed to rebuild the graph."""

    hyper: HyperParams
    variant: str = "PERS"
    layers: int = 1
    code_buckets: int | None = None
    tensors: dict[str, tk.Tensor] = field(default_factory=dict)

    def replace_tensors(self, tensors: dict[str, tk.Tensor]) -> "ModelParams":
        return ModelParams(self.hyper, self.variant, self.layers, self.code_buckets, tensors)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_cell_params(rng: np.random.Generator, hp: HyperParams, layers: int = 1) -> dict[str, np.ndarray]:
    """Differencing/update/predict weights. W_10 carries no bias: the
    understanding-style recurrence is a pure accumulation, so a bias term
    would break its hold-when-gated-shut property.

    The state-carry blocks of the ability and processing-style updates
    start at identity. Small random carries forget the past within a few
    steps, and the latents then never learn to integrate behaviour over a
    window; an identity carry makes them running accumulators (like the
    understanding-style update is by construction) that training reshapes.
    """
    d = hp.d_k
    m = hp.vocab_size
    params: dict[str, np.ndarray] = {}
    for tag, d_in in (("3", 3 * d), ("4", 3 * d), ("5", 2 * d), ("6", 2 * d), ("7", d), ("8", 2 * d), ("9", d)):
        params[f"W_{tag}"] = _uniform(rng, d_in, (d_in, d))
        params[f"b_{tag}"] = np.zeros(d)
    params["W_6"][d:, :] = np.eye(d)  # PA_{t-1} slot
    params["W_8"][:d, :] = np.eye(d)  # PS_{t-1} slot
    params["W_10"] = _uniform(rng, d, (d, d))
    params["W_11"] = _uniform(rng, 3 * d, (3 * d, d))
    params["b_11"] = np.zeros(d)
    for l in range(2, layers + 1):
        params[f"W_11.{l}"] = _uniform(rng, d, (d, d))
        params[f"b_11.{l}"] = np.zeros(d)
    params["W_12"] = _uniform(rng, d, (d, m))
    params["b_12"] = np.zeros(m)
    return params


def init_model_params(
    rng: np.random.Generator,
    hp: HyperParams,
    variant: str = "PERS",
    layers: int = 1,
    code_buckets: int | None = None,
) -> ModelParams:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if hp.n_exercises < 1:
        raise ValueError("hyperparams need n_exercises set (use hp.with_exercises)")
    arrays = init_encoder_params(rng, hp, layers)
    arrays.update(init_cell_params(rng, hp, layers))
    if code_buckets is not None:
        arrays["code_table"] = _uniform(rng, hp.d_c, (code_buckets, hp.d_c))
    tensors = {name: tk.parameter(a, name) for name, a in arrays.items()}
    return ModelParams(hp, variant, layers, code_buckets, tensors)


def _affine(params: dict[str, tk.Tensor], tag: str, x: tk.Tensor) -> tk.Tensor:
    return tk.add_bias(tk.matmul(x, params[f"W_{tag}"]), params[f"b_{tag}"])


def diff_exercise(
    params: dict[str, tk.Tensor],
    enh_t: tk.Tensor,
    enh_prev: tk.Tensor,
    delta: tk.Tensor | None = None,
) -> tuple[tk.Tensor, tk.Tensor]:
    """Exercise difference embedding and its MLP fusion.

    `delta` defaults to enh_t - enh_prev; the unroll passes a
    position-cancelled difference instead so that a repeated exercise
    yields an exactly zero delta regardless of its window position.
    """
    if delta is None:
        delta = tk.sub(enh_t, enh_prev)
    return delta, _affine(params, "3", tk.concat([delta, enh_t, enh_prev]))


def diff_code(
    params: dict[str, tk.Tensor], enh_t: tk.Tensor, enh_prev: tk.Tensor
) -> tuple[tk.Tensor, tk.Tensor]:
    delta = tk.sub(enh_t, enh_prev)
    return delta, _affine(params, "4", tk.concat([delta, enh_t, enh_prev]))


def update_pa(
    params: dict[str, tk.Tensor], pa_prev: tk.Tensor, enh_p: tk.Tensor, enh_c: tk.Tensor
) -> tk.Tensor:
    delta_pa = _affine(params, "5", tk.concat([enh_p, enh_c]))
    return _affine(params, "6", tk.concat([delta_pa, pa_prev]))


def update_ps(
    params: dict[str, tk.Tensor], ps_prev: tk.Tensor, delta_p_mlp: tk.Tensor, delta_c_mlp: tk.Tensor
) -> tuple[tk.Tensor, tk.Tensor]:
    gate = tk.tanh(_affine(params, "7", delta_p_mlp))
    ps = _affine(params, "8", tk.concat([ps_prev, tk.hadamard(gate, delta_c_mlp)]))
    return ps, gate


def update_us(
    params: dict[str, tk.Tensor], us_prev: tk.Tensor, delta_p_mlp: tk.Tensor, enh_p: tk.Tensor
) -> tuple[tk.Tensor, tk.Tensor]:
    gate = tk.tanh(_affine(params, "9", delta_p_mlp))
    us = tk.add(us_prev, tk.matmul(tk.hadamard(gate, enh_p), params["W_10"]))
    return us, gate


def output_class_mask(vocab_size: int) -> np.ndarray:
    """Real exercises only: padding (0) and unknown (1) never predicted."""
    mask = np.ones(vocab_size, dtype=bool)
    mask[:2] = False
    return mask


def predict(
    params: dict[str, tk.Tensor],
    state: LatentState,
    variant: str = "PERS",
    layers: int = 1,
) -> tk.Tensor:
    """Project the latent state to next-exercise logits (B, M).

    The variant's ablated latent enters the concat as zeros; downstream
    consumers mask classes 0 and 1 before softmax or ranking.
    """
    slots = {"pa": state.pa, "ps": state.ps, "us": state.us}
    dropped = ablated_latent(variant)
    if dropped is not None:
        slots[dropped] = tk.tensor(np.zeros_like(slots[dropped].data))
    pre = apply_mlp(params, "11", tk.concat([slots["pa"], slots["ps"], slots["us"]]), layers)
    return _affine(params, "12", pre)


def _blend(mask: tk.Tensor, inv_mask: tk.Tensor, new: tk.Tensor, old: tk.Tensor) -> tk.Tensor:
    return tk.add(tk.scale_rows(new, mask), tk.scale_rows(old, inv_mask))


def step(
    params: dict[str, tk.Tensor],
    state: LatentState,
    enh_p_t: tk.Tensor,
    enh_p_prev: tk.Tensor,
    enh_c_t: tk.Tensor,
    enh_c_prev: tk.Tensor,
    delta_p: tk.Tensor | None = None,
    variant: str = "PERS",
    layers: int = 1,
) -> tuple[LatentState, dict[str, tk.Tensor]]:
    """One full cell step over prepared embeddings; returns the new state
    and the intermediate nodes (deltas, gates, logits)."""
    delta_p, delta_p_mlp = diff_exercise(params, enh_p_t, enh_p_prev, delta_p)
    delta_c, delta_c_mlp = diff_code(params, enh_c_t, enh_c_prev)
    pa = update_pa(params, state.pa, enh_p_t, enh_c_t)
    ps, gate_ps = update_ps(params, state.ps, delta_p_mlp, delta_c_mlp)
    us, gate_us = update_us(params, state.us, delta_p_mlp, enh_p_t)
    new_state = LatentState(pa, ps, us)
    logits = predict(params, new_state, variant, layers)
    nodes = {
        "delta_exercise": delta_p,
        "delta_exercise_mlp": delta_p_mlp,
        "delta_code": delta_c,
        "delta_code_mlp": delta_c_mlp,
        "gate_ps": gate_ps,
        "gate_us": gate_us,
        "logits": logits,
    }
    return new_state, nodes


@dataclass
class WindowBatch:
    """Dense per-step arrays for a batch of windows, padded to length L.

    exercise_idx uses 0 for padding steps; valid marks real events;
    targets holds the next exercise index where loss_mask is 1 and 0
    elsewhere. Exactly one of code_vecs / code_weights is set unless the
    variant ignores code entirely.
    """

    exercise_idx: np.ndarray  # (B, L) int
    status_idx: np.ndarray  # (B, L) int
    time_idx: np.ndarray  # (B, L) int
    memory_idx: np.ndarray  # (B, L) int
    valid: np.ndarray  # (B, L) float 0/1
    targets: np.ndarray  # (B, L) int
    loss_mask: np.ndarray  # (B, L) float 0/1
    learner_ids: list[str]
    code_vecs: np.ndarray | None = None  # (B, L, d_c)
    code_weights: np.ndarray | None = None  # (B, L, H)

    @property
    def batch(self) -> int:
        return self.exercise_idx.shape[0]

    @property
    def length(self) -> int:
        return self.exercise_idx.shape[1]

    def take(self, rows: np.ndarray) -> "WindowBatch":
        """Row-sliced view for mini-batching an assembled dataset."""
        return WindowBatch(
            exercise_idx=self.exercise_idx[rows],
            status_idx=self.status_idx[rows],
            time_idx=self.time_idx[rows],
            memory_idx=self.memory_idx[rows],
            valid=self.valid[rows],
            targets=self.targets[rows],
            loss_mask=self.loss_mask[rows],
            learner_ids=[self.learner_ids[r] for r in rows],
            code_vecs=None if self.code_vecs is None else self.code_vecs[rows],
            code_weights=None if self.code_weights is None else self.code_weights[rows],
        )


@dataclass
class WindowRun:
    logits: list[tk.Tensor]  # per step, (B, M)
    final_state: LatentState
    traces: list[StepTrace] | None


def row_traces(run: WindowRun, row: int) -> list[StepTrace]:
    """One row's traces, real steps only (padding steps emit no trace)."""
    if run.traces is None:
        raise ValueError("run_window was called without collect_traces")
    out = []
    for tr in run.traces:
        if tr.valid[row] == 0.0:
            continue
        out.append(
            StepTrace(
                valid=tr.valid[row : row + 1],
                delta_exercise=tr.delta_exercise[row],
                delta_exercise_mlp=tr.delta_exercise_mlp[row],
                delta_code_mlp=tr.delta_code_mlp[row],
                gate_ps=tr.gate_ps[row],
                gate_us=tr.gate_us[row],
                logits=tr.logits[row],
                pa=tr.pa[row],
                ps=tr.ps[row],
                us=tr.us[row],
            )
        )
    return out


def assemble_batch(
    windows: list[MaskedWindow],
    vocab: Vocabulary,
    hp: HyperParams,
    code_source: PrecomputedSource | HashedTokenSource | None = None,
    length: int | None = None,
) -> WindowBatch:
    """Pack masked windows into dense arrays, padded to a common length.

    code_source resolves each event's code features; None skips them,
    which is only legal for the code-ablated variants.
    """
    if not windows:
        raise ValueError("assemble_batch: no windows")
    b = len(windows)
    if length is None:
        length = max(len(mw.window) for mw in windows)
    exercise_idx = np.zeros((b, length), dtype=np.int64)
    status_idx = np.zeros((b, length), dtype=np.int64)
    time_idx = np.zeros((b, length), dtype=np.int64)
    mem_idx = np.zeros((b, length), dtype=np.int64)
    valid = np.zeros((b, length))
    targets = np.zeros((b, length), dtype=np.int64)
    loss_mask = np.zeros((b, length))
    code_vecs = None
    code_weights = None
    if isinstance(code_source, PrecomputedSource):
        if code_source.dim != hp.d_c:
            raise ValueError(f"vector table width {code_source.dim} != d_c {hp.d_c}")
        code_vecs = np.zeros((b, length, hp.d_c))
    elif isinstance(code_source, HashedTokenSource):
        if code_source.dim != hp.d_c:
            raise ValueError(f"hashed table width {code_source.dim} != d_c {hp.d_c}")
        code_weights = np.zeros((b, length, code_source.buckets))

    learner_ids = []
    for row, mw in enumerate(windows):
        events = mw.window.events
        if len(events) > length:
            raise ValueError(f"window of length {len(events)} exceeds batch length {length}")
        learner_ids.append(mw.window.learner_id)
        for t, ev in enumerate(events):
            exercise_idx[row, t] = vocab.encode(ev.exercise_id)
            status_idx[row, t] = status_index(ev.status)
            time_idx[row, t] = time_bucket(ev.exec_time_ms)
            mem_idx[row, t] = memory_bucket(ev.exec_memory_kb)
            valid[row, t] = 1.0
            if code_vecs is not None:
                code_vecs[row, t] = code_source.vector(ev)
            elif code_weights is not None:
                code_weights[row, t] = code_source.weights(ev)
        for t in mw.target_steps:
            if t + 1 >= len(events):
                raise ValueError("target step has no following event")
            targets[row, t] = vocab.encode(events[t + 1].exercise_id)
            loss_mask[row, t] = 1.0
    return WindowBatch(
        exercise_idx=exercise_idx,
        status_idx=status_idx,
        time_idx=time_idx,
        memory_idx=mem_idx,
        valid=valid,
        targets=targets,
        loss_mask=loss_mask,
        learner_ids=learner_ids,
        code_vecs=code_vecs,
        code_weights=code_weights,
    )


def _code_vec_node(params: ModelParams, batch: WindowBatch, t: int) -> tk.Tensor:
    hp = params.hyper
    if not uses_code(params.variant):
        return tk.tensor(np.zeros((batch.batch, hp.d_c)))
    if batch.code_weights is not None:
        return tk.matmul(tk.tensor(batch.code_weights[:, t, :]), params.tensors["code_table"])
    if batch.code_vecs is not None:
        return tk.tensor(batch.code_vecs[:, t, :])
    raise ValueError("windows carry no code features but the variant needs them")


def _dropout_mask(rng: np.random.Generator | None, rate: float, shape) -> tk.Tensor | None:
    if rng is None or rate <= 0.0:
        return None
    keep = (rng.random(shape) >= rate) / (1.0 - rate)
    return tk.tensor(keep)


def run_window(
    params: ModelParams,
    batch: WindowBatch,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    collect_traces: bool = False,
) -> WindowRun:
    """Unroll the cell over a window batch.

    Padding steps leave the latent state unchanged (masked blend) and get
    no trace. Dropout (training only) hits the enhanced embeddings; the
    same exercise-side mask covers the current embedding and the
    position-matched previous one, so the intra-exercise zero-delta
    property survives dropout.
    """
    hp = params.hyper
    tensors = params.tensors
    b, length = batch.exercise_idx.shape
    state = LatentState.zeros(b, hp.d_k)
    zeros_dk = tk.tensor(np.zeros((b, hp.d_k)))

    prev_idx = np.zeros(b, dtype=np.int64)
    prev_enh_p: tk.Tensor | None = None
    prev_enh_c: tk.Tensor | None = None
    logits_steps: list[tk.Tensor] = []
    traces: list[StepTrace] | None = [] if collect_traces else None

    for t in range(length):
        idx_t = batch.exercise_idx[:, t]
        enh_p_t = enhance_exercise(tensors, hp, idx_t, t, uses_position(params.variant), params.layers)
        mask_p = _dropout_mask(rng, dropout, enh_p_t.data.shape)
        if mask_p is not None:
            enh_p_t = tk.hadamard(enh_p_t, mask_p)

        if t == 0:
            enh_p_prev = zeros_dk
            enh_c_prev = zeros_dk
            delta_p = tk.sub(enh_p_t, zeros_dk)
        else:
            enh_p_prev = prev_enh_p
            enh_c_prev = prev_enh_c
            # Previous exercise re-embedded at the current position: the
            # positional and bias terms cancel in the subtraction, so a
            # repeat gives a bitwise-zero difference.
            prev_at_t = enhance_exercise(tensors, hp, prev_idx, t, uses_position(params.variant), params.layers)
            if mask_p is not None:
                prev_at_t = tk.hadamard(prev_at_t, mask_p)
            delta_p = tk.sub(enh_p_t, prev_at_t)

        if uses_code(params.variant):
            enh_c_t = enhance_code(
                tensors,
                hp,
                _code_vec_node(params, batch, t),
                batch.status_idx[:, t],
                batch.time_idx[:, t],
                batch.memory_idx[:, t],
                params.layers,
            )
        else:
            # Code-ablated variants: all code-side inputs collapse to zeros,
            # so the projection reduces to its bias and no table is touched.
            zeros_in = tk.tensor(np.zeros((b, hp.d_c + hp.d_cs + hp.d_ct + hp.d_cm)))
            enh_c_t = apply_mlp(tensors, "2", zeros_in, params.layers)
        mask_c = _dropout_mask(rng, dropout, enh_c_t.data.shape)
        if mask_c is not None:
            enh_c_t = tk.hadamard(enh_c_t, mask_c)

        new_state, nodes = step(
            tensors,
            state,
            enh_p_t,
            enh_p_prev,
            enh_c_t,
            enh_c_prev,
            delta_p,
            params.variant,
            params.layers,
        )

        mask = tk.tensor(batch.valid[:, t])
        inv_mask = tk.tensor(1.0 - batch.valid[:, t])
        state = LatentState(
            _blend(mask, inv_mask, new_state.pa, state.pa),
            _blend(mask, inv_mask, new_state.ps, state.ps),
            _blend(mask, inv_mask, new_state.us, state.us),
        )
        logits_steps.append(nodes["logits"])
        if traces is not None:
            traces.append(
                StepTrace(
                    valid=batch.valid[:, t].copy(),
                    delta_exercise=nodes["delta_exercise"].data,
                    delta_exercise_mlp=nodes["delta_exercise_mlp"].data,
                    delta_code_mlp=nodes["delta_code_mlp"].data,
                    gate_ps=nodes["gate_ps"].data,
                    gate_us=nodes["gate_us"].data,
                    logits=nodes["logits"].data,
                    pa=state.pa.data,
                    ps=state.ps.data,
                    us=state.us.data,
                )
            )

        prev_idx = idx_t
        prev_enh_p = enh_p_t
        prev_enh_c = enh_c_t

    return WindowRun(logits_steps, state, traces)
