"""Representing module: enhanced exercise and code embeddings.

Exercise ids index an embedding table whose row is concatenated with a
sinusoidal position code and projected to width d_k; code vectors are
concatenated with status / execution-time / memory embeddings and
projected likewise. All functions operate on batches: index arrays of
shape (B,) produce (B, d_k) graph nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensorkit as tk
from .dataio import PAD_INDEX, STATUSES

N_TIME_BUCKETS = 32
N_MEMORY_BUCKETS = 32


@dataclass(frozen=True)
class HyperParams:
    """Model widths. d_pos must be even (sin/cos pairs); defaults mirror
    the reference configuration with d_pos tied to d_p."""

    d_p: int = 128
    d_c: int = 128
    d_k: int = 128
    d_pos: int | None = None
    d_ct: int = 16
    d_cm: int = 16
    d_cs: int = 16
    max_len: int = 50
    n_exercises: int = 0

    def __post_init__(self):
        if self.d_pos is None:
            object.__setattr__(self, "d_pos", self.d_p)
        if self.d_pos % 2 != 0:
            raise ValueError(f"d_pos must be even, got {self.d_pos}")
        for name in ("d_p", "d_c", "d_k", "d_ct", "d_cm", "d_cs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def with_exercises(self, n: int) -> "HyperParams":
        return replace(self, n_exercises=n)

    @property
    def vocab_size(self) -> int:
        """Output / embedding table height: N real exercises + 2 pads."""
        return self.n_exercises + 2


def positional_encoding(t: int, d_pos: int) -> np.ndarray:
    """Sinusoid position code: entry 2i = sin(t/10000^(2i/d)), 2i+1 = cos."""
    if d_pos % 2 != 0:
        raise ValueError(f"d_pos must be even, got {d_pos}")
    if t < 0:
        raise ValueError(f"position must be >= 0, got {t}")
    i = np.arange(d_pos // 2)
    angle = t / np.power(10000.0, 2.0 * i / d_pos)
    out = np.empty(d_pos)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def status_index(status: str) -> int:
    try:
        return STATUSES.index(status)
    except ValueError:
        return STATUSES.index("other")


def time_bucket(exec_time_ms: int) -> int:
    """log2 bucket of the millisecond count, capped at 31."""
    return min(N_TIME_BUCKETS - 1, (exec_time_ms + 1).bit_length() - 1)


def memory_bucket(exec_memory_kb: int) -> int:
    return min(N_MEMORY_BUCKETS - 1, (exec_memory_kb + 1).bit_length() - 1)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(rng: np.random.Generator, hp: HyperParams, layers: int = 1) -> dict[str, np.ndarray]:
    """Encoder tables and projections as plain arrays, keyed by name.

    Weight matrices use uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases
    start at zero. Embedding tables follow the same rule with their row
    width as fan-in, except exercise rows 0 (padding) and 1 (unknown)
    which start at zero.
    """
    e_p = _uniform(rng, hp.d_p, (hp.vocab_size, hp.d_p))
    e_p[PAD_INDEX] = 0.0
    e_p[1] = 0.0
    params = {
        "E_p": e_p,
        "status_table": _uniform(rng, hp.d_cs, (len(STATUSES), hp.d_cs)),
        "time_table": _uniform(rng, hp.d_ct, (N_TIME_BUCKETS, hp.d_ct)),
        "memory_table": _uniform(rng, hp.d_cm, (N_MEMORY_BUCKETS, hp.d_cm)),
    }
    d_code_in = hp.d_c + hp.d_cs + hp.d_ct + hp.d_cm
    _add_mlp(params, rng, "1", hp.d_p + hp.d_pos, hp.d_k, layers)
    _add_mlp(params, rng, "2", d_code_in, hp.d_k, layers)
    return params


def _add_mlp(params: dict, rng: np.random.Generator, tag: str, d_in: int, d_out: int, layers: int) -> None:
    params[f"W_{tag}"] = _uniform(rng, d_in, (d_in, d_out))
    params[f"b_{tag}"] = np.zeros(d_out)
    for l in range(2, layers + 1):
        params[f"W_{tag}.{l}"] = _uniform(rng, d_out, (d_out, d_out))
        params[f"b_{tag}.{l}"] = np.zeros(d_out)


def apply_mlp(params: dict[str, tk.Tensor], tag: str, x: tk.Tensor, layers: int = 1) -> tk.Tensor:
    """Affine projection, deepened by (tanh, affine) pairs when layers > 1."""
    y = tk.add_bias(tk.matmul(x, params[f"W_{tag}"]), params[f"b_{tag}"])
    for l in range(2, layers + 1):
        y = tk.add_bias(tk.matmul(tk.tanh(y), params[f"W_{tag}.{l}"]), params[f"b_{tag}.{l}"])
    return y


def enhance_exercise(
    params: dict[str, tk.Tensor],
    hp: HyperParams,
    indices: np.ndarray,
    t: int,
    use_position: bool = True,
    layers: int = 1,
) -> tk.Tensor:
    """Position-aware exercise embedding for one time step of a batch.

    With use_position=False (position-encoding ablation) the position
    slot is zeros, keeping the projection shape unchanged.
    """
    idx = np.asarray(indices)
    e_p = tk.gather_rows(params["E_p"], idx)
    if use_position:
        pos_row = positional_encoding(t, hp.d_pos)
    else:
        pos_row = np.zeros(hp.d_pos)
    pos = tk.tensor(np.tile(pos_row, (idx.shape[0], 1)))
    return apply_mlp(params, "1", tk.concat([e_p, pos]), layers)


def enhance_code(
    params: dict[str, tk.Tensor],
    hp: HyperParams,
    code_vec: tk.Tensor,
    status_idx: np.ndarray,
    time_idx: np.ndarray,
    memory_idx: np.ndarray,
    layers: int = 1,
) -> tk.Tensor:
    """Code embedding enriched with status / time / memory lookups.

    code_vec is a (B, d_c) node: a constant for precomputed vectors, a
    matmul against the bucket table for hashed tokens, or zeros for the
    code-ablated variants.
    """
    es = tk.gather_rows(params["status_table"], np.asarray(status_idx))
    et = tk.gather_rows(params["time_table"], np.asarray(time_idx))
    em = tk.gather_rows(params["memory_table"], np.asarray(memory_idx))
    return apply_mlp(params, "2", tk.concat([code_vec, es, et, em]), layers)
