"""Sequence blocks: a stabilized matrix-memory recurrence with exponential
gating, wrapped in a gated pre-norm block, run over flattened volumes in both
directions.

The recurrence keeps, per head, an outer-product memory C, a normalizer n and
a running log-scale m.  For one position t with projections q, k (pre-scaled
by 1/sqrt(head_dim)), v and gate pre-activations i, f:

    m'  = max(f + m, i)
    C'  = exp(f + m - m') * C + exp(i - m') * v k^T
    n'  = exp(f + m - m') * n + exp(i - m') * k
    h~  = (C' q) / max(|n' . q|, 1)
    h   = sigmoid(out_gate) * h~

``mlstm_step`` implements exactly that (plain numpy, serial).  The taped op
``mlstm_sequence`` evaluates the algebraically identical quadratic form in
one shot: with F_t the cumulative sum of f and A[t, j] = F_t - F_j + i_j for
j <= t (else -inf), the scan's running max m_t equals the row max of A, the
stabilized weights are exp(A[t, j] - m_t) * (q_t . k_j), and the same
readout/normalizer follow from row sums.  This keeps the op a handful of
vectorized tape nodes instead of O(L) python steps, and its backward comes
entirely from the primitive ops' verified VJPs.  Equality of the two paths is
pinned by tests at 1e-6 in float64.

Direction handling: processing a sequence in reverse is defined as flip,
forward pass, flip — bitwise identical to running the scan from the last
position backwards.  A reverse ``vil_block`` flips before its entry norm, so
its causal conv is causal in the reversed order too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nnops import causal_conv1d, layer_norm
from .tensor import ContractError, NumericsError, Tensor

__all__ = [
    "MlstmParams",
    "MlstmState",
    "VilBlockParams",
    "XlstmBlockParams",
    "SequenceView",
    "init_mlstm_state",
    "mlstm_step",
    "mlstm_sequence",
    "mlstm_sequence_serial",
    "vil_block",
    "xlstm_block",
    "volume_to_sequence",
    "sequence_to_volume",
    "init_mlstm_params",
    "init_vil_params",
    "init_xlstm_params",
]

_DIRECTIONS = ("forward", "reverse")


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class MlstmParams:
    """Projections and gates for the matrix-memory recurrence.

    Linear weights are stored (in_features, out_features) and applied as
    ``x @ w``.  Keys are pre-scaled by 1/sqrt(head_dim) at projection time.
    Input/forget gates are scalar per head, the output gate is per channel.
    """

    query_proj: Tensor  # (E, E)
    key_proj: Tensor  # (E, E)
    value_proj: Tensor  # (E, E)
    input_gate_w: Tensor  # (E, H)
    input_gate_b: Tensor  # (H,)
    forget_gate_w: Tensor  # (E, H)
    forget_gate_b: Tensor  # (H,)
    out_gate_w: Tensor  # (E, E)
    out_gate_b: Tensor  # (E,)
    heads: int

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("query_proj", self.query_proj),
            ("key_proj", self.key_proj),
            ("value_proj", self.value_proj),
            ("input_gate_w", self.input_gate_w),
            ("input_gate_b", self.input_gate_b),
            ("forget_gate_w", self.forget_gate_w),
            ("forget_gate_b", self.forget_gate_b),
            ("out_gate_w", self.out_gate_w),
            ("out_gate_b", self.out_gate_b),
        ]

    @property
    def embed_dim(self) -> int:
        return self.query_proj.shape[0]


@dataclass
class MlstmState:
    """Per-head recurrent state: outer-product memory, normalizer, log-scale."""

    cell: np.ndarray  # (B, H, d, d)
    normalizer: np.ndarray  # (B, H, d)
    log_scale: np.ndarray  # (B, H), starts at -inf

    def copy(self) -> "MlstmState":
        return MlstmState(self.cell.copy(), self.normalizer.copy(), self.log_scale.copy())


@dataclass
class VilBlockParams:
    """One gated sequence block: pre-norm, up-projection split into a memory
    path (causal conv -> silu -> recurrence, with a learnable skip) and a
    silu gate, then down-projection with a residual."""

    ln_gamma: Tensor  # (D,)
    ln_beta: Tensor  # (D,)
    up_proj: Tensor  # (D, 2E)
    conv_kernel: Tensor  # (E, width)
    conv_bias: Tensor  # (E,)
    mlstm: MlstmParams
    skip_scale: Tensor  # (E,)
    down_proj: Tensor  # (E, D)
    direction: str = "forward"

    def tensors(self) -> list[tuple[str, Tensor]]:
        own = [
            ("ln_gamma", self.ln_gamma),
            ("ln_beta", self.ln_beta),
            ("up_proj", self.up_proj),
            ("conv_kernel", self.conv_kernel),
            ("conv_bias", self.conv_bias),
            ("skip_scale", self.skip_scale),
            ("down_proj", self.down_proj),
        ]
        return own + [(f"mlstm.{n}", t) for n, t in self.mlstm.tensors()]


@dataclass
class XlstmBlockParams:
    """Standalone entry norm plus a forward/reverse pair of vil blocks."""

    pre_gamma: Tensor  # (C,)
    pre_beta: Tensor  # (C,)
    forward_block: VilBlockParams
    reverse_block: VilBlockParams

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = [("pre_gamma", self.pre_gamma), ("pre_beta", self.pre_beta)]
        out += [(f"fwd.{n}", t) for n, t in self.forward_block.tensors()]
        out += [(f"rev.{n}", t) for n, t in self.reverse_block.tensors()]
        return out


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_mlstm_params(
    rng: np.random.Generator, embed_dim: int, heads: int, dtype=np.float32
) -> MlstmParams:
    if embed_dim % heads != 0:
        raise ContractError(f"embed dim {embed_dim} must be divisible by heads {heads}")
    e, h = embed_dim, heads
    return MlstmParams(
        query_proj=_uniform(rng, (e, e), e, dtype),
        key_proj=_uniform(rng, (e, e), e, dtype),
        value_proj=_uniform(rng, (e, e), e, dtype),
        input_gate_w=_uniform(rng, (e, h), e, dtype),
        input_gate_b=Tensor(np.zeros(h, dtype=dtype), requires_grad=True),
        forget_gate_w=_uniform(rng, (e, h), e, dtype),
        # positive forget bias: sequences start with a mostly-open memory
        forget_gate_b=Tensor(np.ones(h, dtype=dtype), requires_grad=True),
        out_gate_w=_uniform(rng, (e, e), e, dtype),
        out_gate_b=Tensor(np.zeros(e, dtype=dtype), requires_grad=True),
        heads=heads,
    )


def init_vil_params(
    rng: np.random.Generator,
    model_dim: int,
    direction: str,
    heads: int = 4,
    expansion: int = 2,
    conv_width: int = 4,
    dtype=np.float32,
) -> VilBlockParams:
    if direction not in _DIRECTIONS:
        raise ContractError(f"direction must be one of {_DIRECTIONS}, got {direction!r}")
    inner = expansion * model_dim
    return VilBlockParams(
        ln_gamma=Tensor(np.ones(model_dim, dtype=dtype), requires_grad=True),
        ln_beta=Tensor(np.zeros(model_dim, dtype=dtype), requires_grad=True),
        up_proj=_uniform(rng, (model_dim, 2 * inner), model_dim, dtype),
        conv_kernel=_uniform(rng, (inner, conv_width), conv_width, dtype),
        conv_bias=Tensor(np.zeros(inner, dtype=dtype), requires_grad=True),
        mlstm=init_mlstm_params(rng, inner, heads, dtype),
        skip_scale=Tensor(np.ones(inner, dtype=dtype), requires_grad=True),
        down_proj=_uniform(rng, (inner, model_dim), inner, dtype),
        direction=direction,
    )


def init_xlstm_params(
    rng: np.random.Generator,
    channels: int,
    heads: int = 4,
    expansion: int = 2,
    conv_width: int = 4,
    dtype=np.float32,
) -> XlstmBlockParams:
    return XlstmBlockParams(
        pre_gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        pre_beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        forward_block=init_vil_params(rng, channels, "forward", heads, expansion, conv_width, dtype),
        reverse_block=init_vil_params(rng, channels, "reverse", heads, expansion, conv_width, dtype),
    )


# ---------------------------------------------------------------------------
# serial recurrence (plain numpy)


def init_mlstm_state(batch: int, heads: int, head_dim: int, dtype=np.float32) -> MlstmState:
    return MlstmState(
        cell=np.zeros((batch, heads, head_dim, head_dim), dtype=dtype),
        normalizer=np.zeros((batch, heads, head_dim), dtype=dtype),
        log_scale=np.full((batch, heads), -np.inf, dtype=dtype),
    )


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, e = x.shape
    return x.reshape(b, heads, e // heads)


def mlstm_step(x: np.ndarray, params: MlstmParams, state: MlstmState):
    """One recurrence step on a (B, E) slice; returns (h, new_state).

    Serial reference path (not taped).  Raises NumericsError, naming the
    offending gate, if an activation leaves the finite range — e.g. an
    input gate forced to -inf on the very first step, where the running
    log-scale is still -inf.
    """
    if x.ndim != 2 or x.shape[1] != params.embed_dim:
        raise ContractError(f"mlstm_step: expected (B, {params.embed_dim}), got {x.shape}")
    heads = params.heads
    head_dim = params.embed_dim // heads
    scale = 1.0 / np.sqrt(head_dim)

    q = _split_heads(x @ params.query_proj.data, heads)  # (B, H, d)
    k = _split_heads(x @ params.key_proj.data, heads) * scale
    v = _split_heads(x @ params.value_proj.data, heads)
    i_pre = x @ params.input_gate_w.data + params.input_gate_b.data  # (B, H)
    f_pre = x @ params.forget_gate_w.data + params.forget_gate_b.data

    m_new = np.maximum(f_pre + state.log_scale, i_pre)
    i_act = np.exp(i_pre - m_new)
    f_act = np.exp(f_pre + state.log_scale - m_new)
    if not np.all(np.isfinite(i_act)):
        raise NumericsError("mlstm_step: input gate activation is non-finite")
    if not np.all(np.isfinite(f_act)):
        raise NumericsError("mlstm_step: forget gate activation is non-finite")

    cell = (
        f_act[..., None, None] * state.cell
        + i_act[..., None, None] * v[..., :, None] * k[..., None, :]
    )
    normalizer = f_act[..., None] * state.normalizer + i_act[..., None] * k

    weight = np.einsum("bhij,bhj->bhi", cell, q)  # C' q
    denom = np.maximum(np.abs(np.einsum("bhj,bhj->bh", normalizer, q)), 1.0)
    h_inner = weight / denom[..., None]  # (B, H, d)
    if not np.all(np.isfinite(h_inner)):
        raise NumericsError("mlstm_step: memory readout is non-finite")

    out_gate = _stable_sigmoid_np(x @ params.out_gate_w.data + params.out_gate_b.data)
    h = out_gate * h_inner.reshape(x.shape)
    return h, MlstmState(cell, normalizer, m_new)


def _stable_sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def mlstm_sequence_serial(
    seq: np.ndarray, params: MlstmParams, direction: str = "forward"
) -> np.ndarray:
    """Step-by-step scan over (B, L, E); the slow twin of ``mlstm_sequence``."""
    if direction not in _DIRECTIONS:
        raise ContractError(f"direction must be one of {_DIRECTIONS}, got {direction!r}")
    if seq.ndim != 3:
        raise ContractError(f"mlstm_sequence_serial: expected (B, L, E), got {seq.shape}")
    work = np.flip(seq, axis=1) if direction == "reverse" else seq
    b, length, _ = work.shape
    state = init_mlstm_state(b, params.heads, params.embed_dim // params.heads, work.dtype)
    outs = np.empty_like(work)
    for t in range(length):
        outs[:, t], state = mlstm_step(work[:, t], params, state)
    return np.flip(outs, axis=1) if direction == "reverse" else outs


# ---------------------------------------------------------------------------
# parallel (taped) sequence op


_MASK_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _causal_mask(length: int, dtype) -> np.ndarray:
    """(L, L) additive mask: 0 on and below the diagonal, -inf above."""
    key = (length, np.dtype(dtype).str)
    mask = _MASK_CACHE.get(key)
    if mask is None:
        mask = np.zeros((length, length), dtype=dtype)
        mask[np.triu_indices(length, k=1)] = -np.inf
        mask.setflags(write=False)
        _MASK_CACHE[key] = mask
    return mask


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    if b is not None:
        col = T.reshape(b, (1,) * (y.ndim - 1) + (b.shape[0],))
        y = T.add(y, T.broadcast_to(col, y.shape))
    return y


def mlstm_sequence(seq: Tensor, params: MlstmParams, direction: str = "forward") -> Tensor:
    """Run the recurrence over a whole (B, L, E) sequence as one taped op.

    Evaluates the stabilized quadratic form (see module docstring); output is
    elementwise equal to scanning ``mlstm_step`` over the sequence, up to
    floating-point associativity in the cumulative log-forget sums.
    """
    if direction not in _DIRECTIONS:
        raise ContractError(f"direction must be one of {_DIRECTIONS}, got {direction!r}")
    if not isinstance(seq, Tensor) or seq.ndim != 3:
        raise ContractError("mlstm_sequence: expected a (B, L, E) Tensor")
    if seq.shape[2] != params.embed_dim:
        raise ContractError(
            f"mlstm_sequence: embed dim {seq.shape[2]} != params dim {params.embed_dim}"
        )
    work = T.flip(seq, (1,)) if direction == "reverse" else seq
    out = _mlstm_parallel(work, params)
    return T.flip(out, (1,)) if direction == "reverse" else out


def _mlstm_parallel(seq: Tensor, params: MlstmParams) -> Tensor:
    b, length, embed = seq.shape
    heads = params.heads
    head_dim = embed // heads
    full = (b, heads, length, length)

    def heads_first(x: Tensor) -> Tensor:  # (B, L, E) -> (B, H, L, d)
        return T.permute(T.reshape(x, (b, length, heads, head_dim)), (0, 2, 1, 3))

    q = heads_first(T.matmul(seq, params.query_proj))
    k = heads_first(T.mul(T.matmul(seq, params.key_proj), 1.0 / np.sqrt(head_dim)))
    v = heads_first(T.matmul(seq, params.value_proj))

    def gate(w: Tensor, bias: Tensor) -> Tensor:  # (B, L, E) @ (E, H) -> (B, H, L)
        return T.permute(_linear(seq, w, bias), (0, 2, 1))

    i_pre = gate(params.input_gate_w, params.input_gate_b)
    f_pre = gate(params.forget_gate_w, params.forget_gate_b)

    cum_f = T.cumsum(f_pre, axis=2)  # (B, H, L), inclusive
    row = T.broadcast_to(T.reshape(cum_f, (b, heads, length, 1)), full)
    col = T.broadcast_to(T.reshape(T.sub(i_pre, cum_f), (b, heads, 1, length)), full)
    logits = T.add(row, col)  # logits[t, j] = F_t - F_j + i_j
    mask = Tensor(np.asarray(_causal_mask(length, seq.data.dtype)))
    logits = T.add(logits, T.broadcast_to(T.reshape(mask, (1, 1, length, length)), full))

    # row max == the scan's running log-scale m_t (diagonal keeps it finite)
    log_scale = T.reduce_max(logits, axis=3, keepdims=True)
    decay = T.exp(T.sub(logits, T.broadcast_to(log_scale, full)))

    scores = T.matmul(q, T.permute(k, (0, 1, 3, 2)))  # q_t . k_j
    weights = T.mul(scores, decay)
    numer = T.matmul(weights, v)  # (B, H, L, d)
    denom_raw = T.reduce_sum(weights, axis=3, keepdims=True)
    denom = T.max_with_scalar(T.absolute(denom_raw), 1.0)
    inner = T.div(numer, T.broadcast_to(denom, numer.shape))
    merged = T.reshape_permute(inner, (b, length, embed), (0, 2, 1, 3))

    out_gate = T.sigmoid(_linear(seq, params.out_gate_w, params.out_gate_b))
    return T.mul(out_gate, merged)


# ---------------------------------------------------------------------------
# blocks


def vil_block(seq: Tensor, params: VilBlockParams) -> Tensor:
    """Pre-norm gated block around the sequence recurrence; (B, L, D) -> same.

    Reverse-direction blocks flip the sequence on entry and exit, so every
    internal op (including the causal conv) sees the reversed order.
    """
    if not isinstance(seq, Tensor) or seq.ndim != 3:
        raise ContractError("vil_block: expected a (B, L, D) Tensor")
    if seq.shape[2] != params.ln_gamma.shape[0]:
        raise ContractError(
            f"vil_block: model dim {seq.shape[2]} != params dim {params.ln_gamma.shape[0]}"
        )
    reverse = params.direction == "reverse"
    work = T.flip(seq, (1,)) if reverse else seq

    u = layer_norm(work, params.ln_gamma, params.ln_beta)
    up = T.matmul(u, params.up_proj)  # (B, L, 2E)
    memory_in, gate_in = T.split(up, 2, axis=2)

    conv = T.silu(causal_conv1d(memory_in, params.conv_kernel, params.conv_bias))
    h = mlstm_sequence(conv, params.mlstm, "forward")
    skip = T.reshape(params.skip_scale, (1, 1, conv.shape[2]))
    h = T.add(h, T.mul(conv, T.broadcast_to(skip, conv.shape)))

    gated = T.mul(h, T.silu(gate_in))
    y = T.add(work, T.matmul(gated, params.down_proj))
    return T.flip(y, (1,)) if reverse else y


@dataclass
class SequenceView:
    """A volume flattened to (B, L, C), remembering its spatial extent."""

    seq: Tensor
    spatial: tuple[int, ...]


def volume_to_sequence(x: Tensor) -> SequenceView:
    """(B, C, *spatial) -> (B, prod(spatial), C), row-major spatial order."""
    if not isinstance(x, Tensor) or x.ndim < 3:
        raise ContractError(f"volume_to_sequence: expected (B, C, *spatial), got shape {getattr(x, 'shape', None)}")
    b, c = x.shape[:2]
    spatial = x.shape[2:]
    length = int(np.prod(spatial))
    order = (0,) + tuple(range(2, x.ndim)) + (1,)
    seq = T.reshape_permute(x, (b, length, c), order)
    return SequenceView(seq, spatial)


def sequence_to_volume(view: SequenceView) -> Tensor:
    """Inverse of ``volume_to_sequence``."""
    seq = view.seq
    if not isinstance(seq, Tensor) or seq.ndim != 3:
        raise ContractError("sequence_to_volume: expected a (B, L, C) Tensor")
    b, length, c = seq.shape
    if int(np.prod(view.spatial)) != length:
        raise ContractError(
            f"sequence_to_volume: length {length} != prod of spatial {view.spatial}"
        )
    grid = T.reshape(seq, (b,) + view.spatial + (c,))
    rank = len(view.spatial)
    return T.permute(grid, (0, rank + 1) + tuple(range(1, rank + 1)))


def xlstm_block(x: Tensor, params: XlstmBlockParams) -> Tensor:
    """Flatten a (B, C, *spatial) volume, norm it, run a forward and a
    reverse vil block, and fold it back to the volume layout."""
    view = volume_to_sequence(x)
    u = layer_norm(view.seq, params.pre_gamma, params.pre_beta)
    u = vil_block(u, params.forward_block)
    u = vil_block(u, params.reverse_block)
    return sequence_to_volume(SequenceView(u, view.spatial))
