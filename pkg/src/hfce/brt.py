"""Block-recurrent transformer estimator.

One transformer cell processes two directions at once: the vertical path
maps input token embeddings to output embeddings (self-attention over the
tokens plus cross-attention against the recurrent state), the horizontal
path updates the state (self-attention over the state plus cross-attention
against the tokens, both gated). Keys and values are shared between the
directions; only the four query projections differ. A stack of `depth` cells
forms the block, which is applied recurrently: at every step the block reads
the current channel estimate as its tokens, and the scaled top embedding is
subtracted from the estimate as a residual correction. The same block
weights serve every step, so the trainable parameter count does not grow
with the iteration count (only the per-step scaling scalars do).

Token-order canonicalization: attention is mathematically permutation
equivariant, but floating-point reductions are not, so the block internally
sorts tokens into a value-canonical order and restores the caller's order on
output. Results are then an exact function of the token multiset, and
permuting subcarrier tokens permutes outputs bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .estimators import LinearInitializer, ls_estimate
from .measurement import Observation
from .tensor import ParamStore, Tensor


@dataclass(frozen=True)
class BRTHyperParams:
    """Model shape. Defaults target the reference 2048-dim narrowband setup."""

    depth: int = 3            # N_l, stacked cells per block
    hidden: int = 2048        # N_h, token embedding width (= 2*S*S_bar)
    heads: int = 1
    head_dim: int = 1024
    iters: int = 5            # N_t, recurrent refinement steps
    tokens: int = 1           # input tokens: 1 narrowband, K wideband
    state_tokens: Optional[int] = None  # N_s; None -> same as tokens
    learned_init_state: bool = True     # False -> zero initial states

    def __post_init__(self):
        if min(self.depth, self.hidden, self.heads, self.head_dim,
               self.iters, self.tokens) < 1:
            raise ConfigError("all BRT dimensions must be >= 1")
        if self.heads * self.head_dim > self.hidden:
            raise ConfigError(
                f"attention width heads*head_dim = {self.heads * self.head_dim} "
                f"exceeds hidden dim {self.hidden}"
            )
        if self.state_tokens is not None and self.state_tokens < 1:
            raise ConfigError("state_tokens must be >= 1")

    @property
    def n_state_tokens(self) -> int:
        return self.tokens if self.state_tokens is None else self.state_tokens

    @property
    def attn_dim(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self) -> dict:
        return {
            "depth": self.depth, "hidden": self.hidden, "heads": self.heads,
            "head_dim": self.head_dim, "iters": self.iters, "tokens": self.tokens,
            "state_tokens": self.state_tokens,
            "learned_init_state": self.learned_init_state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BRTHyperParams":
        return cls(**d)


@dataclass
class RefinementTrace:
    """Estimates h_0..h_Nt and the residuals r_t = h_{t-1} - h_t."""

    estimates: list   # Tensors, length N_t + 1
    residuals: list   # Tensors, length N_t

    @property
    def final(self) -> Tensor:
        return self.estimates[-1]

    def arrays(self) -> list:
        return [e.data for e in self.estimates]


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

_CELL_MATS = [
    ("w_k_emb", "hd"), ("w_v_emb", "hd"), ("w_k_state", "hd"), ("w_v_state", "hd"),
    ("w_q_self_v", "hd"), ("w_q_cross_v", "hd"),
    ("w_q_self_h", "hd"), ("w_q_cross_h", "hd"),
]


def init_params(hyper: BRTHyperParams, rng: np.random.Generator) -> ParamStore:
    """Fresh parameter store; layout is fixed by the hyperparameters only."""
    store = ParamStore()
    h, d = hyper.hidden, hyper.attn_dim
    mlp = 2 * h  # expansion factor 2

    def dense(shape):
        fan_in = shape[0]
        return rng.normal(scale=1.0 / np.sqrt(fan_in), size=shape)

    for layer in range(hyper.depth):
        p = f"cell{layer}."
        store.add(p + "ln_emb_g", np.ones(h))
        store.add(p + "ln_emb_b", np.zeros(h))
        store.add(p + "ln_state_g", np.ones(h))
        store.add(p + "ln_state_b", np.zeros(h))
        for name, _ in _CELL_MATS:
            store.add(p + name, dense((h, d)))
        store.add(p + "w_proj_v", dense((2 * d, h)))
        store.add(p + "b_proj_v", np.zeros(h))
        store.add(p + "w_proj_h", dense((2 * d, h)))
        store.add(p + "b_proj_h", np.zeros(h))
        store.add(p + "ln_mlp_v_g", np.ones(h))
        store.add(p + "ln_mlp_v_b", np.zeros(h))
        store.add(p + "mlp_v_w1", dense((h, mlp)))
        store.add(p + "mlp_v_b1", np.zeros(mlp))
        store.add(p + "mlp_v_w2", dense((mlp, h)))
        store.add(p + "mlp_v_b2", np.zeros(h))
        store.add(p + "ln_mlp_h_g", np.ones(h))
        store.add(p + "ln_mlp_h_b", np.zeros(h))
        store.add(p + "mlp_h_w1", dense((h, mlp)))
        store.add(p + "mlp_h_b1", np.zeros(mlp))
        store.add(p + "mlp_h_w2", dense((mlp, h)))
        store.add(p + "mlp_h_b2", np.zeros(h))
        store.add(p + "gate1_u", dense((h, h)))
        store.add(p + "gate1_sz", np.zeros(h))
        store.add(p + "gate1_sg", np.full(h, 1.0))  # sigmoid(1) ~ 0.73 retention
        store.add(p + "gate2_u", dense((h, h)))
        store.add(p + "gate2_sz", np.zeros(h))
        store.add(p + "gate2_sg", np.full(h, 1.0))
        if hyper.learned_init_state:
            store.add(p + "init_state",
                      rng.normal(size=(hyper.n_state_tokens, h)))
    if hyper.tokens > 1:
        store.add("pos_embed", 0.02 * rng.normal(size=(hyper.tokens, h)))
    store.add("beta", np.full(hyper.iters, 0.1))
    return store


def parameter_breakdown(hyper: BRTHyperParams) -> dict:
    """Split the parameter count into block weights and per-iteration scalars."""
    rng = np.random.default_rng(0)
    total = init_params(hyper, rng).count()
    return {"total": total, "beta": hyper.iters, "block": total - hyper.iters}


# ---------------------------------------------------------------------------
# cell forward
# ---------------------------------------------------------------------------

def attention(queries: Tensor, keys: Tensor, values: Tensor, n_heads: int) -> Tensor:
    """Scaled dot-product attention, heads split on the last axis, no mask."""
    d = queries.shape[-1]
    if keys.shape[-1] != d or values.shape[-1] != d:
        raise ShapeError("queries/keys/values widths differ")
    if d % n_heads:
        raise ShapeError(f"attention width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    outs = []
    for i in range(n_heads):
        q = T.slice_axis(queries, i * hd, (i + 1) * hd) if n_heads > 1 else queries
        k = T.slice_axis(keys, i * hd, (i + 1) * hd) if n_heads > 1 else keys
        v = T.slice_axis(values, i * hd, (i + 1) * hd) if n_heads > 1 else values
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(hd))
        outs.append(T.matmul(T.softmax(scores, axis=-1), v))
    return outs[0] if n_heads == 1 else T.concat(outs, axis=-1)


def fixed_gate(state: Tensor, gate_in: Tensor, u_z: Tensor, s_z: Tensor,
               s_g: Tensor) -> Tensor:
    """Convex state update c <- c*g + z*(1-g) with input-independent g."""
    z = T.matmul(gate_in, u_z) + s_z
    g = T.sigmoid(s_g)
    return T.hadamard(state, g) + T.hadamard(z, T.scale(g, -1.0, 1.0))


def _cell(store: ParamStore, layer: int) -> dict:
    prefix = f"cell{layer}."
    return {name: store[prefix + name] for name in
            [n for n, _ in _CELL_MATS] +
            ["ln_emb_g", "ln_emb_b", "ln_state_g", "ln_state_b",
             "w_proj_v", "b_proj_v", "w_proj_h", "b_proj_h",
             "ln_mlp_v_g", "ln_mlp_v_b", "mlp_v_w1", "mlp_v_b1", "mlp_v_w2", "mlp_v_b2",
             "ln_mlp_h_g", "ln_mlp_h_b", "mlp_h_w1", "mlp_h_b1", "mlp_h_w2", "mlp_h_b2",
             "gate1_u", "gate1_sz", "gate1_sg", "gate2_u", "gate2_sz", "gate2_sg"]}


def _common(tokens: Tensor, state: Tensor, c: dict, heads: int):
    """Normalized inputs and the K/V projections shared by both directions."""
    pn = T.layer_norm(tokens, c["ln_emb_g"], c["ln_emb_b"])
    cn = T.layer_norm(state, c["ln_state_g"], c["ln_state_b"])
    k_e = T.matmul(pn, c["w_k_emb"])
    v_e = T.matmul(pn, c["w_v_emb"])
    k_b = T.matmul(cn, c["w_k_state"])
    v_b = T.matmul(cn, c["w_v_state"])
    return pn, cn, k_e, v_e, k_b, v_b


def _mlp(x: Tensor, c: dict, which: str) -> Tensor:
    h1 = T.gelu(T.matmul(x, c[f"mlp_{which}_w1"]) + c[f"mlp_{which}_b1"])
    return T.matmul(h1, c[f"mlp_{which}_w2"]) + c[f"mlp_{which}_b2"]


def _vertical(tokens, common, c, heads) -> Tensor:
    pn, _, k_e, v_e, k_b, v_b = common
    a_self = attention(T.matmul(pn, c["w_q_self_v"]), k_e, v_e, heads)
    a_cross = attention(T.matmul(pn, c["w_q_cross_v"]), k_b, v_b, heads)
    proj = T.matmul(T.concat([a_self, a_cross]), c["w_proj_v"]) + c["b_proj_v"]
    x = tokens + proj
    return x + _mlp(T.layer_norm(x, c["ln_mlp_v_g"], c["ln_mlp_v_b"]), c, "v")


def _horizontal(state, common, c, heads) -> Tensor:
    _, cn, k_e, v_e, k_b, v_b = common
    a_self = attention(T.matmul(cn, c["w_q_self_h"]), k_b, v_b, heads)
    a_cross = attention(T.matmul(cn, c["w_q_cross_h"]), k_e, v_e, heads)
    proj = T.matmul(T.concat([a_self, a_cross]), c["w_proj_h"]) + c["b_proj_h"]
    c1 = fixed_gate(state, proj, c["gate1_u"], c["gate1_sz"], c["gate1_sg"])
    m = _mlp(T.layer_norm(c1, c["ln_mlp_h_g"], c["ln_mlp_h_b"]), c, "h")
    return fixed_gate(c1, m, c["gate2_u"], c["gate2_sz"], c["gate2_sg"])


def cell_vertical(tokens: Tensor, state: Tensor, store: ParamStore, layer: int,
                  hyper: BRTHyperParams) -> Tensor:
    """Output embeddings of one cell; shape follows the tokens."""
    c = _cell(store, layer)
    return _vertical(tokens, _common(tokens, state, c, hyper.heads), c, hyper.heads)


def cell_horizontal(tokens: Tensor, state: Tensor, store: ParamStore, layer: int,
                    hyper: BRTHyperParams) -> Tensor:
    """Next state of one cell; shape follows the state."""
    c = _cell(store, layer)
    return _horizontal(state, _common(tokens, state, c, hyper.heads), c, hyper.heads)


# ---------------------------------------------------------------------------
# canonical token order
# ---------------------------------------------------------------------------

def _canonical_order_2d(mat: np.ndarray) -> np.ndarray:
    """Stable sort of rows by value, refining ties column by column."""
    n_rows, n_cols = mat.shape

    def refine(idx: np.ndarray, col: int) -> np.ndarray:
        if idx.size <= 1 or col >= n_cols:
            return idx
        vals = mat[idx, col]
        s = np.argsort(vals, kind="stable")
        idx, vals = idx[s], vals[s]
        bounds = np.flatnonzero(np.diff(vals)) + 1
        if bounds.size == 0:
            return refine(idx, col + 1)
        pieces, start = [], 0
        for end in list(bounds) + [idx.size]:
            seg = idx[start:end]
            pieces.append(refine(seg, col + 1) if seg.size > 1 else seg)
            start = end
        return np.concatenate(pieces)

    return refine(np.arange(n_rows), 0)


def canonical_token_order(tokens: np.ndarray) -> np.ndarray:
    """Per-sample canonical permutation of the token axis (-2)."""
    if tokens.ndim == 2:
        return _canonical_order_2d(tokens)
    flat = tokens.reshape(-1, tokens.shape[-2], tokens.shape[-1])
    orders = np.stack([_canonical_order_2d(m) for m in flat])
    return orders.reshape(tokens.shape[:-1])


# ---------------------------------------------------------------------------
# block and refinement
# ---------------------------------------------------------------------------

def block_forward(tokens: Tensor, states: list, store: ParamStore,
                  hyper: BRTHyperParams) -> tuple:
    """Run the cell stack once: returns (top embedding, next states).

    tokens: (..., T, hidden); states: per-layer (..., N_s, hidden).
    """
    if len(states) != hyper.depth:
        raise ShapeError(f"got {len(states)} states for depth {hyper.depth}")
    if tokens.shape[-1] != hyper.hidden:
        raise ShapeError(f"token width {tokens.shape[-1]} != hidden {hyper.hidden}")

    n_tokens = tokens.shape[-2]
    if n_tokens > 1:
        order = canonical_token_order(tokens.data)
        p = T.gather_rows(tokens, order)
    else:
        order = None
        p = tokens

    next_states = []
    for layer in range(hyper.depth):
        c = _cell(store, layer)
        common = _common(p, states[layer], c, hyper.heads)
        out = _vertical(p, common, c, hyper.heads)
        next_states.append(_horizontal(states[layer], common, c, hyper.heads))
        p = out

    if order is not None:
        p = T.gather_rows(p, np.argsort(order, axis=-1, kind="stable"))
    return p, next_states


def initial_states(store: ParamStore, hyper: BRTHyperParams, batch: int) -> list:
    states = []
    for layer in range(hyper.depth):
        name = f"cell{layer}.init_state"
        if hyper.learned_init_state:
            states.append(T.tile_leading(store[name], batch))
        else:
            states.append(Tensor(np.zeros((batch, hyper.n_state_tokens, hyper.hidden))))
    return states


def _promote_tokens(h0: np.ndarray, hyper: BRTHyperParams) -> tuple[np.ndarray, bool]:
    """Standardize the initial estimate to (batch, T, hidden)."""
    h0 = np.asarray(h0)
    t = hyper.tokens
    if h0.ndim == 1:
        arr, batched = h0[None, None, :], False
    elif h0.ndim == 2:
        # (T, hidden) for a single wideband sample, else (batch, hidden)
        if t > 1 and h0.shape[0] == t:
            arr, batched = h0[None, :, :], False
        else:
            arr, batched = h0[:, None, :], True
    elif h0.ndim == 3:
        arr, batched = h0, True
    else:
        raise ShapeError(f"cannot interpret initial estimate of shape {h0.shape}")
    if arr.shape[-2] != t or arr.shape[-1] != hyper.hidden:
        raise ShapeError(f"initial estimate {h0.shape} incompatible with "
                         f"{t} tokens x {hyper.hidden} hidden")
    return arr, batched


def refine(h0: Union[np.ndarray, Tensor], store: ParamStore,
           hyper: BRTHyperParams) -> RefinementTrace:
    """Iterative residual refinement of the linear estimate.

    Each step feeds the current estimate (plus the positional embeddings in
    wideband mode) through the shared block and subtracts the scaled top
    embedding: h_t = h_{t-1} - beta_t * p_t.
    """
    if isinstance(h0, Tensor):
        h_prev = h0
    else:
        arr, _ = _promote_tokens(h0, hyper)
        h_prev = Tensor(arr)
    states = initial_states(store, hyper, h_prev.shape[0])
    beta = store["beta"]
    pos = store["pos_embed"] if "pos_embed" in store else None

    estimates, residuals = [h_prev], []
    for step in range(hyper.iters):
        block_in = h_prev + pos if pos is not None else h_prev
        top, states = block_forward(block_in, states, store, hyper)
        r = T.hadamard(top, T.slice_axis(beta, step, step + 1))
        h_prev = h_prev - r
        residuals.append(r)
        estimates.append(h_prev)
    return RefinementTrace(estimates=estimates, residuals=residuals)


def estimate(y: Union[Observation, np.ndarray], init: LinearInitializer,
             store: ParamStore, hyper: BRTHyperParams) -> np.ndarray:
    """Full pipeline: linear estimate, then recurrent refinement."""
    h0 = ls_estimate(y, init)
    arr, batched = _promote_tokens(h0, hyper)
    with T.no_grad():
        trace = refine(arr, store, hyper)
    out = trace.final.data
    if not batched:
        out = out[0]
    if hyper.tokens == 1:
        out = np.squeeze(out, axis=-2)
    return out


# ---------------------------------------------------------------------------
# convenience wrapper
# ---------------------------------------------------------------------------

@dataclass
class BRTEstimator:
    """Bundle of trained weights, hyperparameters, and the linear initializer."""

    store: ParamStore
    hyper: BRTHyperParams
    init: LinearInitializer

    def estimate_batch(self, y: np.ndarray) -> np.ndarray:
        return estimate(np.asarray(y), self.init, self.store, self.hyper)

    def trace_batch(self, y: np.ndarray) -> list:
        """Per-iteration estimates (arrays), h_0 first."""
        h0 = ls_estimate(np.asarray(y), self.init)
        arr, _ = _promote_tokens(h0, self.hyper)
        with T.no_grad():
            trace = refine(arr, self.store, self.hyper)
        return trace.arrays()

    def as_float32(self) -> "BRTEstimator":
        """Single-precision copy for inference timing."""
        store32 = ParamStore()
        for name, t in self.store.items():
            added = store32.add(name, t.data)
            added.data = added.data.astype(np.float32)
            added.requires_grad = False
        init32 = LinearInitializer(matrix=self.init.matrix.astype(np.float32),
                                   eta=self.init.eta, condition=self.init.condition)
        return BRTEstimator(store=store32, hyper=self.hyper, init=init32)


def resize_positional(store: ParamStore, hyper: BRTHyperParams,
                      new_tokens: int) -> tuple[ParamStore, BRTHyperParams]:
    """Adapt a checkpoint to a new token count.

    Positional embeddings are truncated or zero-extended; everything else is
    shared as-is, so the state token count is pinned at its old value to keep
    the learned initial states valid.
    """
    new_hyper = replace(hyper, tokens=new_tokens,
                        state_tokens=hyper.n_state_tokens)
    if hyper.tokens == new_tokens:
        return store, new_hyper
    out = ParamStore()
    for name, t in store.items():
        if name == "pos_embed":
            continue
        out.add(name, t.data)
    if new_tokens > 1:
        old = store["pos_embed"].data if "pos_embed" in store else np.zeros((0, hyper.hidden))
        pos = np.zeros((new_tokens, hyper.hidden))
        keep = min(new_tokens, old.shape[0])
        pos[:keep] = old[:keep]
        out.add("pos_embed", pos)
    return out, new_hyper
