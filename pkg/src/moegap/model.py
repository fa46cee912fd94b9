"""Decoder-only transformer whose feed-forward sublayers are top-k routed experts."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import substream
from .tensor import Tensor

INIT_STD = 0.02


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class MoEModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_experts: int = 4
    top_k: int = 2
    d_ffn: int = 256
    context_length: int = 128
    tie_embeddings: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "n_experts",
                     "top_k", "d_ffn", "context_length"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.top_k > self.n_experts:
            raise ConfigError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    @classmethod
    def full_size(cls, **overrides) -> MoEModelConfig:
        """The full-size 8-expert, 6-layer shape (shape tests only; too big to train here)."""
        base = dict(vocab_size=50257, d_model=512, n_layers=6, n_heads=8, n_experts=8,
                    top_k=2, d_ffn=2048, context_length=1024)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> MoEModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MoEModelConfig:
        return cls(**d)

    def parameter_count(self) -> int:
        d, f, n = self.d_model, self.d_ffn, self.n_experts
        per_expert = 2 * f * d + 2 * f
        per_layer = 2 * d + 4 * d * d + 2 * d + n * d + n * per_expert
        total = self.vocab_size * d + self.context_length * d + self.n_layers * per_layer + 2 * d
        if not self.tie_embeddings:
            total += self.vocab_size * d
        return total


def _normal(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def _ones(n: int) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


@dataclass
class Expert:
    w_up: Tensor     # [d_ffn, d_model], the matrix the regularizer sees
    ln_gain: Tensor  # [d_ffn]
    ln_bias: Tensor  # [d_ffn]
    w_down: Tensor   # [d_model, d_ffn]

    def __call__(self, x: Tensor) -> Tensor:
        return expert_forward(self, x)


def expert_forward(expert: Expert, x: Tensor) -> Tensor:
    """``W_down · LayerNorm(SiLU(W_up · x))`` for one vector or a batch of rows."""
    hidden = T.silu(T.linear(x, expert.w_up))
    return T.linear(T.layernorm(hidden, expert.ln_gain, expert.ln_bias), expert.w_down)


@dataclass
class Router:
    w_gate: Tensor  # [n_experts, d_model]


@dataclass
class RoutingTrace:
    """Per-token routing record of one MoE layer.

    ``outputs[t, j]`` is the full output of expert ``indices[t, j]`` on token
    ``t`` before it is scaled by ``gates[t, j]``.
    """
    layer: int
    indices: np.ndarray  # [tokens, k] int
    gates: np.ndarray    # [tokens, k]
    outputs: np.ndarray  # [tokens, k, d_model]

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def combined(self) -> np.ndarray:
        return np.einsum("tk,tkd->td", self.gates, self.outputs)


def top_k_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits per row; equal logits go to the lower index."""
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


class MoELayer:
    def __init__(self, router: Router, experts: list[Expert], top_k: int):
        if top_k > len(experts):
            raise ConfigError(f"top_k={top_k} exceeds n_experts={len(experts)}")
        self.router = router
        self.experts = experts
        self.top_k = top_k

    def __call__(self, x: Tensor, layer: int = 0, record_trace: bool = False):
        return moe_layer_forward(self, x, layer, record_trace)


def moe_layer_forward(moe: MoELayer, x: Tensor, layer: int = 0, record_trace: bool = False):
    """Route each row of ``x`` ([tokens, d_model]) to its top-k experts.

    Every expert is evaluated on every row and unselected experts get a gate of
    exactly zero, so a token's result never depends on which other tokens share
    its batch.
    """
    n = len(moe.experts)
    logits = T.linear(x, moe.router.w_gate)
    idx = top_k_indices(logits.data, moe.top_k)
    gates = T.softmax(T.take_along_axis(logits, idx, axis=1), axis=1)
    dense_gates = T.scatter(gates, idx, n)

    out = None
    outputs = []
    for e, expert in enumerate(moe.experts):
        h = expert(x)
        outputs.append(h.data)
        term = T.mul(h, T.getitem(dense_gates, (slice(None), slice(e, e + 1))))
        out = term if out is None else T.add(out, term)

    trace = None
    if record_trace:
        stacked = np.stack(outputs, axis=1)
        trace = RoutingTrace(
            layer=layer,
            indices=idx.copy(),
            gates=gates.data.copy(),
            outputs=np.take_along_axis(stacked, idx[:, :, None], axis=1),
        )
    return out, trace


class CausalSelfAttention:
    def __init__(self, w_q, w_k, w_v, w_o, n_heads: int):
        self.w_q, self.w_k, self.w_v, self.w_o = w_q, w_k, w_v, w_o
        self.n_heads = n_heads

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.n_heads
        hd = d // h

        def heads(w):
            return T.transpose(T.reshape(T.linear(x, w), (b, t, h, hd)), (0, 2, 1, 3))

        q, k, v = heads(self.w_q), heads(self.w_k), heads(self.w_v)
        att = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        future = np.triu(np.ones((t, t), dtype=bool), k=1)
        att = T.softmax(T.masked_fill(att, future, -np.inf), axis=-1)
        y = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        return T.linear(y, self.w_o)


class Block:
    def __init__(self, ln1, attn: CausalSelfAttention, ln2, moe: MoELayer):
        self.ln1, self.attn, self.ln2, self.moe = ln1, attn, ln2, moe

    def __call__(self, x: Tensor, layer: int, record_trace: bool):
        x = T.add(x, self.attn(T.layernorm(x, *self.ln1)))
        b, t, d = x.shape
        flat = T.reshape(T.layernorm(x, *self.ln2), (b * t, d))
        moe_out, trace = self.moe(flat, layer, record_trace)
        return T.add(x, T.reshape(moe_out, (b, t, d))), trace


class MoEModel:
    def __init__(self, config: MoEModelConfig):
        self.config = config
        rng = substream(config.seed, "init")
        c = config
        self.params: dict[str, Tensor] = {}
        p = self.params
        p["tok_emb"] = _normal(rng, c.vocab_size, c.d_model)
        p["pos_emb"] = _normal(rng, c.context_length, c.d_model)
        for i in range(c.n_layers):
            pre = f"layers.{i}."
            p[pre + "ln1.gain"], p[pre + "ln1.bias"] = _ones(c.d_model), _zeros(c.d_model)
            for name in ("w_q", "w_k", "w_v", "w_o"):
                p[pre + "attn." + name] = _normal(rng, c.d_model, c.d_model)
            p[pre + "ln2.gain"], p[pre + "ln2.bias"] = _ones(c.d_model), _zeros(c.d_model)
            p[pre + "router.w_gate"] = _normal(rng, c.n_experts, c.d_model)
            for e in range(c.n_experts):
                ep = f"{pre}experts.{e}."
                p[ep + "w_up"] = _normal(rng, c.d_ffn, c.d_model)
                p[ep + "ln.gain"], p[ep + "ln.bias"] = _ones(c.d_ffn), _zeros(c.d_ffn)
                p[ep + "w_down"] = _normal(rng, c.d_model, c.d_ffn)
        p["ln_f.gain"], p["ln_f.bias"] = _ones(c.d_model), _zeros(c.d_model)
        if not c.tie_embeddings:
            p["lm_head"] = _normal(rng, c.vocab_size, c.d_model)
        self.blocks: list[Block] = []
        self._wire()

    def _wire(self) -> None:
        c, p = self.config, self.params
        self.blocks = []
        for i in range(c.n_layers):
            pre = f"layers.{i}."
            experts = [
                Expert(p[f"{pre}experts.{e}.w_up"], p[f"{pre}experts.{e}.ln.gain"],
                       p[f"{pre}experts.{e}.ln.bias"], p[f"{pre}experts.{e}.w_down"])
                for e in range(c.n_experts)
            ]
            attn = CausalSelfAttention(*(p[pre + "attn." + n] for n in ("w_q", "w_k", "w_v", "w_o")),
                                       n_heads=c.n_heads)
            moe = MoELayer(Router(p[pre + "router.w_gate"]), experts, c.top_k)
            self.blocks.append(Block((p[pre + "ln1.gain"], p[pre + "ln1.bias"]), attn,
                                     (p[pre + "ln2.gain"], p[pre + "ln2.bias"]), moe))

    # -- parameter access ----------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def expert_up_weights(self) -> list[list[Tensor]]:
        """``W_up`` tensors grouped by layer, in expert order."""
        return [[e.w_up for e in block.moe.experts] for block in self.blocks]

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ConfigError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ConfigError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    # -- forward ---------------------------------------------------------
    def forward(self, tokens, record_trace: bool = False):
        """Logits for ``tokens`` ([seq] or [batch, seq]) plus one trace per layer."""
        ids = np.asarray(tokens, dtype=np.intp)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise InputError(f"tokens must be a non-empty [seq] or [batch, seq] array, got {ids.shape}")
        b, t = ids.shape
        if t > self.config.context_length:
            raise InputError(f"sequence length {t} exceeds context_length={self.config.context_length}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise InputError("token id out of vocabulary range")

        p = self.params
        x = T.add(T.embedding(p["tok_emb"], ids), T.getitem(p["pos_emb"], slice(0, t)))
        traces = []
        for i, block in enumerate(self.blocks):
            x, trace = block(x, i, record_trace)
            if record_trace:
                traces.append(trace)
        x = T.layernorm(x, p["ln_f.gain"], p["ln_f.bias"])
        head = p["tok_emb"] if self.config.tie_embeddings else p["lm_head"]
        logits = T.linear(x, head)
        if single:
            logits = T.reshape(logits, (t, self.config.vocab_size))
        return logits, traces

    __call__ = forward

    def loss(self, inputs, targets) -> Tensor:
        logits, _ = self.forward(inputs)
        return T.cross_entropy(logits, targets)


def model_forward(model: MoEModel, tokens):
    return model.forward(tokens, record_trace=True)
