"""Tiny decoder-only transformer classifier hosting adapters on W_q and W_v."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .lora import AdapterStack, AdapterStateError, LoraAdapter, init_adapter, stack_forward_rows
from .tensor import Tensor

_MASK_NEG = -1e9


class ModelInputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 64
    n_outputs: int = 2
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len",
                     "n_outputs", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class Layer:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    q_stack: AdapterStack
    v_stack: AdapterStack

    BASE = ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class ModelWeights:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[Layer]
    lnf_g: Tensor
    lnf_b: Tensor
    head: Tensor
    head_b: Tensor
    base_trainable: bool = field(default=False)

    GLOBAL = ("tok_emb", "pos_emb", "lnf_g", "lnf_b", "head", "head_b")

    def base_params(self) -> list[tuple[str, Tensor]]:
        out = [(n, getattr(self, n)) for n in ("tok_emb", "pos_emb")]
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{n}", getattr(layer, n)) for n in Layer.BASE]
        out += [(n, getattr(self, n)) for n in ("lnf_g", "lnf_b", "head", "head_b")]
        return out

    def stacks(self) -> list[tuple[str, AdapterStack]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"layers.{i}.q", layer.q_stack))
            out.append((f"layers.{i}.v", layer.v_stack))
        return out

    def adapters(self) -> list[tuple[str, LoraAdapter]]:
        return [(name, ad) for name, st in self.stacks() for ad in st]

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.base_trainable:
            out += self.base_params()
        for name, st in self.stacks():
            for ad in st.trainable():
                out.append((f"{name}.{ad.task_id}.A", ad.A))
                out.append((f"{name}.{ad.task_id}.B", ad.B))
        return out

    def set_base_trainable(self, flag: bool) -> None:
        self.base_trainable = flag
        for _, p in self.base_params():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def n_base_params(self) -> int:
        return sum(p.size for _, p in self.base_params())

    def n_params(self) -> int:
        return self.n_base_params() + sum(ad.A.size + ad.B.size for _, ad in self.adapters())

    def astype(self, dtype) -> "ModelWeights":
        """Deep copy with every array cast to ``dtype`` (64-bit shadow mode for checks)."""
        return _copy_weights(self, dtype)

    def copy(self) -> "ModelWeights":
        return _copy_weights(self, None)


def _copy_tensor(t: Tensor, dtype) -> Tensor:
    dt = t.dtype if dtype is None else dtype
    out = Tensor(t.data.astype(dt, copy=True), dtype=dt)
    out.requires_grad = t.requires_grad
    return out


def _copy_weights(w: ModelWeights, dtype) -> ModelWeights:
    layers = []
    for layer in w.layers:
        kw = {n: _copy_tensor(getattr(layer, n), dtype) for n in Layer.BASE}
        for site in ("q_stack", "v_stack"):
            src: AdapterStack = getattr(layer, site)
            st = AdapterStack(src.d, src.k)
            for ad in src:
                st.adapters.append(LoraAdapter(_copy_tensor(ad.A, dtype), _copy_tensor(ad.B, dtype),
                                               ad.task_id, ad.frozen))
            kw[site] = st
        layers.append(Layer(**kw))
    glob = {n: _copy_tensor(getattr(w, n), dtype) for n in ModelWeights.GLOBAL}
    return ModelWeights(w.config, layers=layers, base_trainable=w.base_trainable, **glob)


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelWeights:
    """Random base weights; linear maps are stored as ``d_out x d_in``."""
    rng = np.random.default_rng(seed)
    d, h = config.d_model, config.d_model * config.mlp_ratio

    def lin(d_out, d_in):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, d_in)).astype(dtype), dtype=dtype)

    def const(n, v):
        return Tensor(np.full(n, v, dtype=dtype), dtype=dtype)

    tok = Tensor(rng.normal(0.0, 1.0, size=(config.vocab_size, d)).astype(dtype), dtype=dtype)
    pos = Tensor(rng.normal(0.0, 0.5, size=(config.max_seq_len, d)).astype(dtype), dtype=dtype)
    layers = []
    for _ in range(config.n_layers):
        layers.append(Layer(
            wq=lin(d, d), wk=lin(d, d), wv=lin(d, d), wo=lin(d, d),
            ln1_g=const(d, 1.0), ln1_b=const(d, 0.0), ln2_g=const(d, 1.0), ln2_b=const(d, 0.0),
            w1=lin(h, d), b1=const(h, 0.0), w2=lin(d, h), b2=const(d, 0.0),
            q_stack=AdapterStack(d, d), v_stack=AdapterStack(d, d)))
    return ModelWeights(config, tok, pos, layers, const(d, 1.0), const(d, 0.0),
                        lin(config.n_outputs, d), const(config.n_outputs, 0.0))


# ---------------------------------------------------------------------------
# forward

def _check_tokens(config: ModelConfig, seq) -> np.ndarray:
    arr = np.asarray(seq, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ModelInputError("token sequence must be a non-empty 1-D index list")
    if arr.size > config.max_seq_len:
        raise ModelInputError(f"sequence length {arr.size} exceeds max_seq_len {config.max_seq_len}")
    if arr.min() < 0 or arr.max() >= config.vocab_size:
        raise ModelInputError(f"token index out of range for vocab_size {config.vocab_size}")
    return arr


def _linear(x: Tensor, W: Tensor) -> Tensor:
    return tc.matmul(x, tc.transpose(W))


def _split_heads(x: Tensor, B: int, L: int, H: int, dh: int) -> Tensor:
    x = tc.reshape(x, (B, L, H, dh))
    x = tc.transpose(x, (0, 2, 1, 3))
    return tc.reshape(x, (B * H, L, dh))


def _merge_heads(x: Tensor, B: int, L: int, H: int, dh: int) -> Tensor:
    x = tc.reshape(x, (B, H, L, dh))
    x = tc.transpose(x, (0, 2, 1, 3))
    return tc.reshape(x, (B * L, H * dh))


def _run(w: ModelWeights, batch) -> tuple[Tensor, list[Tensor], np.ndarray, int]:
    cfg = w.config
    seqs = [_check_tokens(cfg, s) for s in batch]
    if not seqs:
        raise ModelInputError("empty batch")
    B = len(seqs)
    lengths = np.array([s.size for s in seqs])
    L = int(lengths.max())
    # right padding is exact under the causal mask: real positions never see pads
    ids = np.zeros((B, L), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :s.size] = s
    H, dh = cfg.n_heads, cfg.head_dim
    dtype = w.tok_emb.dtype

    x = tc.add(tc.take_rows(w.tok_emb, ids.reshape(-1)),
               tc.take_rows(w.pos_emb, np.tile(np.arange(L), B)))
    causal = np.where(np.tril(np.ones((L, L), dtype=bool)), 0.0, _MASK_NEG).astype(dtype)
    mask = Tensor(np.broadcast_to(causal, (B * H, L, L)).copy(), dtype=dtype)
    inv_sqrt = 1.0 / math.sqrt(dh)

    hidden = []
    for layer in w.layers:
        a = tc.layer_norm(x, layer.ln1_g, layer.ln1_b)
        q = stack_forward_rows(layer.q_stack, layer.wq, a)
        k = _linear(a, layer.wk)
        v = stack_forward_rows(layer.v_stack, layer.wv, a)
        qh, kh, vh = (_split_heads(t, B, L, H, dh) for t in (q, k, v))
        scores = tc.scale(tc.bmm(qh, tc.transpose(kh, (0, 2, 1))), inv_sqrt)
        scores = tc.add(scores, mask)
        att = tc.reshape(tc.softmax_rows(tc.reshape(scores, (B * H * L, L))), (B * H, L, L))
        ctx = _merge_heads(tc.bmm(att, vh), B, L, H, dh)
        x = tc.add(x, _linear(ctx, layer.wo))
        m = tc.layer_norm(x, layer.ln2_g, layer.ln2_b)
        ff = tc.add_bias(_linear(tc.gelu(tc.add_bias(_linear(m, layer.w1), layer.b1)), layer.w2), layer.b2)
        x = tc.add(x, ff)
        hidden.append(x)

    xf = tc.layer_norm(x, w.lnf_g, w.lnf_b)
    last = tc.take_rows(xf, np.arange(B) * L + lengths - 1)
    logits = tc.add_bias(_linear(last, w.head), w.head_b)
    return logits, hidden, lengths, L


def forward_batch(w: ModelWeights, batch) -> Tensor:
    """Logits ``[len(batch), n_outputs]`` read at each sequence's last position."""
    return _run(w, batch)[0]


def forward(w: ModelWeights, tokens) -> Tensor:
    """Logits ``[n_outputs]`` for a single token sequence."""
    logits = forward_batch(w, [tokens])
    return tc.reshape(logits, (w.config.n_outputs,))


def capture_hidden_states(w: ModelWeights, tokens) -> tuple[list[Tensor], Tensor]:
    """Per-layer post-block states ``[seq, d_model]`` plus the logits of the same pass."""
    logits, hidden, lengths, L = _run(w, [tokens])
    n = int(lengths[0])
    states = [Tensor(h.data[:n].copy(), dtype=h.dtype) for h in hidden]
    return states, tc.reshape(logits, (w.config.n_outputs,))


def capture_hidden_batch(w: ModelWeights, batch) -> tuple[list[list[np.ndarray]], np.ndarray]:
    """Batched hidden-state capture: ``states[layer][example]`` arrays, plus logits."""
    with tc.no_grad():
        logits, hidden, lengths, L = _run(w, batch)
    states = []
    for h in hidden:
        arr = h.data.reshape(len(batch), L, -1)
        states.append([arr[i, :n].copy() for i, n in enumerate(lengths)])
    return states, logits.data


def predict(w: ModelWeights, batch) -> np.ndarray:
    """Argmax over the answer vocabulary; ``np.argmax`` resolves ties to the lowest index."""
    with tc.no_grad():
        return np.argmax(forward_batch(w, batch).data, axis=1)


# ---------------------------------------------------------------------------
# task lifecycle

def _site_seed(seed: int, task_id: int, layer: int, site: int) -> int:
    return int(np.random.SeedSequence([seed, task_id, layer, site]).generate_state(1)[0])


def begin_task(w: ModelWeights, task_id: int, r: int, seed: int) -> None:
    """Freeze existing adapters and give every W_q / W_v stack a fresh one."""
    if any(not ad.frozen for _, ad in w.adapters()):
        raise AdapterStateError("begin_task called while a task is still training; call end_task first")
    dtype = w.tok_emb.dtype
    for i, layer in enumerate(w.layers):
        for j, st in enumerate((layer.q_stack, layer.v_stack)):
            st.freeze_all()
            st.append(init_adapter(st.d, st.k, r, task_id, _site_seed(seed, task_id, i, j), dtype=dtype))


def end_task(w: ModelWeights) -> None:
    for _, st in w.stacks():
        st.freeze_all()
