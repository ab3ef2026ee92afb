"""Continual training loop, baseline strategies, checkpoints and merging."""

from __future__ import annotations

import enum
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tc
from .analysis import RunReport, average_accuracy
from .lora import AdapterStateError, LoraAdapter, merge_into_base, total_orth_loss
from .model import ModelConfig, ModelWeights, Layer, begin_task, end_task, forward_batch, init_model
from .tasks import TaskSpec, Tokenizer, build_answer_vocab, build_tokenizer, format_instruction, tokenize
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"OLRA"
CHECKPOINT_VERSION = 1
MASK_NEG = -1e9


class Strategy(str, enum.Enum):
    OLORA = "olora"
    INC_LORA = "inc_lora"
    SEQ_LORA = "seq_lora"
    SEQ_FT = "seq_ft"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for s in cls:
            if key in (s.value, s.name.lower(), s.value.replace("_", "")):
                return s
        raise ValueError(f"unknown strategy {value!r}; expected one of {[s.value for s in cls]}")


@dataclass
class TrainConfig:
    lambda1: float = 0.5
    lr: float = 1e-3
    epochs: int = 1
    batch_size: int = 8
    rank: int = 4
    seed: int = 0
    strategy: Strategy = Strategy.OLORA
    # optional per-task override of lambda1, indexed by task position
    lambda1_schedule: list[float] | None = None
    # "sgd" is the default; "momentum" and "adam" are opt-in extensions
    optimizer: str = "sgd"
    # score only the answers listed in each prompt's Options line: "none", "eval" or "both"
    restrict_to_options: str = "eval"
    momentum: float = 0.9
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 64

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy)
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for name in ("epochs", "batch_size", "rank"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lambda1_schedule is not None and any(v < 0 for v in self.lambda1_schedule):
            raise ValueError("lambda1_schedule entries must be non-negative")

    def lambda_for(self, task_index: int) -> float:
        if self.strategy in (Strategy.INC_LORA, Strategy.SEQ_LORA, Strategy.SEQ_FT):
            return 0.0
        if self.lambda1_schedule:
            sched = self.lambda1_schedule
            return float(sched[min(task_index, len(sched) - 1)])
        return float(self.lambda1)

    def model_config(self, vocab_size: int, n_outputs: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, max_seq_len=self.max_seq_len, n_outputs=n_outputs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        return d


# ---------------------------------------------------------------------------
# data access

@dataclass
class EncodedTask:
    name: str
    train_ids: list[list[int]]
    train_y: np.ndarray
    train_mask: np.ndarray
    test_ids: list[list[int]]
    test_y: np.ndarray
    test_mask: np.ndarray


def option_mask(examples, answer_vocab: dict[str, int], dtype=np.float32) -> np.ndarray:
    """Additive logit mask: 0 for each example's listed options, a large negative elsewhere."""
    mask = np.full((len(examples), len(answer_vocab)), MASK_NEG, dtype=dtype)
    for i, ex in enumerate(examples):
        mask[i, [answer_vocab[o] for o in ex.options]] = 0.0
    return mask


def encode_task(tok: Tokenizer, task: TaskSpec) -> EncodedTask:
    vocab = task.answer_vocab

    def enc(examples):
        ids = [tokenize(tok, format_instruction(ex)) for ex in examples]
        y = np.array([vocab[ex.answer] for ex in examples], dtype=np.int64)
        return ids, y, option_mask(examples, vocab)

    return EncodedTask(task.name, *enc(task.examples_train), *enc(task.examples_test))


class DataProvider:
    """Hands out training batches and test sets, optionally logging every access.

    Trace entries are ``(split, task_index, example_index)``.
    """

    def __init__(self, encoded: list[EncodedTask], trace: bool = False):
        self.encoded = encoded
        self.trace: list[tuple[str, int, int]] | None = [] if trace else None

    def __len__(self) -> int:
        return len(self.encoded)

    def n_train(self, task_index: int) -> int:
        return len(self.encoded[task_index].train_ids)

    def train_batch(self, task_index: int, indices: np.ndarray):
        enc = self.encoded[task_index]
        if self.trace is not None:
            self.trace.extend(("train", task_index, int(i)) for i in indices)
        return [enc.train_ids[i] for i in indices], enc.train_y[indices], enc.train_mask[indices]

    def test_set(self, task_index: int):
        enc = self.encoded[task_index]
        if self.trace is not None:
            self.trace.extend(("test", task_index, i) for i in range(len(enc.test_ids)))
        return enc.test_ids, enc.test_y, enc.test_mask


# ---------------------------------------------------------------------------
# optimisation

class Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state: dict[int, tuple] = {}
        self.t = 0

    def step(self, params: list[tuple[str, Tensor]]) -> None:
        cfg = self.cfg
        self.t += 1
        for _, p in params:
            g = p.grad
            if g is None:
                continue
            if cfg.optimizer == "sgd":
                upd = g
            elif cfg.optimizer == "momentum":
                v = self.state.get(id(p), (np.zeros_like(p.data),))[0]
                v = cfg.momentum * v + g
                self.state[id(p)] = (v,)
                upd = v
            else:
                m, v = self.state.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                self.state[id(p)] = (m, v)
                upd = (m / (1 - 0.9 ** self.t)) / (np.sqrt(v / (1 - 0.999 ** self.t)) + 1e-8)
            p.data = (p.data - cfg.lr * upd).astype(p.dtype)
            p.grad = None


def objective(weights: ModelWeights, batch_ids, batch_y, lambda1: float,
              mask: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, nll, orth)`` where ``total = nll + lambda1 * orth``.

    ``orth`` sums the penalty over every adapter stack that has a live adapter.
    ``mask`` is an optional additive logit mask (see :func:`option_mask`).
    """
    logits = forward_batch(weights, batch_ids)
    if mask is not None:
        logits = tc.add(logits, Tensor(mask, dtype=logits.dtype))
    nll = tc.cross_entropy(logits, batch_y)
    dtype = nll.dtype
    orth = Tensor(np.zeros((), dtype=dtype), dtype=dtype)
    for _, st in weights.stacks():
        if st.trainable() and st.frozen():
            orth = tc.add(orth, total_orth_loss(st))
    total = tc.add(nll, tc.scale(orth, lambda1)) if lambda1 else nll
    return total, nll, orth


@dataclass
class EpochLog:
    task_id: int
    epoch: int
    nll: float
    orth_loss: float
    total: float


@dataclass
class BatchLog:
    task_id: int
    epoch: int
    step: int
    nll: float
    orth_loss: float
    total: float


def train_task(weights: ModelWeights, provider: DataProvider, task_index: int, cfg: TrainConfig,
               task_id: int | None = None,
               step_hook: Callable[[ModelWeights, BatchLog], None] | None = None) -> list[EpochLog]:
    """Mini-batch descent on ``nll + lambda1 * orth`` over the live parameters only."""
    params = weights.trainable_params()
    if not params:
        raise AdapterStateError("no trainable parameters: call begin_task first")
    task_id = task_index if task_id is None else task_id
    lam = cfg.lambda_for(task_index)
    opt = Optimizer(cfg)
    n = provider.n_train(task_index)
    logs = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, task_index, epoch])
        order = rng.permutation(n)
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ids, y, mask = provider.train_batch(task_index, idx)
            try:
                # overflow surfaces as NumericError below; numpy's warning adds nothing
                with np.errstate(over="ignore", invalid="ignore"):
                    total, nll, orth = objective(weights, ids, y, lam,
                                                 mask if cfg.restrict_to_options == "both" else None)
            except NumericError as exc:
                raise NumericError(f"non-finite loss at task {task_id}, epoch {epoch}, step {step}: {exc}") from exc
            tc.backward(total)
            opt.step(params)
            rec = BatchLog(task_id, epoch, step, nll.item(), orth.item(), total.item())
            if not np.isfinite(rec.total):
                raise NumericError(f"non-finite loss at task {task_id}, epoch {epoch}, step {step}")
            sums += (rec.nll, rec.orth_loss, rec.total)
            n_batches += 1
            step += 1
            if step_hook is not None:
                step_hook(weights, rec)
        mean = sums / max(n_batches, 1)
        logs.append(EpochLog(task_id, epoch, *map(float, mean)))
        log.debug("task %d epoch %d nll %.4f orth %.3g", task_id, epoch, mean[0], mean[1])
    return logs


def predictions(weights: ModelWeights, ids, mask: np.ndarray | None = None, batch_size: int = 64) -> np.ndarray:
    """Argmax labels; with ``mask``, only each example's listed options compete."""
    out = []
    with tc.no_grad():
        for i in range(0, len(ids), batch_size):
            z = forward_batch(weights, ids[i:i + batch_size]).data
            if mask is not None:
                z = z + mask[i:i + batch_size]
            out.append(np.argmax(z, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(weights: ModelWeights, ids, y, mask: np.ndarray | None = None, batch_size: int = 64) -> float:
    if len(ids) == 0:
        return 0.0
    return float(np.mean(predictions(weights, ids, mask, batch_size) == np.asarray(y)))


def current_orth_loss(weights: ModelWeights) -> float:
    """Unweighted orthogonality loss summed over stacks with a live adapter."""
    total = 0.0
    with tc.no_grad():
        for _, st in weights.stacks():
            if st.trainable() and st.frozen():
                total += total_orth_loss(st).item()
    return total


def frozen_state_hash(weights: ModelWeights) -> str:
    """SHA-256 over base weights (unless trainable) and every frozen adapter."""
    h = hashlib.sha256()
    if not weights.base_trainable:
        for name, p in weights.base_params():
            h.update(name.encode())
            h.update(p.data.tobytes())
    for name, ad in weights.adapters():
        if ad.frozen:
            h.update(f"{name}.{ad.task_id}".encode())
            h.update(ad.A.data.tobytes())
            h.update(ad.B.data.tobytes())
    return h.hexdigest()


@dataclass
class RunResult:
    report: RunReport
    weights: ModelWeights
    tokenizer: Tokenizer
    encoded: list[EncodedTask]
    provider: DataProvider
    snapshots: list[ModelWeights] = field(default_factory=list)


def run_sequence(tasks: list[TaskSpec], cfg: TrainConfig, tokenizer: Tokenizer | None = None,
                 weights: ModelWeights | None = None, trace: bool = False,
                 keep_snapshots: bool = False,
                 step_hook: Callable[[ModelWeights, BatchLog], None] | None = None) -> RunResult:
    """Train ``tasks`` in order, evaluating every seen task after each one.

    Only the current task's training split is ever handed to :func:`train_task`.
    """
    if not tasks:
        raise ValueError("continual training needs at least one task")
    if not tasks[0].answer_vocab:
        build_answer_vocab(tasks)
    answer_vocab = tasks[0].answer_vocab
    tok = tokenizer or build_tokenizer(tasks, max_len=cfg.max_seq_len)
    if weights is None:
        weights = init_model(cfg.model_config(len(tok), len(answer_vocab)), cfg.seed)
    encoded = [encode_task(tok, t) for t in tasks]
    provider = DataProvider(encoded, trace=trace)

    acc: list[list[float]] = []
    train_log: list[EpochLog] = []
    orth_trace: list[list[float]] = []
    snapshots = []
    for t in range(len(tasks)):
        if cfg.strategy in (Strategy.OLORA, Strategy.INC_LORA):
            begin_task(weights, t, cfg.rank, cfg.seed)
        elif cfg.strategy is Strategy.SEQ_LORA:
            if t == 0:
                begin_task(weights, 0, cfg.rank, cfg.seed)
        else:
            weights.set_base_trainable(True)
        epoch_logs = train_task(weights, provider, t, cfg, task_id=t, step_hook=step_hook)
        train_log += epoch_logs
        orth_trace.append([e.orth_loss for e in epoch_logs] + [current_orth_loss(weights)])
        if cfg.strategy is not Strategy.SEQ_LORA or t == len(tasks) - 1:
            end_task(weights)
        if cfg.strategy is Strategy.SEQ_FT:
            weights.set_base_trainable(False)
        row = []
        for i in range(t + 1):
            ids, y, mask = provider.test_set(i)
            row.append(evaluate(weights, ids, y, None if cfg.restrict_to_options == "none" else mask))
        acc.append(row)
        log.info("task %d (%s) done: acc %s", t, tasks[t].name, [round(a, 3) for a in row])
        if keep_snapshots:
            snapshots.append(weights.copy())

    report = RunReport(
        acc=acc,
        AA=average_accuracy(acc, len(tasks)),
        task_names=[t.name for t in tasks],
        orth_trace=orth_trace,
        final_orth_loss=orth_trace[-1][-1],
        train_log=[asdict(e) for e in train_log],
        config=cfg.to_dict(),
    )
    return RunResult(report, weights, tok, encoded, provider, snapshots)


def continual_train(tasks: list[TaskSpec], cfg: TrainConfig, **kwargs) -> RunReport:
    return run_sequence(tasks, cfg, **kwargs).report


# ---------------------------------------------------------------------------
# merging

def merge_and_export(weights: ModelWeights) -> ModelWeights:
    """Copy of ``weights`` with every adapter folded into W_q / W_v and stacks emptied."""
    if any(not ad.frozen for _, ad in weights.adapters()):
        raise AdapterStateError("cannot merge while an adapter is still trainable")
    out = weights.copy()
    for layer in out.layers:
        layer.wq = merge_into_base(layer.q_stack, layer.wq)
        layer.wv = merge_into_base(layer.v_stack, layer.wv)
        layer.q_stack.clear()
        layer.v_stack.clear()
    return out


# ---------------------------------------------------------------------------
# checkpoints

class CheckpointFormatError(ValueError):
    pass


def _pack_bytes(buf: io.BytesIO, name: str, payload: bytes) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)


def _pack_array(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def _unpack_array(payload: bytes) -> np.ndarray:
    try:
        (ndim,) = struct.unpack_from("<I", payload, 0)
        shape = struct.unpack_from(f"<{ndim}I", payload, 4)
    except struct.error:
        raise CheckpointFormatError("truncated tensor header") from None
    off = 4 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(payload) - off != 4 * count:
        raise CheckpointFormatError("tensor payload size does not match its shape")
    return np.frombuffer(payload, dtype="<f4", offset=off).reshape(shape).astype(np.float32)


def checkpoint_bytes(weights: ModelWeights, tokenizer: Tokenizer | None = None,
                     answer_vocab: dict[str, int] | None = None,
                     train_log: list | None = None, extra: dict | None = None) -> bytes:
    cfg = weights.config
    meta = {
        "model_config": asdict(cfg),
        "tokenizer": {"vocab": tokenizer.vocab, "max_len": tokenizer.max_len} if tokenizer else None,
        "answer_vocab": answer_vocab,
        "adapters": [{"site": name, "task_id": ad.task_id, "frozen": ad.frozen, "rank": ad.rank}
                     for name, ad in weights.adapters()],
        "train_log": train_log or [],
        "extra": extra or {},
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _pack_bytes(buf, "meta", json.dumps(meta, sort_keys=True).encode("utf-8"))
    for name, p in weights.base_params():
        _pack_bytes(buf, "t:" + name, _pack_array(p.data))
    for name, ad in weights.adapters():
        _pack_bytes(buf, f"t:{name}.{ad.task_id}.A", _pack_array(ad.A.data))
        _pack_bytes(buf, f"t:{name}.{ad.task_id}.B", _pack_array(ad.B.data))
    _pack_bytes(buf, "end", b"")
    return buf.getvalue()


def save_checkpoint(weights: ModelWeights, path: str | Path, tokenizer: Tokenizer | None = None,
                    answer_vocab: dict[str, int] | None = None, train_log: list | None = None,
                    extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(weights, tokenizer, answer_vocab, train_log, extra))


@dataclass
class Checkpoint:
    weights: ModelWeights
    tokenizer: Tokenizer | None
    answer_vocab: dict[str, int] | None
    train_log: list
    extra: dict


def _read_sections(blob: bytes) -> dict[str, bytes]:
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not an OLRA checkpoint (bad magic bytes)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    off = 8
    sections: dict[str, bytes] = {}
    while True:
        try:
            (nlen,) = struct.unpack_from("<I", blob, off)
            name = blob[off + 4:off + 4 + nlen].decode("utf-8")
            (plen,) = struct.unpack_from("<Q", blob, off + 4 + nlen)
        except (struct.error, UnicodeDecodeError):
            raise CheckpointFormatError("truncated checkpoint") from None
        start = off + 12 + nlen
        if start + plen > len(blob):
            raise CheckpointFormatError("truncated checkpoint")
        if name == "end":
            if start + plen != len(blob):
                raise CheckpointFormatError("trailing bytes after end section")
            return sections
        sections[name] = blob[start:start + plen]
        off = start + plen


def read_checkpoint(path: str | Path) -> Checkpoint:
    sections = _read_sections(Path(path).read_bytes())
    try:
        meta = json.loads(sections["meta"].decode("utf-8"))
        cfg = ModelConfig(**meta["model_config"])
        weights = init_model(cfg, seed=0)

        def arr(name):
            return Tensor(_unpack_array(sections["t:" + name]))

        for name in ModelWeights.GLOBAL:
            setattr(weights, name, arr(name))
        for i, layer in enumerate(weights.layers):
            for n in Layer.BASE:
                setattr(layer, n, arr(f"layers.{i}.{n}"))
        stacks = dict(weights.stacks())
        for rec in meta["adapters"]:
            key = f"{rec['site']}.{rec['task_id']}"
            ad = LoraAdapter(arr(key + ".A"), arr(key + ".B"), rec["task_id"], frozen=rec["frozen"])
            stacks[rec["site"]].adapters.append(ad)
    except KeyError as exc:
        raise CheckpointFormatError(f"checkpoint missing section or field {exc}") from None
    tok_meta = meta.get("tokenizer")
    tok = Tokenizer(tok_meta["vocab"], tok_meta["max_len"]) if tok_meta else None
    return Checkpoint(weights, tok, meta.get("answer_vocab"), meta.get("train_log", []), meta.get("extra", {}))


def load_checkpoint(path: str | Path) -> ModelWeights:
    return read_checkpoint(path).weights
