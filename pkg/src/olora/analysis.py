"""Accuracy metrics, past-task drift diagnostics, rank sweeps and report files."""

from __future__ import annotations

import csv
import io
import json
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelWeights, capture_hidden_batch, forward_batch
from .tensor import no_grad

DRIFT_BIN_WIDTH = 0.1
DRIFT_RANGE = (-2.0, 2.0)
DEFAULT_RANKS = (2, 4, 8, 16)


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def average_accuracy(acc, T: int) -> float:
    """Mean accuracy over all ``T`` tasks after training the last one.

    ``acc[j][i]`` is the test accuracy on task ``i`` after training task ``j``
    (rows are ragged: row ``j`` has ``j + 1`` entries).  The mean is computed
    with exact rational arithmetic, so it is correctly rounded and independent
    of task order.
    """
    if T < 1 or len(acc) < T:
        raise DataError(f"accuracy matrix has {len(acc)} rows, need {T}")
    final = list(acc[T - 1])
    if len(final) < T or any(v is None for v in final[:T]):
        raise DataError(f"missing entries in accuracy row {T}")
    return float(statistics.mean(final[:T]))


def forgetting(acc) -> list[float]:
    """Per-task ``max_j a_ij - a_iT`` for every task but the last (extension metric)."""
    T = len(acc)
    return [max(acc[j][i] for j in range(i, T)) - acc[T - 1][i] for i in range(T - 1)]


@dataclass
class RunReport:
    acc: list[list[float]]
    AA: float
    task_names: list[str] = field(default_factory=list)
    orth_trace: list[list[float]] = field(default_factory=list)
    final_orth_loss: float = 0.0
    train_log: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    drift: dict | None = None

    def __post_init__(self):
        for row in self.acc:
            for v in row:
                if not 0.0 <= v <= 1.0:
                    raise DataError(f"accuracy {v} outside [0, 1]")

    @property
    def T(self) -> int:
        return len(self.acc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["forgetting"] = forgetting(self.acc) if self.T > 1 else []
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# drift diagnostics

def _check_compatible(a: ModelWeights, b: ModelWeights) -> None:
    ca, cb = a.config, b.config
    if (ca.vocab_size, ca.n_outputs) != (cb.vocab_size, cb.n_outputs):
        raise ConfigError("models disagree on vocabulary or answer head size")


def per_example_loss(weights: ModelWeights, ids, y, mask=None, batch_size: int = 64) -> np.ndarray:
    """Cross-entropy of every example; ``mask`` is an optional additive logit mask."""
    out = []
    y = np.asarray(y)
    with no_grad():
        for s in range(0, len(ids), batch_size):
            z = forward_batch(weights, ids[s:s + batch_size]).data.astype(np.float64)
            if mask is not None:
                z = z + np.asarray(mask[s:s + batch_size], dtype=np.float64)
            z = z - z.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            out.append(-logp[np.arange(len(z)), y[s:s + batch_size]])
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class LossDrift:
    deltas: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray  # [underflow, 40 bins..., overflow]

    @property
    def mean(self) -> float:
        return float(self.deltas.mean()) if self.deltas.size else 0.0


def drift_histogram(deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = DRIFT_RANGE
    n_bins = int(round((hi - lo) / DRIFT_BIN_WIDTH))
    edges = lo + DRIFT_BIN_WIDTH * np.arange(n_bins + 1)
    # integer binning avoids floating-edge surprises: bin k covers [lo + k w, lo + (k+1) w)
    k = np.floor((np.asarray(deltas, dtype=np.float64) - lo) / DRIFT_BIN_WIDTH).astype(np.int64)
    k = np.clip(k + 1, 0, n_bins + 1)
    counts = np.bincount(k, minlength=n_bins + 2)
    return edges, counts


def loss_drift(model_before: ModelWeights, model_after: ModelWeights, past_ids, past_y,
               mask=None) -> LossDrift:
    """Per-example change in loss on past-task examples, with a fixed-width histogram."""
    _check_compatible(model_before, model_after)
    deltas = (per_example_loss(model_after, past_ids, past_y, mask)
              - per_example_loss(model_before, past_ids, past_y, mask))
    edges, counts = drift_histogram(deltas)
    return LossDrift(deltas, edges, counts)


def hidden_state_drift(model_before: ModelWeights, model_after: ModelWeights, past_ids,
                       batch_size: int = 64) -> list[float]:
    """Per-layer mean of ``||h_after - h_before||_2 / ||h_before||_2`` over examples."""
    _check_compatible(model_before, model_after)
    if model_before.config.n_layers != model_after.config.n_layers:
        raise ConfigError("models have different layer counts")
    L = model_before.config.n_layers
    sums = np.zeros(L)
    n = 0
    for s in range(0, len(past_ids), batch_size):
        chunk = past_ids[s:s + batch_size]
        hb, _ = capture_hidden_batch(model_before, chunk)
        ha, _ = capture_hidden_batch(model_after, chunk)
        for layer in range(L):
            for before, after in zip(hb[layer], ha[layer]):
                b = before.astype(np.float64)
                sums[layer] += np.linalg.norm(after.astype(np.float64) - b) / np.linalg.norm(b)
        n += len(chunk)
    return [float(v) for v in sums / max(n, 1)]


def adapter_overlaps(weights: ModelWeights) -> list[dict]:
    """``||A_i^T A_t||_F`` for every ordered pair of adapters within each stack."""
    rows = []
    for site, st in weights.stacks():
        ads = list(st)
        for t in range(len(ads)):
            for i in range(t):
                g = ads[i].A.data.astype(np.float64).T @ ads[t].A.data.astype(np.float64)
                rows.append({"site": site, "task_i": ads[i].task_id, "task_t": ads[t].task_id,
                             "rank_i": ads[i].rank, "rank_t": ads[t].rank,
                             "frob": float(np.linalg.norm(g))})
    return rows


# ---------------------------------------------------------------------------
# rank sweep

@dataclass
class SweepRow:
    rank: int
    aa: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.aa))

    @property
    def std(self) -> float | None:
        return float(np.std(self.aa)) if len(self.aa) > 1 else None


def rank_sweep(suite, cfg_base, ranks=DEFAULT_RANKS, seeds=(0,), workers: int = 1) -> list[SweepRow]:
    """AA of ``continual_train`` for every rank and seed; rows follow ``ranks`` order."""
    from dataclasses import replace

    from .trainer import continual_train

    ranks = list(ranks)
    if not ranks:
        raise ValueError("ranks must be non-empty")
    jobs = [(r, s) for r in ranks for s in seeds]

    def run(job):
        r, s = job
        return continual_train(suite, replace(cfg_base, rank=r, seed=s)).AA

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    per = len(seeds)
    return [SweepRow(r, results[i * per:(i + 1) * per]) for i, r in enumerate(ranks)]


# ---------------------------------------------------------------------------
# file output

def acc_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    T = report.T
    names = report.task_names or [f"task{i}" for i in range(T)]
    w.writerow(["after_task"] + names)
    for j, row in enumerate(report.acc):
        w.writerow([names[j]] + [repr(v) for v in row] + [""] * (T - len(row)))
    w.writerow(["AA", repr(report.AA)] + [""] * (T - 1))
    return buf.getvalue()


def train_log_csv(train_log: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_id", "epoch", "nll", "orth_loss", "total"])
    for rec in train_log:
        w.writerow([rec["task_id"], rec["epoch"], repr(rec["nll"]), repr(rec["orth_loss"]), repr(rec["total"])])
    return buf.getvalue()


def drift_csv(loss: LossDrift | None, layers: list[float] | None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if loss is not None:
        w.writerow(["bin_lo", "bin_hi", "count"])
        edges = loss.bin_edges
        w.writerow(["-inf", repr(float(edges[0])), int(loss.counts[0])])
        for k in range(len(edges) - 1):
            w.writerow([repr(round(float(edges[k]), 10)), repr(round(float(edges[k + 1]), 10)), int(loss.counts[k + 1])])
        w.writerow([repr(float(edges[-1])), "inf", int(loss.counts[-1])])
    if layers is not None:
        w.writerow(["layer", "relative_l2_drift"])
        for i, v in enumerate(layers):
            w.writerow([i, repr(v)])
    return buf.getvalue()


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = len(rows[0].aa) if rows else 0
    with_std = n > 1
    w.writerow(["rank"] + [f"order{i + 1}" for i in range(n)] + ["avg"] + (["std"] if with_std else []))
    for r in rows:
        w.writerow([r.rank] + [repr(v) for v in r.aa] + [repr(r.mean)] + ([repr(r.std)] if with_std else []))
    return buf.getvalue()


def write_run_files(out_dir: str | Path, report: RunReport) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "acc": out / "acc.csv", "train_log": out / "train_log.csv"}
    paths["report"].write_text(report.to_json(), encoding="utf-8")
    paths["acc"].write_text(acc_csv(report), encoding="utf-8")
    paths["train_log"].write_text(train_log_csv(report.train_log), encoding="utf-8")
    return paths
