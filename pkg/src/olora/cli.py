"""``olora`` command line: train, eval, merge, drift and sweep.

Exit codes: 0 success, 1 configuration error (including bad flags),
2 data error, 3 numeric error.  Every file is written under ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import plotting
from .analysis import (DEFAULT_RANKS, ConfigError, DataError, average_accuracy, drift_csv,
                       hidden_state_drift, loss_drift, rank_sweep, sweep_csv, write_run_files)
from .tasks import (TaskParseError, TaskSpec, TaskValidationError, gen_synthetic_suite, load_tasks,
                    save_tasks)
from .tensor import NumericError
from .trainer import (CheckpointFormatError, TrainConfig, encode_task, evaluate, merge_and_export,
                      read_checkpoint, run_sequence, save_checkpoint)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_N_PER_TASK = 200

log = logging.getLogger("olora")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; route that to the config-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# configuration

# flag dest -> TrainConfig field for the keys whose names differ
_ALIASES = {"batch": "batch_size", "restrict": "restrict_to_options"}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_RUN_KEYS = {"synthetic", "sequence", "n_per_task", "out", "checkpoint", "ranks", "seeds", "workers",
             "save_every_task"}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
        if key not in _TRAIN_FIELDS and key not in _RUN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def _coerce(name: str, value):
    if value is None:
        return None
    if name == "lambda1_schedule":
        if isinstance(value, str):
            return [float(v) for v in value.split(",") if v.strip()]
        return [float(v) for v in value]
    if name in ("ranks", "seeds"):
        if isinstance(value, str):
            return [int(v) for v in value.split(",") if v.strip()]
        return [int(v) for v in value]
    if name == "save_every_task":
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
    if name in ("lambda1", "lr", "momentum"):
        return float(value)
    if name in ("epochs", "batch_size", "rank", "seed", "d_model", "n_layers", "n_heads",
                "max_seq_len", "synthetic", "n_per_task", "workers"):
        return int(value)
    return str(value)


def resolve_settings(args) -> dict:
    """Config-file values overlaid by explicitly given flags."""
    settings: dict = {}
    if getattr(args, "config", None):
        settings.update(parse_config_file(args.config))
        if isinstance(settings.get("checkpoint"), str):
            settings["checkpoint"] = [c.strip() for c in settings["checkpoint"].split(",") if c.strip()]
    for key, value in vars(args).items():
        if key in ("config", "command", "func", "verbose") or value is None:
            continue
        settings[_ALIASES.get(key, key)] = value
    try:
        resolved = {k: v if k == "checkpoint" else _coerce(k, v) for k, v in settings.items()}
    except ValueError as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    resolved["config"] = getattr(args, "config", None)
    return resolved


def train_config(settings: dict) -> TrainConfig:
    kw = {k: v for k, v in settings.items() if k in _TRAIN_FIELDS}
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# data and provenance

def load_data(settings: dict) -> tuple[list[TaskSpec], dict[str, bytes]]:
    """Tasks plus the raw input bytes that identify them (for the manifest hash)."""
    seq, n_syn = settings.get("sequence"), settings.get("synthetic")
    if seq and n_syn:
        raise ConfigError("give either --sequence or --synthetic, not both")
    if seq:
        tasks = load_tasks(seq)
        if not tasks:
            raise DataError(f"sequence file lists no tasks: {seq}")
        seq_path = Path(seq)
        inputs = {"sequence": seq_path.read_bytes()}
        for line in seq_path.read_text(encoding="utf-8").splitlines():
            entry = line.strip()
            if entry and not entry.startswith("#"):
                p = Path(entry) if Path(entry).is_absolute() else seq_path.parent / entry
                inputs[f"task:{entry}"] = p.read_bytes()
        return tasks, inputs
    if n_syn:
        n_per = settings.get("n_per_task", DEFAULT_N_PER_TASK)
        seed = settings.get("seed", 0)
        try:
            tasks = gen_synthetic_suite(n_syn, n_per, seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        desc = json.dumps({"synthetic": n_syn, "n_per_task": n_per, "seed": seed}, sort_keys=True)
        return tasks, {"synthetic": desc.encode()}
    raise ConfigError("no data: give --sequence FILE or --synthetic N")


@dataclass
class RunManifest:
    config_path: str | None
    config: dict
    tasks: list[str]
    out_dir: str
    input_hash: str

    @classmethod
    def build(cls, config_path, cfg: TrainConfig, tasks, out_dir, inputs: dict[str, bytes]) -> "RunManifest":
        h = hashlib.sha256()
        items = dict(inputs)
        if config_path:
            items["config_file"] = Path(config_path).read_bytes()
        items["resolved_config"] = json.dumps(cfg.to_dict(), sort_keys=True).encode()
        for key in sorted(items):
            blob = items[key]
            # git-style framing: name and length precede each blob
            h.update(f"{key}\0{len(blob)}\0".encode())
            h.update(blob)
        return cls(str(config_path) if config_path else None, cfg.to_dict(),
                   [t.name for t in tasks], str(out_dir), h.hexdigest())

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def _out_dir(settings: dict) -> Path:
    out = settings.get("out")
    if not out:
        raise ConfigError("--out is required")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _apply_checkpoint_vocab(tasks: list[TaskSpec], answer_vocab: dict[str, int] | None) -> None:
    if not answer_vocab:
        raise DataError("checkpoint carries no answer vocabulary")
    missing = sorted({lab for t in tasks for lab in t.labels} - set(answer_vocab))
    if missing:
        raise DataError(f"labels not known to the checkpoint: {missing[:5]}")
    for t in tasks:
        t.answer_vocab = answer_vocab


def _checkpoint_extra(cfg: TrainConfig, tasks_trained: int) -> dict:
    return {"train_config": cfg.to_dict(), "tasks_trained": tasks_trained}


def _restrict(ckpt) -> str:
    return ckpt.extra.get("train_config", {}).get("restrict_to_options", "eval")


# ---------------------------------------------------------------------------
# commands

def cmd_train(settings: dict) -> int:
    cfg = train_config(settings)
    tasks, inputs = load_data(settings)
    out = _out_dir(settings)
    manifest = RunManifest.build(settings.get("config"), cfg, tasks, out, inputs)
    if settings.get("synthetic"):
        save_tasks(tasks, out / "data")
    every = bool(settings.get("save_every_task"))
    res = run_sequence(tasks, cfg, keep_snapshots=every)
    answer_vocab = tasks[0].answer_vocab
    write_run_files(out, res.report)
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    save_checkpoint(res.weights, out / "model.olra", res.tokenizer, answer_vocab, res.report.train_log,
                    _checkpoint_extra(cfg, len(tasks)))
    for j, snap in enumerate(res.snapshots):
        save_checkpoint(snap, out / f"model.task{j}.olra", res.tokenizer, answer_vocab, None,
                        _checkpoint_extra(cfg, j + 1))
    plotting.plot_accuracy(res.report, out / "acc.png")
    plotting.plot_train_log(res.report.train_log, out / "train_log.png")
    print(f"AA {res.report.AA:.4f}")
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


def _single_checkpoint(settings: dict) -> str:
    ck = settings.get("checkpoint") or []
    if len(ck) != 1:
        raise ConfigError("exactly one --checkpoint is required")
    return ck[0]


def evaluate_checkpoint(path, tasks: list[TaskSpec]) -> list[float]:
    ckpt = read_checkpoint(path)
    _apply_checkpoint_vocab(tasks, ckpt.answer_vocab)
    if ckpt.tokenizer is None:
        raise DataError("checkpoint carries no tokenizer")
    restrict = _restrict(ckpt)
    accs = []
    for t in tasks:
        enc = encode_task(ckpt.tokenizer, t)
        accs.append(evaluate(ckpt.weights, enc.test_ids, enc.test_y, None if restrict == "none" else enc.test_mask))
    return accs


def cmd_eval(settings: dict) -> int:
    path = _single_checkpoint(settings)
    tasks, _ = load_data(settings)
    accs = evaluate_checkpoint(path, tasks)
    aa = average_accuracy([accs] * len(accs), len(accs))
    for t, a in zip(tasks, accs):
        print(f"{t.name}\t{a!r}")
    print(f"AA\t{aa!r}")
    if settings.get("out"):
        out = _out_dir(settings)
        rec = {"checkpoint": str(path), "tasks": [t.name for t in tasks], "acc": accs, "AA": aa}
        (out / "eval.json").write_text(json.dumps(rec, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_merge(settings: dict) -> int:
    path = _single_checkpoint(settings)
    out = _out_dir(settings)
    ckpt = read_checkpoint(path)
    merged = merge_and_export(ckpt.weights)
    dest = out / "model.merged.olra"
    save_checkpoint(merged, dest, ckpt.tokenizer, ckpt.answer_vocab, ckpt.train_log, ckpt.extra)
    print(f"{path}\t{Path(path).stat().st_size} bytes")
    print(f"{dest}\t{dest.stat().st_size} bytes")
    return EXIT_OK


def cmd_drift(settings: dict) -> int:
    ck = settings.get("checkpoint") or []
    if len(ck) != 2:
        raise ConfigError("drift needs two checkpoints: --checkpoint BEFORE --checkpoint AFTER")
    out = _out_dir(settings)
    tasks, _ = load_data(settings)
    before, after = read_checkpoint(ck[0]), read_checkpoint(ck[1])
    if before.tokenizer is None or before.tokenizer.vocab != (after.tokenizer.vocab if after.tokenizer else None):
        raise ConfigError("checkpoints do not share a tokenizer")
    if before.answer_vocab != after.answer_vocab:
        raise ConfigError("checkpoints do not share an answer vocabulary")
    _apply_checkpoint_vocab(tasks, before.answer_vocab)
    # past tasks are those the earlier checkpoint had already learned
    n_past = int(before.extra.get("tasks_trained", len(tasks)))
    past = tasks[:max(1, min(n_past, len(tasks)))]
    ids, ys, masks = [], [], []
    for t in past:
        enc = encode_task(before.tokenizer, t)
        ids += enc.test_ids
        ys.append(enc.test_y)
        masks.append(enc.test_mask)
    y = np.concatenate(ys)
    mask = None if _restrict(before) == "none" else np.concatenate(masks)
    ld = loss_drift(before.weights, after.weights, ids, y, mask)
    layers = hidden_state_drift(before.weights, after.weights, ids)
    (out / "drift.csv").write_text(drift_csv(ld, layers), encoding="utf-8")
    summary = {"past_tasks": [t.name for t in past], "n_examples": len(ids), "mean_loss_delta": ld.mean,
               "hidden_state_drift": layers}
    (out / "drift.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    plotting.plot_loss_drift(ld, out / "drift_loss.png")
    plotting.plot_hidden_drift(layers, out / "drift_hidden.png")
    print(f"mean loss delta {ld.mean:+.6f} over {len(ids)} examples")
    for i, v in enumerate(layers):
        print(f"layer {i} relative drift {v:.6f}")
    return EXIT_OK


def cmd_sweep(settings: dict) -> int:
    cfg = train_config(settings)
    out = _out_dir(settings)
    ranks = settings.get("ranks") or list(DEFAULT_RANKS)
    seeds = settings.get("seeds") or [cfg.seed]
    if settings.get("sequence"):
        tasks, _ = load_data(settings)
        suites = [tasks]
    else:
        suites = None
    workers = settings.get("workers", 1)
    if suites is None:
        # one synthetic suite per seed: each seed is a different draw ("order")
        n_syn = settings.get("synthetic") or 3
        n_per = settings.get("n_per_task", DEFAULT_N_PER_TASK)
        rows = None
        for s in seeds:
            part = rank_sweep(gen_synthetic_suite(n_syn, n_per, s), cfg, ranks, seeds=(s,), workers=workers)
            if rows is None:
                rows = part
            else:
                for r, p in zip(rows, part):
                    r.aa.extend(p.aa)
    else:
        rows = rank_sweep(suites[0], cfg, ranks, seeds=seeds, workers=workers)
    (out / "sweep.csv").write_text(sweep_csv(rows), encoding="utf-8")
    rec = [{"rank": r.rank, "aa": r.aa, "mean": r.mean, "std": r.std} for r in rows]
    (out / "sweep.json").write_text(json.dumps(rec, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    plotting.plot_sweep(rows, out / "sweep.png")
    for r in rows:
        print(f"r={r.rank}\tAA {r.mean:.4f}" + (f"\tstd {r.std:.4f}" if r.std is not None else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_common(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="flat key=value file; flags override its values")
    p.add_argument("--out", help="output directory")
    p.add_argument("--synthetic", type=int, metavar="N", help="generate an N-task synthetic suite")
    p.add_argument("--sequence", metavar="FILE", help="sequence file listing task files in order")
    p.add_argument("--n-per-task", dest="n_per_task", type=int, help="synthetic training examples per task")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    if not training:
        return
    p.add_argument("--strategy", help="olora, inc_lora, seq_lora or seq_ft")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda1-schedule", dest="lambda1_schedule", help="comma-separated per-task lambda1")
    p.add_argument("--rank", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--optimizer", choices=("sgd", "momentum", "adam"))
    p.add_argument("--momentum", type=float)
    p.add_argument("--restrict", choices=("none", "eval", "both"),
                   help="score only each prompt's listed options at evaluation or also in training")
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="olora", description="Orthogonal low-rank adaptation for continual learning.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a task sequence")
    _add_common(p)
    p.add_argument("--save-every-task", dest="save_every_task", action="store_const", const=True,
                   help="also write model.task{j}.olra after each task")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-task accuracy and AA of a checkpoint")
    _add_common(p, training=False)
    p.add_argument("--checkpoint", action="append", metavar="FILE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("merge", help="fold every adapter into the base weights")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--checkpoint", action="append", metavar="FILE")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("drift", help="loss and hidden-state drift between two checkpoints")
    _add_common(p, training=False)
    p.add_argument("--checkpoint", action="append", metavar="FILE")
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("sweep", help="average accuracy across adapter ranks")
    _add_common(p)
    p.add_argument("--ranks", help="comma-separated ranks (default 2,4,8,16)")
    p.add_argument("--seeds", help="comma-separated seeds, one run per seed")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            print("olora: error: a command is required", file=sys.stderr)
            return EXIT_CONFIG
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(resolve_settings(args))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, TaskParseError, TaskValidationError, DataError, CheckpointFormatError,
            IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
