"""Instruction records, tokenization, task-file I/O and synthetic task suites."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD = "<pad>"
UNK = "<unk>"
TEMPLATE_TOKENS = ("definition:", "options:", "|", "text:", "answer:")


class TaskParseError(ValueError):
    """Malformed task or sequence file line."""


class TaskValidationError(ValueError):
    """A record parsed but violates the instruction schema."""


@dataclass(frozen=True)
class InstructionExample:
    task_definition: str
    options: tuple[str, ...]
    text: str
    answer: str

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))

    def validate(self) -> None:
        if not self.options:
            raise TaskValidationError("field 'options' must be non-empty")
        if len(set(self.options)) != len(self.options):
            raise TaskValidationError("field 'options' contains duplicates")
        if self.answer not in self.options:
            raise TaskValidationError(
                f"field 'answer': {self.answer!r} is not one of the options {list(self.options)}")

    def to_record(self) -> dict:
        return {"task_definition": self.task_definition, "options": list(self.options),
                "text": self.text, "answer": self.answer}


@dataclass
class TaskSpec:
    name: str
    examples_train: list[InstructionExample]
    examples_test: list[InstructionExample]
    answer_vocab: dict[str, int] = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        seen: dict[str, None] = {}
        for ex in self.examples_train + self.examples_test:
            for o in ex.options:
                seen.setdefault(o)
        return list(seen)


def format_instruction(ex: InstructionExample) -> str:
    """Render the prompt; the answer itself is the supervision target and is left out."""
    ex.validate()
    return (f"Definition: {ex.task_definition}\n"
            f"Options: {' | '.join(ex.options)}\n"
            f"Text: {ex.text}\n"
            "Answer:")


# ---------------------------------------------------------------------------
# tokenizer

def _words(s: str) -> list[str]:
    return s.lower().split()


@dataclass
class Tokenizer:
    vocab: dict[str, int]
    max_len: int = 64

    @classmethod
    def build(cls, texts, max_len: int = 64) -> "Tokenizer":
        vocab = {PAD: 0, UNK: 1}
        for w in TEMPLATE_TOKENS:
            vocab.setdefault(w, len(vocab))
        for s in texts:
            for w in _words(s):
                vocab.setdefault(w, len(vocab))
        return cls(vocab, max_len)

    @property
    def unk_index(self) -> int:
        return self.vocab[UNK]

    @property
    def pad_index(self) -> int:
        return self.vocab[PAD]

    def __len__(self) -> int:
        return len(self.vocab)

    def decode(self, ids) -> list[str]:
        inv = {i: w for w, i in self.vocab.items()}
        return [inv[int(i)] for i in ids]


def tokenize(tok: Tokenizer, s: str, max_len: int | None = None) -> list[int]:
    """Whitespace split, lowercase, map OOV to ``<unk>``; keep the trailing window."""
    limit = tok.max_len if max_len is None else max_len
    unk = tok.unk_index
    ids = [tok.vocab.get(w, unk) for w in _words(s)]
    return ids[-limit:] if len(ids) > limit else ids


def build_answer_vocab(tasks: list[TaskSpec]) -> dict[str, int]:
    """Union of every task's options in first-seen order; assigned to each task in place."""
    vocab: dict[str, int] = {}
    for t in tasks:
        for lab in t.labels:
            vocab.setdefault(lab, len(vocab))
    for t in tasks:
        t.answer_vocab = vocab
    return vocab


def build_tokenizer(tasks: list[TaskSpec], max_len: int = 64) -> Tokenizer:
    texts = (format_instruction(ex) for t in tasks for ex in t.examples_train + t.examples_test)
    return Tokenizer.build(texts, max_len=max_len)


# ---------------------------------------------------------------------------
# file I/O

_REQUIRED = ("task_definition", "options", "text", "answer")


def _parse_line(line: str, lineno: int, path: Path) -> tuple[InstructionExample, str]:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TaskParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise TaskParseError(f"{path}:{lineno}: expected a JSON object")
    for key in _REQUIRED:
        if key not in rec:
            raise TaskParseError(f"{path}:{lineno}: missing field '{key}'")
    opts = rec["options"]
    if not isinstance(opts, list) or not all(isinstance(o, str) for o in opts):
        raise TaskValidationError(f"{path}:{lineno}: field 'options' must be a list of strings")
    for key in ("task_definition", "text", "answer"):
        if not isinstance(rec[key], str):
            raise TaskValidationError(f"{path}:{lineno}: field '{key}' must be a string")
    split = rec.get("split", "train")
    if split not in ("train", "test"):
        raise TaskValidationError(f"{path}:{lineno}: field 'split' must be 'train' or 'test'")
    ex = InstructionExample(rec["task_definition"], tuple(opts), rec["text"], rec["answer"])
    try:
        ex.validate()
    except TaskValidationError as exc:
        raise TaskValidationError(f"{path}:{lineno}: {exc}") from None
    return ex, split


def load_task_file(path: str | Path, name: str | None = None) -> TaskSpec:
    path = Path(path)
    train, test = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            ex, split = _parse_line(line, lineno, path)
            (test if split == "test" else train).append(ex)
    if train and not test:
        # no explicit split: hold out every fifth record
        test = train[4::5]
        train = [ex for i, ex in enumerate(train) if i % 5 != 4]
    seen = set(train)
    if any(ex in seen for ex in test):
        raise TaskValidationError(f"{path}: train and test splits share records")
    return TaskSpec(name or path.stem, train, test)


def load_tasks(path: str | Path) -> list[TaskSpec]:
    """Read a sequence file (one task-file path per line, training order)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"sequence file not found: {path}")
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            entry = line.strip()
            if not entry or entry.startswith("#"):
                continue
            task_path = Path(entry)
            if not task_path.is_absolute():
                task_path = path.parent / task_path
            if not task_path.is_file():
                raise TaskParseError(f"{path}:{lineno}: task file not found: {task_path}")
            tasks.append(load_task_file(task_path))
    if tasks:
        build_answer_vocab(tasks)
    return tasks


def _dump_record(ex: InstructionExample, split: str) -> str:
    rec = ex.to_record()
    rec["split"] = split
    return json.dumps(rec, ensure_ascii=False, separators=(", ", ": "))


def save_task_file(task: TaskSpec, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in task.examples_train:
            fh.write(_dump_record(ex, "train") + "\n")
        for ex in task.examples_test:
            fh.write(_dump_record(ex, "test") + "\n")


def save_tasks(tasks: list[TaskSpec], directory: str | Path) -> Path:
    """Write one file per task plus ``sequence.txt``; returns the sequence file path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for t in tasks:
        fname = f"{t.name}.jsonl"
        save_task_file(t, directory / fname)
        names.append(fname)
    seq = directory / "sequence.txt"
    seq.write_text("".join(n + "\n" for n in names), encoding="utf-8")
    return seq


# ---------------------------------------------------------------------------
# synthetic suite

FILLER = ("the", "a", "of", "and", "to", "in", "is", "it", "that", "was",
          "for", "on", "are", "with", "as", "at", "be", "this", "have", "from")


def _marker_names(t: int) -> tuple[str, str]:
    return f"mk{2 * t}", f"mk{2 * t + 1}"


def _label_names(t: int) -> tuple[str, str]:
    return f"lab{t}x", f"lab{t}y"


def gen_synthetic_suite(n_tasks: int, n_per_task: int, seed: int,
                        text_len: tuple[int, int] = (10, 16)) -> list[TaskSpec]:
    """Marker-counting classification tasks over a shared filler vocabulary.

    Task ``t`` owns two marker words and two labels.  An example's answer is
    the first label when the first marker occurs more often than the second.
    Every text also carries markers belonging to the other tasks at random,
    so all tasks see overlapping inputs but only their own markers matter.
    Test sets hold ``max(n_per_task // 2, 1)`` examples disjoint from train.
    """
    if n_tasks < 2:
        raise ValueError(f"n_tasks must be >= 2, got {n_tasks}")
    if n_per_task < 1:
        raise ValueError(f"n_per_task must be >= 1, got {n_per_task}")
    rng = np.random.default_rng(seed)
    all_markers = [m for t in range(n_tasks) for m in _marker_names(t)]
    n_test = max(n_per_task // 2, 1)
    tasks = []
    for t in range(n_tasks):
        ma, mb = _marker_names(t)
        la, lb = _label_names(t)
        others = [m for m in all_markers if m not in (ma, mb)]
        definition = f"which of {ma} or {mb} occurs more often"
        seen: set[str] = set()
        examples: list[InstructionExample] = []
        attempts = 0
        while len(examples) < n_per_task + n_test:
            attempts += 1
            if attempts > 100 * (n_per_task + n_test):
                raise RuntimeError("could not draw enough distinct synthetic examples")
            length = int(rng.integers(text_len[0], text_len[1] + 1))
            lo, hi = sorted(rng.choice(np.arange(0, 5), size=2, replace=False))
            first_wins = bool(rng.integers(0, 2))
            ca, cb = (hi, lo) if first_wins else (lo, hi)
            n_other = int(rng.integers(0, 4)) if others else 0
            words = [ma] * int(ca) + [mb] * int(cb)
            words += [others[i] for i in rng.integers(0, len(others), size=n_other)] if n_other else []
            n_fill = max(length - len(words), 0)
            words += [FILLER[i] for i in rng.integers(0, len(FILLER), size=n_fill)]
            order = rng.permutation(len(words))
            text = " ".join(words[i] for i in order)
            if text in seen:
                continue
            seen.add(text)
            examples.append(InstructionExample(definition, (la, lb), text, la if ca > cb else lb))
        tasks.append(TaskSpec(f"task{t}", examples[:n_per_task], examples[n_per_task:]))
    build_answer_vocab(tasks)
    return tasks
