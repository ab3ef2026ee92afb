"""Orthogonal low-rank adaptation (O-LoRA) for continual learning on a tiny numpy transformer."""

from .analysis import (RunReport, adapter_overlaps, average_accuracy, forgetting, hidden_state_drift,
                       loss_drift, rank_sweep)
from .lora import AdapterStack, LoraAdapter, init_adapter, merge_into_base, orth_penalty, total_orth_loss
from .model import ModelConfig, ModelWeights, capture_hidden_states, forward, init_model, predict
from .tasks import InstructionExample, TaskSpec, Tokenizer, gen_synthetic_suite, load_tasks, tokenize
from .tensor import NumericError, ShapeError, Tensor, backward, no_grad
from .trainer import (Strategy, TrainConfig, continual_train, load_checkpoint, merge_and_export,
                      run_sequence, save_checkpoint)

__all__ = [
    "AdapterStack", "InstructionExample", "LoraAdapter", "ModelConfig", "ModelWeights", "NumericError",
    "RunReport", "ShapeError", "Strategy", "TaskSpec", "Tensor", "Tokenizer", "TrainConfig",
    "adapter_overlaps", "average_accuracy", "backward", "capture_hidden_states", "continual_train",
    "forgetting", "forward", "gen_synthetic_suite", "hidden_state_drift", "init_adapter", "init_model",
    "load_checkpoint", "load_tasks", "loss_drift", "merge_and_export", "merge_into_base", "no_grad",
    "orth_penalty", "predict", "rank_sweep", "run_sequence", "save_checkpoint", "tokenize",
    "total_orth_loss",
]
