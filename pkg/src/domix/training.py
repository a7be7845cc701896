"""The two training stages and their shared machinery.

Stage 1 pre-trains one adapter set per domain corpus with masked-token
prediction against a frozen base model; independent runs share no mutable
state, so different domains can train on different threads or processes at
the same time. Stage 2 fine-tunes a composed adapter set plus the
classifier head on a labeled end task under a freeze configuration.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .adapter import LoRAAdapter
from .bridge import ComposedAdapter, FreezeConfig, apply_freeze
from .data import CLS_ID, MASK_ID, PAD_ID, FIRST_REGULAR_ID, DomainCorpus, LabeledDataset, pad_batch
from .errors import ContractError
from .model import ToyTransformer
from .optim import AdamW, lr_at
from .tensor import GradTape, backward


@dataclass
class MaskingPolicy:
    """Which positions get hidden and what replaces them.

    Selected positions split into mask-token / random-token / kept per the
    three fractions (0.8/0.1/0.1 by default). A sequence where the draw
    selects nothing is re-drawn once, then one random position is forced,
    so the masked set is never empty.
    """

    mask_prob: float = 0.15
    replace_mask_frac: float = 0.8
    replace_random_frac: float = 0.1
    keep_frac: float = 0.1
    mask_token_id: int = MASK_ID
    seed: int = 0

    def __post_init__(self):
        total = self.replace_mask_frac + self.replace_random_frac + self.keep_frac
        if abs(total - 1.0) > 1e-9:
            raise ContractError(f"masking fractions must sum to 1, got {total}")
        if not 0.0 < self.mask_prob <= 1.0:
            raise ContractError(f"mask_prob must be in (0, 1], got {self.mask_prob}")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 64
    num_steps: int | None = None
    num_epochs: int | None = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    lr_schedule: str = "linear"  # or "constant"
    warmup_steps: int = 100
    seed: int = 0
    max_seq_len: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.num_steps is None and self.num_epochs is None:
            raise ContractError("set num_steps or num_epochs")

    def total_steps(self, dataset_size: int) -> int:
        if self.num_steps is not None:
            return self.num_steps
        per_epoch = max(1, int(np.ceil(dataset_size / self.batch_size)))
        return per_epoch * self.num_epochs


def mask_batch(
    batch: np.ndarray, policy: MaskingPolicy, rng: np.random.Generator | None = None, vocab_size: int | None = None
) -> tuple[np.ndarray, np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Apply the masking policy to an id batch.

    Returns (masked_batch, original targets at selected positions,
    (rows, cols) of those positions). PAD and CLS positions are never
    selected. Random replacements draw from the regular-token range.
    """
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ContractError("mask_batch: empty batch")
    rng = rng if rng is not None else T.make_rng(policy.seed)
    if vocab_size is None:
        vocab_size = int(batch.max()) + 1
    maskable = (batch != PAD_ID) & (batch != CLS_ID)

    selected = maskable & (rng.random(batch.shape) < policy.mask_prob)
    for i in range(batch.shape[0]):
        if not maskable[i].any():
            continue
        if not selected[i].any():  # re-draw once, then force one position
            selected[i] = maskable[i] & (rng.random(batch.shape[1]) < policy.mask_prob)
        if not selected[i].any():
            choices = np.flatnonzero(maskable[i])
            selected[i, choices[rng.integers(len(choices))]] = True

    rows, cols = np.nonzero(selected)
    targets = batch[rows, cols].copy()
    masked = batch.copy()
    u = rng.random(len(rows))
    to_mask = u < policy.replace_mask_frac
    to_random = (~to_mask) & (u < policy.replace_mask_frac + policy.replace_random_frac)
    masked[rows[to_mask], cols[to_mask]] = policy.mask_token_id
    if to_random.any():
        lo = min(FIRST_REGULAR_ID, vocab_size - 1)
        masked[rows[to_random], cols[to_random]] = rng.integers(lo, vocab_size, size=int(to_random.sum()))
    return masked, targets, (rows, cols)


# -- generic loops ----------------------------------------------------------


def _sample_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.integers(0, n, size=min(batch_size, n))


def train_mlm_steps(
    model: ToyTransformer,
    corpus: DomainCorpus,
    cfg: TrainConfig,
    policy: MaskingPolicy,
    params: list[T.Tensor],
    log: list[dict] | None = None,
) -> list[dict]:
    """Drive masked-token training of ``params`` on ``corpus``; the caller
    decides what is trainable."""
    if len(corpus) == 0:
        raise ContractError("training corpus is empty")
    batch_rng, mask_rng, drop_rng = T.spawn_rngs(cfg.seed, 3)
    model.rng = drop_rng
    opt = AdamW(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    total = cfg.total_steps(len(corpus))
    log = log if log is not None else []
    for step in range(total):
        idx = _sample_batch(batch_rng, len(corpus), cfg.batch_size)
        batch = pad_batch([corpus.sequences[i] for i in idx], cfg.max_seq_len)
        masked, targets, positions = mask_batch(batch, policy, rng=mask_rng, vocab_size=corpus.vocab_size)
        lr = lr_at(cfg.learning_rate, step, total, cfg.lr_schedule, cfg.warmup_steps)
        with GradTape():
            _, loss = model.forward_mlm(masked, positions, targets, train=True)
        backward(loss)
        opt.step(lr=lr)
        opt.zero_grad()
        log.append({"step": step, "split": "train", "loss": loss.item(), "lr": lr})
    return log


def pretrain_domain(
    model: ToyTransformer,
    corpus: DomainCorpus,
    cfg: TrainConfig,
    policy: MaskingPolicy,
) -> tuple[dict[tuple[int, str], LoRAAdapter], list[dict]]:
    """Stage-1 pre-training of the attached adapters on one domain corpus.

    The model must already carry a fresh adapter on every slot; base weights
    are frozen by construction and verified unchanged by hash.
    """
    adapters = {key: slot.adapter for key, slot in model.slots().items()}
    if any(not isinstance(a, LoRAAdapter) for a in adapters.values()):
        raise ContractError("pretrain_domain: every slot needs a LoRAAdapter attached")
    if len(corpus) == 0:
        raise ContractError("pretrain_domain: corpus is empty")
    params = []
    for key in sorted(adapters):
        params.extend([adapters[key].A, adapters[key].B])
    before = model.base_weight_hash()
    log = train_mlm_steps(model, corpus, cfg, policy, params)
    if model.base_weight_hash() != before:
        raise ContractError("pretrain_domain: base weights changed during adapter training")
    return adapters, log


def train_classifier_steps(
    model: ToyTransformer,
    task: LabeledDataset,
    cfg: TrainConfig,
    params: list[T.Tensor],
    log: list[dict] | None = None,
    num_steps: int | None = None,
    step_offset: int = 0,
) -> list[dict]:
    if len(task) == 0:
        raise ContractError("task dataset is empty")
    if task.labels.min() < 0:
        raise IndexError("task contains labels outside the label vocabulary")
    if task.labels.max() >= task.num_classes:
        raise IndexError(f"label {task.labels.max()} >= num_classes {task.num_classes}")
    batch_rng, drop_rng = T.spawn_rngs(cfg.seed + step_offset, 2)
    model.rng = drop_rng
    opt = AdamW(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    total = num_steps if num_steps is not None else cfg.total_steps(len(task))
    log = log if log is not None else []
    for step in range(total):
        idx = _sample_batch(batch_rng, len(task), cfg.batch_size)
        batch = pad_batch([task.sequences[i] for i in idx], cfg.max_seq_len)
        labels = task.labels[idx]
        lr = lr_at(cfg.learning_rate, step, total, cfg.lr_schedule, cfg.warmup_steps)
        with GradTape():
            _, loss = model.forward_classify(batch, labels, train=True)
        backward(loss)
        opt.step(lr=lr)
        opt.zero_grad()
        log.append({"step": step_offset + step, "split": "train", "loss": loss.item(), "lr": lr})
    return log


def finetune(
    model: ToyTransformer,
    task: LabeledDataset,
    cfg: TrainConfig,
    freeze: FreezeConfig | None = None,
    eval_task: LabeledDataset | None = None,
) -> tuple["Metrics", list[dict]]:
    """Stage-2 fine-tuning of the attached composed adapters plus the
    classifier head (the head always trains, whatever the freeze says).

    An all-frozen freeze is allowed here and means head-only training.
    """
    composed = {key: slot.adapter for key, slot in model.slots().items()}
    if any(not isinstance(c, ComposedAdapter) for c in composed.values()):
        raise ContractError("finetune: every slot needs a ComposedAdapter attached")
    freeze = freeze if freeze is not None else FreezeConfig()
    for c in composed.values():
        if freeze.any_trainable():
            apply_freeze(c, freeze)
        else:
            c.a_cat.requires_grad = c.p.requires_grad = c.b_cat.requires_grad = False
            c.freeze = replace(freeze)
    for t in model.classifier_parameters():
        t.requires_grad = True
    params = []
    for key in sorted(composed):
        params.extend(composed[key].trainable_tensors())
    params.extend(model.classifier_parameters())
    log = train_classifier_steps(model, task, cfg, params)
    metrics = evaluate(model, eval_task if eval_task is not None else task, max_seq_len=cfg.max_seq_len)
    return metrics, log


# -- evaluation -------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    micro_f1: float
    num_examples: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "num_examples": self.num_examples,
        }


def f1_from_counts(tp: np.ndarray, fp: np.ndarray, fn: np.ndarray) -> np.ndarray:
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(denom, dtype=np.float64), where=denom > 0)


def compute_metrics(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> Metrics:
    """Accuracy plus macro/micro F1 over all ``num_classes`` classes.

    For single-label multi-class data micro-F1 equals accuracy; classes with
    no true or predicted instances contribute an F1 of 0 to the macro mean.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ContractError("compute_metrics: empty dataset")
    correct = y_true == y_pred
    tp = np.zeros(num_classes)
    fp = np.zeros(num_classes)
    fn = np.zeros(num_classes)
    for c in range(num_classes):
        tp[c] = np.sum(correct & (y_true == c))
        fp[c] = np.sum((y_pred == c) & ~correct)
        fn[c] = np.sum((y_true == c) & ~correct)
    macro = float(f1_from_counts(tp, fp, fn).mean())
    total_tp, total_fp, total_fn = tp.sum(), fp.sum(), fn.sum()
    micro = float(2 * total_tp / (2 * total_tp + total_fp + total_fn)) if y_true.size else 0.0
    return Metrics(
        accuracy=float(correct.mean()),
        macro_f1=macro,
        micro_f1=micro,
        num_examples=int(y_true.size),
    )


def evaluate(model: ToyTransformer, dataset: LabeledDataset, max_seq_len: int | None = None, batch_size: int = 64) -> Metrics:
    """Run the classifier in eval mode and score it.

    Records whose label is outside the label vocabulary count as wrong
    (warned once per call).
    """
    if len(dataset) == 0:
        raise ContractError("evaluate: empty dataset")
    max_seq_len = max_seq_len if max_seq_len is not None else model.config.max_seq_len
    preds = []
    for start in range(0, len(dataset), batch_size):
        batch = pad_batch(dataset.sequences[start : start + batch_size], max_seq_len)
        preds.append(model.predict(batch))
    y_pred = np.concatenate(preds)
    y_true = dataset.labels.copy()
    unknown = y_true < 0
    if unknown.any():
        warnings.warn(f"{int(unknown.sum())} labels outside the label vocabulary counted as wrong")
        # sentinel no prediction can hit; scoring still runs over the known classes
        y_true[unknown] = dataset.num_classes
    return compute_metrics(y_true, y_pred, dataset.num_classes)
