"""Training and evaluation loops.

Training is fully determined by (model seed, data, train config): epoch
shuffles and per-sample augmentation draws derive from the training seed
through the same index-addressable mix the data generator uses, so two
runs with identical seeds produce byte-identical checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .blocks import ParamStore
from .data import Sample, augment
from .errors import ConfigError, ContractError, DivergenceError, \
    IncompatibleCheckpointError
from .losses import total_loss
from .metrics import EvalReport, dice_score, ensemble_mean, iou_score, \
    threshold_mask
from .model import ModelConfig, init_model_params, load_checkpoint, \
    model_forward, save_checkpoint, checkpoint_fingerprint
from .optim import AdamState, adam_step
from .tensor import Rng, Tensor, backward, derive_seed


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    Defaults (Adam at 1e-3, batch 4, deep supervision on) are the
    standard recipe for this architecture family; step/epoch budgets are
    desk-scale.
    """

    lr: float = 1e-3
    batch_size: int = 4
    steps: Optional[int] = None
    epochs: Optional[int] = None
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    augment: bool = False
    checkpoint_every: int = 0
    deep_supervision: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if (self.steps is None) == (self.epochs is None):
            raise ConfigError("set exactly one of steps or epochs")
        if self.steps is not None and self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class TrainResult:
    store: ParamStore
    adam_state: AdamState
    trace: list[tuple[int, float]] = field(default_factory=list)


def _stack_batch(samples: Sequence[Sample], dtype) -> tuple[Tensor, Tensor]:
    images = np.stack([s.image.data for s in samples]).astype(dtype)
    masks = np.stack([s.mask.data for s in samples]).astype(dtype)
    return Tensor(images, dtype=dtype), Tensor(masks, dtype=dtype)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig,
          dataset: Sequence[Sample], out_path=None,
          log_path=None) -> TrainResult:
    """Seeded minibatch Adam training with deep supervision.

    Writes a ``step<TAB>loss`` trace line per step when ``log_path`` is
    given, checkpoints periodically and at the end when ``out_path`` is
    given, and aborts on the first non-finite loss.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    dtype = T.default_dtype()
    store = init_model_params(model_cfg, dtype=dtype)
    state = AdamState.for_store(store)

    n = len(dataset)
    if train_cfg.steps is not None:
        total_steps = train_cfg.steps
    else:
        total_steps = train_cfg.epochs * math.ceil(n / train_cfg.batch_size)

    trace: list[tuple[int, float]] = []
    log_fp = open(log_path, "w") if log_path else None
    try:
        step = 0
        epoch = 0
        while step < total_steps:
            epoch_seed = derive_seed(train_cfg.seed, epoch)
            order = Rng(epoch_seed).permutation(n)
            for lo in range(0, n, train_cfg.batch_size):
                if step >= total_steps:
                    break
                picked = [dataset[i] for i in order[lo:lo + train_cfg.batch_size]]
                if train_cfg.augment:
                    picked = [augment(s, Rng(derive_seed(epoch_seed, 1 + s.id)))
                              for s in picked]
                images, masks = _stack_batch(picked, dtype)
                outputs = model_forward(images, store, model_cfg)
                heads = outputs.logits if train_cfg.deep_supervision \
                    else outputs.logits[:1]
                loss = total_loss(heads, masks)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(
                        f"non-finite loss at step {step}")
                trace.append((step, value))
                if log_fp:
                    log_fp.write(f"{step}\t{value:.10g}\n")
                store.zero_grads()
                backward(loss)
                adam_step(store, state, train_cfg.lr, train_cfg.betas,
                          train_cfg.eps)
                step += 1
                if out_path and train_cfg.checkpoint_every \
                        and step % train_cfg.checkpoint_every == 0:
                    save_checkpoint(out_path, store, model_cfg, state)
            epoch += 1
    finally:
        if log_fp:
            log_fp.close()
    if out_path:
        save_checkpoint(out_path, store, model_cfg, state)
    return TrainResult(store=store, adam_state=state, trace=trace)


def evaluate(checkpoint_paths: Sequence, dataset: Sequence[Sample],
             threshold: float = 0.5) -> EvalReport:
    """Ensemble evaluation: mean of per-model probability maps, then
    thresholding, then per-sample Dice/IoU."""
    if not checkpoint_paths:
        raise ContractError("evaluate needs at least one checkpoint")
    fingerprints = [checkpoint_fingerprint(p) for p in checkpoint_paths]
    for path, fp in zip(checkpoint_paths[1:], fingerprints[1:]):
        if fp != fingerprints[0]:
            raise IncompatibleCheckpointError(
                f"checkpoint {path} fingerprint {fp} does not match "
                f"{checkpoint_paths[0]} fingerprint {fingerprints[0]}")
    models = [load_checkpoint(p) for p in checkpoint_paths]

    entries = []
    with T.no_grad():
        for sample in dataset:
            probs = []
            for store, cfg, _ in models:
                image = Tensor(sample.image.data[None], dtype=store_dtype(store))
                outputs = model_forward(image, store, cfg)
                probs.append(outputs.probability_map())
            merged = ensemble_mean(probs)
            mask = threshold_mask(merged, threshold)
            entries.append((sample.id,
                            dice_score(mask.data[0], sample.mask.data),
                            iou_score(mask.data[0], sample.mask.data)))
    return EvalReport(entries=entries, threshold=threshold)


def store_dtype(store) -> np.dtype:
    for _, p in store.items():
        return p.dtype
    return T.F32
