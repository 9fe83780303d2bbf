"""Classification heads on top of a pre-trained encoder."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..contrastive import DualEncoder, embed_batches
from ..errors import NumericError, ValidationError
from ..nn import AdamW, LrSchedule, Module, Tensor, lr_at, no_grad, softmax_cross_entropy
from ..nn.layers import Linear
from ..simulate import item_rng

ENCODERS = ("speech", "rir")


@dataclass(frozen=True)
class FinetuneConfig:
    encoder: str = "speech"
    freeze_encoder: bool = True
    epochs: int = 50
    batch_size: int = 100
    lr: float = 1e-4
    power: float = 0.1
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValidationError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be at least 1")


class ClassifierHead(Module):
    def __init__(self, embedding_dim: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.linear = Linear(embedding_dim, n_classes, rng)

    @property
    def n_classes(self) -> int:
        return self.linear.out_features

    def forward(self, x: Tensor) -> Tensor:
        return self.linear(x)


@dataclass
class FinetuneResult:
    head: ClassifierHead
    model: DualEncoder
    config: FinetuneConfig
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)


def embedder(model: DualEncoder, encoder: str):
    return model.embed_speech if encoder == "speech" else model.embed_rir


def embed(model: DualEncoder, encoder: str, feats: np.ndarray) -> np.ndarray:
    """Unit embeddings in eval mode, no graph."""
    model.eval()
    return embed_batches(embedder(model, encoder), feats)


def _check_labels(labels: np.ndarray, n_classes: int) -> None:
    if labels.size == 0:
        raise ValidationError("empty dataset")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError(f"labels must lie in [0, {n_classes})")


def predict(result: FinetuneResult, feats: np.ndarray, encoder: str | None = None) -> np.ndarray:
    """Class ids for ``feats`` pushed through ``encoder`` (default: the fine-tuned one)."""
    emb = embed(result.model, encoder or result.config.encoder, feats)
    result.head.eval()
    with no_grad():
        return np.argmax(result.head(Tensor(emb)).data, axis=1)


def finetune(
    model: DualEncoder,
    train_feats: np.ndarray,
    train_labels: np.ndarray,
    n_classes: int,
    config: FinetuneConfig,
    seed: int,
    val_feats: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
    cached_embeddings: np.ndarray | None = None,
    precompute: bool = True,
) -> FinetuneResult:
    """Train a linear head with cross-entropy and a polynomial schedule.

    With ``freeze_encoder`` the pre-trained model is left untouched; the
    training embeddings are computed once (or taken from
    ``cached_embeddings``) unless ``precompute`` is False, in which case the
    frozen encoder runs inside every step. Otherwise a copy of the model is
    trained jointly with the head.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    _check_labels(train_labels, n_classes)
    if len(train_feats) != len(train_labels):
        raise ValidationError("features and labels differ in length")
    if config.freeze_encoder:
        work = model
        model.eval()
    else:
        work = copy.deepcopy(model)
    head = ClassifierHead(model.config.embedding_dim, n_classes, item_rng(seed, 21))
    params = head.parameters()
    if not config.freeze_encoder:
        params += (work.speech if config.encoder == "speech" else work.rir).parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

    frozen_emb = None
    if config.freeze_encoder and precompute:
        frozen_emb = cached_embeddings if cached_embeddings is not None else embed(model, config.encoder, train_feats)

    n = len(train_labels)
    min_batch = 1 if config.freeze_encoder else 2
    rng = item_rng(seed, 22)
    plans = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        plans.append([b for b in np.array_split(order, max(1, -(-n // config.batch_size))) if len(b) >= min_batch])
    total = sum(len(p) for p in plans)
    schedule = LrSchedule("polynomial", config.lr, total, power=config.power)
    result = FinetuneResult(head, work, config)
    step = 0
    for batches in plans:
        losses = []
        head.train()
        if not config.freeze_encoder:
            work.train()
        for idx in batches:
            if frozen_emb is not None:
                x = Tensor(frozen_emb[idx])
            elif config.freeze_encoder:
                with no_grad():
                    x = Tensor(embedder(work, config.encoder)(train_feats[idx]).data)
            else:
                x = embedder(work, config.encoder)(train_feats[idx])
            loss = softmax_cross_entropy(head(x), train_labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite fine-tuning loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(schedule, step))
            losses.append(loss.item())
            step += 1
        result.train_loss.append(float(np.mean(losses)))
        if val_feats is not None:
            preds = predict(result, val_feats)
            result.val_accuracy.append(float(np.mean(preds == np.asarray(val_labels))))
    head.eval()
    work.eval()
    return result
