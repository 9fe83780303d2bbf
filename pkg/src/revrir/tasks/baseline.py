"""Feature-based RIR room classifier used as the reference method."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..catalog import Catalog
from ..errors import DataError, FeatureError, NumericError
from ..nn import AdamW, LrSchedule, Module, Tensor, lr_at, no_grad, softmax_cross_entropy
from ..nn.layers import Dropout, Linear, ReLU, Sequential
from ..simulate import Rir, item_rng
from .features import N_FEATURES, baseline_features
from .metrics import scoreboard

PAPER_WIDTHS = (65, 90, 100)
PAPER_CLASSES = 110


@dataclass(frozen=True)
class BaselineConfig:
    widths: tuple[int, ...] = PAPER_WIDTHS
    dropout: float = 0.2
    lr: float = 1e-3
    warmup_ratio: float = 0.1
    epochs: int = 100
    batch_size: int = 32
    weight_decay: float = 0.01


def scaled_widths(n_classes: int, widths: Sequence[int] = PAPER_WIDTHS) -> tuple[int, ...]:
    """Hidden widths scaled by ``n_classes / 110`` (at least one unit each)."""
    if n_classes == PAPER_CLASSES:
        return tuple(widths)
    return tuple(max(1, round(w * n_classes / PAPER_CLASSES)) for w in widths)


class BaselineNet(Module):
    def __init__(self, n_classes: int, config: BaselineConfig, rng: np.random.Generator):
        super().__init__()
        widths = (N_FEATURES, *scaled_widths(n_classes, config.widths))
        layers: list[Module] = []
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [Linear(a, b, rng), ReLU(), Dropout(config.dropout, rng)]
        layers.append(Linear(widths[-1], n_classes, rng))
        self.net = Sequential(*layers)
        self.mean = np.zeros(N_FEATURES)
        self.scale = np.ones(N_FEATURES)

    _buffers = ("mean", "scale")

    def forward(self, x: Tensor) -> Tensor:
        return self.net((x - self.mean) * self.scale)


def feature_matrix(rirs: Sequence[Rir], ids: Sequence[int] | None = None) -> np.ndarray:
    """Stack baseline features; the error names the first offending RIR."""
    rows = []
    for pos, rir in enumerate(rirs):
        try:
            rows.append(baseline_features(rir))
        except FeatureError as exc:
            name = ids[pos] if ids is not None else pos
            raise DataError(f"RIR {name} (class {rir.class_id}): {exc}") from exc
    return np.stack(rows)


@dataclass
class BaselineResult:
    net: BaselineNet
    metrics: dict
    predictions: np.ndarray
    train_loss: list[float] = field(default_factory=list)


def baseline_train_eval(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    catalog: Catalog,
    config: BaselineConfig = BaselineConfig(),
    seed: int = 0,
) -> BaselineResult:
    """Train the MLP on standardised feature vectors and score held-out RIRs."""
    train_y = np.asarray(train_y, dtype=np.int64)
    net = BaselineNet(len(catalog), config, item_rng(seed, 31))
    net.mean = train_x.mean(axis=0)
    net.scale = 1.0 / np.maximum(train_x.std(axis=0), 1e-9)
    opt = AdamW(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = item_rng(seed, 32)
    n = len(train_y)
    per_epoch = max(1, -(-n // config.batch_size))
    schedule = LrSchedule("linear_warmup", config.lr, per_epoch * config.epochs, warmup_ratio=config.warmup_ratio)
    result_loss = []
    step = 0
    for _ in range(config.epochs):
        net.train()
        losses = []
        for idx in np.array_split(rng.permutation(n), per_epoch):
            loss = softmax_cross_entropy(net(Tensor(train_x[idx])), train_y[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite baseline loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(schedule, step))
            losses.append(loss.item())
            step += 1
        result_loss.append(float(np.mean(losses)))
    net.eval()
    with no_grad():
        preds = np.argmax(net(Tensor(val_x)).data, axis=1)
    return BaselineResult(net, scoreboard(preds, val_y, catalog), preds, result_loss)
