"""Dual encoders and the class-aware contrastive objective.

Speech clips and RIRs are mapped onto a shared unit sphere. Similarities
are temperature-scaled dot products pushed through a row softmax (SMDP);
every batch item sharing the anchor's room class counts as a positive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Dataset
from .dsp import DEFAULT_FLOOR_DB, Signal, log_mag_spectrum, spectrogram
from .errors import NumericError, ValidationError
from .nn import AdamW, LrSchedule, Module, Tensor, concat, ff_block, l2_normalize, lr_at, no_grad
from .nn.layers import Linear
from .simulate import Rir, item_rng

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6


SPEECH_ENCODERS = ("frame-pool", "frame-stats")


@dataclass(frozen=True)
class EncoderConfig:
    embedding_dim: int = 32
    fft_size: int = 4096
    rir_dims: tuple[int, ...] = (256, 192, 128)  # hidden blocks; a final block of embedding_dim follows
    frame_length: int = 256
    hop: int = 128
    speech_frame_dim: int = 128
    speech_hidden: int = 64
    floor_db: float = DEFAULT_FLOOR_DB
    # desk-scale stand-ins for a pretrained spectrogram transformer:
    # "frame-pool" averages projected frames, "frame-stats" adds their spread
    speech_encoder: str = "frame-pool"

    def __post_init__(self):
        if self.speech_encoder not in SPEECH_ENCODERS:
            raise ValidationError(f"speech_encoder must be one of {SPEECH_ENCODERS}, got {self.speech_encoder!r}")
        if self.embedding_dim < 1 or self.speech_frame_dim < 1 or self.speech_hidden < 1:
            raise ValidationError("encoder widths must be positive")

    @property
    def rir_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def speech_bins(self) -> int:
        return self.frame_length // 2 + 1


PAPER_ENCODER = EncoderConfig(embedding_dim=768, rir_dims=(3264, 2432, 1600))


class Standardize(Module):
    """Fixed per-feature affine map fitted on training inputs."""

    _buffers = ("mean", "scale")

    def __init__(self, features: int):
        super().__init__()
        self.mean = np.zeros(features)
        self.scale = np.ones(features)

    def fit(self, x: np.ndarray) -> None:
        flat = x.reshape(-1, x.shape[-1])
        self.mean = flat.mean(axis=0)
        self.scale = 1.0 / np.maximum(flat.std(axis=0), 1e-3)

    def forward(self, x: Tensor) -> Tensor:
        return (x - self.mean) * self.scale


class RirEncoder(Module):
    """Feed-forward blocks (Linear -> ReLU -> BatchNorm) over the log-magnitude spectrum."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.input_norm = Standardize(config.rir_bins)
        widths = (config.rir_bins, *config.rir_dims, config.embedding_dim)
        self.blocks = [ff_block(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def in_features(self) -> int:
        return self.blocks[0].layers[0].in_features

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ValidationError(f"RIR encoder expects {self.in_features} bins, got {x.shape[-1]}")
        x = self.input_norm(x)
        for block in self.blocks:
            x = block(x)
        return x


class SpeechEncoder(Module):
    """Per-frame projection, ReLU, pooling over frames, then two feed-forward blocks.

    Pooling is the frame mean, or the mean next to the standard deviation
    for ``"frame-stats"``.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.with_spread = config.speech_encoder == "frame-stats"
        self.input_norm = Standardize(config.speech_bins)
        self.frame_proj = Linear(config.speech_bins, config.speech_frame_dim, rng)
        pooled = config.speech_frame_dim * (2 if self.with_spread else 1)
        self.blocks = [
            ff_block(pooled, config.speech_hidden, rng),
            ff_block(config.speech_hidden, config.embedding_dim, rng),
        ]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ValidationError(f"speech encoder expects (batch, frames, bins), got {x.shape}")
        frames = self.frame_proj(self.input_norm(x)).relu()
        h = frames.mean(axis=1)
        if self.with_spread:
            dev = frames - h.reshape(h.shape[0], 1, h.shape[1])
            h = concat([h, ((dev * dev).mean(axis=1) + 1e-8).sqrt()], axis=1)
        for block in self.blocks:
            h = block(h)
        return h


class DualEncoder(Module):
    """Both encoders plus the trainable temperature, stored as ``log tau``."""

    def __init__(self, config: EncoderConfig, seed: int, tau_init: float = 0.07):
        super().__init__()
        if not 0 < tau_init <= 1:
            raise ValidationError("initial temperature must lie in (0, 1]")
        self.config = config
        self.speech = SpeechEncoder(config, item_rng(seed, 11))
        self.rir = RirEncoder(config, item_rng(seed, 12))
        self.log_tau = Tensor(np.array(np.log(tau_init)), requires_grad=True)

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))

    def clamp_temperature(self) -> None:
        self.log_tau.data = np.minimum(self.log_tau.data, 0.0)

    def embed_speech(self, feats) -> Tensor:
        return l2_normalize(self.speech(_as_input(feats)))

    def embed_rir(self, feats) -> Tensor:
        return l2_normalize(self.rir(_as_input(feats)))


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- featurisation -----------------------------------------------------------------


def rir_features(rirs: Sequence[Rir] | np.ndarray, config: EncoderConfig = EncoderConfig()) -> np.ndarray:
    samples = np.asarray(rirs if isinstance(rirs, np.ndarray) else [r.samples for r in rirs])
    if samples.shape[-1] > config.fft_size:
        raise ValidationError(f"RIR length {samples.shape[-1]} exceeds the {config.fft_size}-point FFT")
    return log_mag_spectrum(samples, config.fft_size, config.floor_db)


def speech_features(signals: Sequence[Signal], config: EncoderConfig = EncoderConfig()) -> np.ndarray:
    specs = [spectrogram(s, config.frame_length, config.hop, config.floor_db).values for s in signals]
    if len({s.shape for s in specs}) > 1:
        raise ValidationError("clips in one batch must share a length")
    return np.stack(specs)


def encode_rir(h: Rir, model: DualEncoder) -> np.ndarray:
    """Unit embedding of one RIR in eval mode."""
    model.eval()
    with no_grad():
        return model.embed_rir(rir_features([h], model.config)).data[0]


def encode_speech(x: Signal, model: DualEncoder, max_duration: float = 10.0) -> np.ndarray:
    """Unit embedding of one reverberant clip in eval mode."""
    if x.duration > max_duration + 1e-12:
        raise ValidationError(f"clip lasts {x.duration:.2f} s; the limit is {max_duration} s")
    model.eval()
    with no_grad():
        return model.embed_speech(speech_features([x], model.config)).data[0]


def embed_batches(embed, feats: np.ndarray, batch: int = 256) -> np.ndarray:
    with no_grad():
        return np.concatenate([embed(feats[i : i + batch]).data for i in range(0, len(feats), batch)])


# --- similarity and loss -------------------------------------------------------------


@dataclass(eq=False)
class EmbeddingBatch:
    e1: Tensor
    e2: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.e1, self.e2 = _as_input(self.e1), _as_input(self.e2)
        self.labels = np.asarray(self.labels)
        if self.e1.ndim != 2 or self.e1.shape != self.e2.shape:
            raise ValidationError(f"embedding shapes differ: {self.e1.shape} vs {self.e2.shape}")
        if self.labels.shape != (self.e1.shape[0],):
            raise ValidationError("need one label per batch row")
        if self.e1.shape[0] == 0:
            raise ValidationError("empty batch")
        for name, e in (("E1", self.e1), ("E2", self.e2)):
            norms = np.linalg.norm(e.data, axis=1)
            if np.max(np.abs(norms - 1.0)) > UNIT_TOL:
                raise ValidationError(f"{name} rows are not unit-norm (max deviation {np.max(np.abs(norms - 1)):.2e})")


def _check_tau(tau) -> Tensor:
    t = _as_input(tau)
    if not 0 < float(t.data) <= 1:
        raise ValidationError(f"temperature {float(t.data)} outside (0, 1]")
    return t


def log_smdp(e1: Tensor, e2: Tensor, tau) -> Tensor:
    """Row-wise log softmax of ``e1 @ e2.T / tau``."""
    e1, e2 = _as_input(e1), _as_input(e2)
    if e1.ndim != 2 or e2.ndim != 2 or e1.shape[1] != e2.shape[1]:
        raise ValidationError(f"shape mismatch: {e1.shape} vs {e2.shape}")
    return ((e1 @ e2.T) / _check_tau(tau)).log_softmax(axis=1)


def smdp(e1, e2, tau) -> np.ndarray:
    """Softmax over dot products: row ``i`` is a distribution over ``e2`` rows."""
    with no_grad():
        return np.exp(log_smdp(e1, e2, tau).data)


def positive_weights(labels: np.ndarray) -> np.ndarray:
    """Row ``i`` spreads weight ``1/|N_i|`` over same-label columns."""
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    return same / same.sum(axis=1, keepdims=True)


def directional_loss(e1: Tensor, e2: Tensor, labels: np.ndarray, tau) -> Tensor:
    """Mean over anchors in ``e1`` of the average negative log SMDP of their positives."""
    w = positive_weights(np.asarray(labels))
    return -(log_smdp(e1, e2, tau) * w).sum() * (1.0 / w.shape[0])


def contrastive_loss(batch: EmbeddingBatch, tau) -> Tensor:
    """Average of the speech-to-RIR and RIR-to-speech directional losses."""
    forward = directional_loss(batch.e1, batch.e2, batch.labels, tau)
    backward = directional_loss(batch.e2, batch.e1, batch.labels, tau)
    return (forward + backward) * 0.5


# --- pre-training -----------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 4
    batch_size: int = 55
    lr: float = 1e-5
    warmup_ratio: float = 0.05
    weight_decay: float = 0.01
    tau_init: float = 0.07
    sampler: str = "uniform"  # or "distinct-class"


@dataclass
class PretrainResult:
    model: DualEncoder
    optimizer: AdamW
    train_curve: list[tuple[int, float]] = field(default_factory=list)
    val_curve: list[tuple[int, float]] = field(default_factory=list)
    initial_loss: float = float("nan")


@dataclass(eq=False)
class PairFeatures:
    """Featurised pairs: spectrograms of clips and log spectra of their paired RIRs."""

    speech: np.ndarray
    rir: np.ndarray
    labels: np.ndarray


def featurize_pairs(ds: Dataset, config: EncoderConfig) -> PairFeatures:
    speech = speech_features([ds.clip(i).signal for i in range(len(ds))], config)
    pair_idx = [it.pair_rir_index for it in ds.items]
    unique = sorted(set(pair_idx))
    spectra = dict(zip(unique, rir_features([ds.bank[i] for i in unique], config)))
    rir = np.stack([spectra[i] for i in pair_idx])
    return PairFeatures(speech, rir, ds.labels)


def batch_indices(labels: np.ndarray, batch_size: int, rng: np.random.Generator, sampler: str) -> list[np.ndarray]:
    n = len(labels)
    if sampler == "uniform":
        order = rng.permutation(n)
        return [order[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]
    if sampler == "distinct-class":
        classes = np.unique(labels)
        if batch_size > len(classes):
            raise ValidationError(f"distinct-class batches of {batch_size} need that many classes")
        pools = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in classes}
        batches = []
        while True:
            alive = [c for c in classes if pools[c]]
            if len(alive) < batch_size:
                return batches
            chosen = rng.choice(alive, size=batch_size, replace=False)
            batches.append(np.array([pools[c].pop() for c in chosen]))
    raise ValidationError(f"unknown sampler {sampler!r}")


def batch_loss(model: DualEncoder, feats: PairFeatures, idx: np.ndarray) -> Tensor:
    e1 = model.embed_speech(feats.speech[idx])
    e2 = model.embed_rir(feats.rir[idx])
    return contrastive_loss(EmbeddingBatch(e1, e2, feats.labels[idx]), model.log_tau.exp())


def evaluate_loss(model: DualEncoder, feats: PairFeatures, batch_size: int) -> float:
    """Mean loss over consecutive fixed batches, eval mode."""
    model.eval()
    n = len(feats.labels)
    size = min(batch_size, n)
    losses = []
    with no_grad():
        for i in range(0, n - size + 1, size):
            losses.append(batch_loss(model, feats, np.arange(i, i + size)).item())
    return float(np.mean(losses))


def pretrain(
    train: PairFeatures,
    val: PairFeatures | None,
    encoder_config: EncoderConfig,
    config: PretrainConfig,
    seed: int,
) -> PretrainResult:
    """Minibatch AdamW on the symmetric class-aware loss with linear warm-up."""
    n = len(train.labels)
    if n == 0:
        raise ValidationError("empty training set")
    if config.batch_size > n:
        raise ValidationError(f"batch size {config.batch_size} exceeds the {n} training pairs")
    model = DualEncoder(encoder_config, seed, config.tau_init)
    model.speech.input_norm.fit(train.speech)
    model.rir.input_norm.fit(train.rir)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = item_rng(seed, 13)
    epochs = [batch_indices(train.labels, config.batch_size, rng, config.sampler) for _ in range(config.epochs)]
    total = sum(len(e) for e in epochs)
    if total == 0:
        raise ValidationError("no complete batch fits the training set")
    schedule = LrSchedule("linear_warmup", config.lr, total, warmup_ratio=config.warmup_ratio)
    result = PretrainResult(model, opt)
    step = 0
    for epoch, batches in enumerate(epochs):
        model.train()
        for idx in batches:
            loss = batch_loss(model, train, idx)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite pre-training loss at step {step}")
            if step == 0:
                result.initial_loss = value
            result.train_curve.append((step, value))
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(schedule, step))
            model.clamp_temperature()
            step += 1
        if val is not None:
            vloss = evaluate_loss(model, val, config.batch_size)
            if not np.isfinite(vloss):
                raise NumericError(f"non-finite validation loss after epoch {epoch}")
            result.val_curve.append((epoch, vloss))
            log.info("epoch %d: train %.4f val %.4f tau %.4f", epoch, value, vloss, model.tau)
    model.eval()
    return result
