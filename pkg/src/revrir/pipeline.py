"""Pipeline stages that read and write artifacts in one output directory.

Every stage checks that its inputs were produced under the same upstream
configuration (by stage hash) and writes outputs that carry its own hash.
Outputs hold no timestamps, so a stage rerun with equal config and seed
reproduces its files byte for byte in single-threaded mode.

Layout of ``out``::

    catalog.txt                room list
    rirs.bin                   RIR bank
    dataset.json               train/val manifest
    pretrain.ckpt              dual encoder + optimizer state
    pretrain_losses.csv        step,split,loss
    head_speech.ckpt           fine-tuned heads
    head_rir.ckpt
    baseline.ckpt              feature baseline
    cache/                     embeddings keyed by encoder digest
    metrics.json               evaluation summary
    confusion_*.csv            confusion matrices
    report/                    loss curves and markdown tables
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import Catalog, load_catalog, save_catalog
from .config import RunConfig
from .contrastive import DualEncoder, featurize_pairs, pretrain, rir_features, speech_features
from .corpus import Dataset, build_dataset, read_manifest, synth_pool, write_manifest
from .errors import HashMismatch, MissingInput, ValidationError
from .nn import Tensor, no_grad, params_digest, read_checkpoint, write_checkpoint
from .simulate import generate_rir_bank, quantize_bank, read_bank, write_bank
from .tasks import (
    BaselineNet,
    ClassifierHead,
    FinetuneConfig,
    FinetuneResult,
    baseline_train_eval,
    collapse_to_types,
    confusion,
    embed,
    feature_matrix,
    finetune,
    predict,
    scoreboard,
)
from .tasks.metrics import TYPE_NAMES

log = logging.getLogger(__name__)

CATALOG_FILE = "catalog.txt"
BANK_FILE = "rirs.bin"
DATASET_FILE = "dataset.json"
PRETRAIN_FILE = "pretrain.ckpt"
LOSSES_FILE = "pretrain_losses.csv"
BASELINE_FILE = "baseline.ckpt"
METRICS_FILE = "metrics.json"
ENCODERS = ("speech", "rir")


def head_file(encoder: str) -> str:
    return f"head_{encoder}.ckpt"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{path} not found; run `{stage}` first")
    return path


def _check_hash(found: str | None, config: RunConfig, stage: str, path: Path) -> None:
    expected = config.stage_hash(stage)
    if found != expected:
        raise HashMismatch(
            f"{path} was produced by {stage} config {str(found)[:12]}, current config gives {expected[:12]}"
        )


# --- loaders ------------------------------------------------------------------------


def load_catalog_artifact(config: RunConfig, out: Path) -> Catalog:
    path = _require(out / CATALOG_FILE, "catalog")
    catalog, found = load_catalog(path)
    _check_hash(found, config, "catalog", path)
    return catalog


def load_bank_artifact(config: RunConfig, out: Path):
    path = _require(out / BANK_FILE, "gen-rirs")
    bank, found = read_bank(path)
    _check_hash(found, config, "rirs", path)
    return bank


def load_dataset_artifact(config: RunConfig, out: Path) -> tuple[Dataset, Dataset]:
    bank = load_bank_artifact(config, out)
    path = _require(out / DATASET_FILE, "build-data")
    train, val, found = read_manifest(path, bank, config.data.synth)
    _check_hash(found, config, "data", path)
    return train, val


def load_model(config: RunConfig, out: Path) -> DualEncoder:
    path = _require(out / PRETRAIN_FILE, "pretrain")
    params, _, meta = read_checkpoint(path)
    _check_hash(meta.get("config_hash"), config, "pretrain", path)
    if meta.get("embedding_dim") != config.encoder.embedding_dim:
        raise ValidationError(
            f"{path} holds d = {meta.get('embedding_dim')}, config asks for d = {config.encoder.embedding_dim}"
        )
    model = DualEncoder(config.encoder, config.seed, config.pretrain.tau_init)
    model.load_state_dict(params)
    model.eval()
    return model


def load_head(config: RunConfig, out: Path, encoder: str, model: DualEncoder) -> FinetuneResult:
    path = _require(out / head_file(encoder), "finetune")
    params, _, meta = read_checkpoint(path)
    _check_hash(meta.get("config_hash"), config, "finetune", path)
    if meta.get("encoder_digest") != meta_digest(model) and config.finetune.freeze_encoder:
        raise HashMismatch(f"{path} was trained on a different pre-trained encoder")
    n_classes = params["head.linear.weight"].shape[1]
    head = ClassifierHead(config.encoder.embedding_dim, n_classes, np.random.default_rng(0))
    head.load_state_dict({k[len("head.") :]: v for k, v in params.items() if k.startswith("head.")})
    work = model
    if not config.finetune.freeze_encoder:
        work = DualEncoder(config.encoder, config.seed, config.pretrain.tau_init)
        work.load_state_dict({k[len("model.") :]: v for k, v in params.items() if k.startswith("model.")})
    head.eval()
    work.eval()
    return FinetuneResult(head, work, _head_config(config, encoder), list(meta.get("train_loss", [])))


def meta_digest(model: DualEncoder) -> str:
    return params_digest(model.state_dict())


def _head_config(config: RunConfig, encoder: str) -> FinetuneConfig:
    f = config.finetune
    return FinetuneConfig(encoder, f.freeze_encoder, f.epochs, f.batch_size, f.lr, f.power, f.weight_decay)


# --- stages -------------------------------------------------------------------------


def stage_catalog(config: RunConfig, out: Path) -> Catalog:
    out.mkdir(parents=True, exist_ok=True)
    catalog = config.catalog.build()
    save_catalog(catalog, out / CATALOG_FILE, config.stage_hash("catalog"))
    log.info("catalog: %d rooms", len(catalog))
    return catalog


def stage_rirs(config: RunConfig, out: Path, jobs: int = 1):
    catalog = load_catalog_artifact(config, out)
    bank = generate_rir_bank(catalog, config.data.per_class_count, config.seed, config.acoustic, jobs=jobs)
    # stored as float32; quantise so in-memory and reloaded banks agree
    bank = quantize_bank(bank)
    write_bank(out / BANK_FILE, bank, config.stage_hash("rirs"))
    log.info("bank: %d RIRs", len(bank))
    return bank


def stage_data(config: RunConfig, out: Path) -> tuple[Dataset, Dataset]:
    catalog = load_catalog_artifact(config, out)
    bank = load_bank_artifact(config, out)
    d = config.data
    pool = synth_pool(d.pool_size, d.utterance_duration, config.seed, d.synth)
    train, val = build_dataset(catalog, bank, pool, d.split, d.pairs_per_class, config.seed)
    write_manifest(out / DATASET_FILE, train, val, config.stage_hash("data"))
    log.info("dataset: %d train / %d val pairs", len(train), len(val))
    return train, val


def stage_pretrain(config: RunConfig, out: Path):
    train, val = load_dataset_artifact(config, out)
    ftr, fva = featurize_pairs(train, config.encoder), featurize_pairs(val, config.encoder)
    result = pretrain(ftr, fva, config.encoder, config.pretrain, config.seed)
    meta = {
        "config_hash": config.stage_hash("pretrain"),
        "embedding_dim": config.encoder.embedding_dim,
        "tau": result.model.tau,
        "initial_loss": result.initial_loss,
    }
    write_checkpoint(out / PRETRAIN_FILE, result.model.state_dict(), result.optimizer.state_dict(), meta)
    with open(out / LOSSES_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "split", "loss"])
        for step, loss in result.train_curve:
            w.writerow([step, "train", repr(loss)])
        # validation runs at the end of each epoch: record it at that epoch's last step
        per_epoch = len(result.train_curve) // max(1, len(result.val_curve)) if result.val_curve else 0
        for epoch, loss in result.val_curve:
            w.writerow([(epoch + 1) * per_epoch - 1, "val", repr(loss)])
    return result


def rir_set(ds: Dataset) -> tuple[list[int], np.ndarray]:
    """Distinct RIRs reserved for a split, with their class labels."""
    idx = ds.distinct_rirs()
    return idx, np.array([ds.bank[i].class_id for i in idx], dtype=np.int64)


def split_features(ds: Dataset, encoder: str, config: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Encoder inputs for one split: every clip for speech, every distinct RIR for RIRs."""
    if encoder == "speech":
        return speech_features([ds.clip(i).signal for i in range(len(ds))], config.encoder), ds.labels
    idx, labels = rir_set(ds)
    return rir_features([ds.bank[i] for i in idx], config.encoder), labels


def cached_embeddings(model: DualEncoder, encoder: str, split: str, feats: np.ndarray, out: Path) -> np.ndarray:
    """Frozen-encoder embeddings, computed once per encoder digest."""
    path = out / "cache" / f"{encoder}-{split}-{meta_digest(model)[:16]}.npy"
    if path.exists():
        emb = np.load(path)
        if emb.shape[0] == len(feats):
            return emb
    emb = embed(model, encoder, feats)
    path.parent.mkdir(exist_ok=True)
    with open(path, "wb") as fh:
        np.save(fh, emb)
    return emb


def stage_finetune(config: RunConfig, out: Path, encoders=ENCODERS) -> dict[str, FinetuneResult]:
    catalog = load_catalog_artifact(config, out)
    model = load_model(config, out)
    train, val = load_dataset_artifact(config, out)
    results = {}
    for encoder in encoders:
        feats, labels = split_features(train, encoder, config)
        vfeats, vlabels = split_features(val, encoder, config)
        hc = _head_config(config, encoder)
        cache = cached_embeddings(model, encoder, "train", feats, out) if hc.freeze_encoder else None
        res = finetune(model, feats, labels, len(catalog), hc, config.seed, vfeats, vlabels, cached_embeddings=cache)
        params = {f"head.{k}": v for k, v in res.head.state_dict().items()}
        if not hc.freeze_encoder:
            params.update({f"model.{k}": v for k, v in res.model.state_dict().items()})
        meta = {
            "config_hash": config.stage_hash("finetune"),
            "encoder": encoder,
            "encoder_digest": meta_digest(model),
            "train_loss": res.train_loss,
            "val_accuracy": res.val_accuracy,
        }
        write_checkpoint(out / head_file(encoder), params, meta=meta)
        results[encoder] = res
    return results


def stage_baseline(config: RunConfig, out: Path):
    catalog = load_catalog_artifact(config, out)
    train, val = load_dataset_artifact(config, out)
    tr_idx, ytr = rir_set(train)
    va_idx, yva = rir_set(val)
    xtr = feature_matrix([train.bank[i] for i in tr_idx], tr_idx)
    xva = feature_matrix([val.bank[i] for i in va_idx], va_idx)
    result = baseline_train_eval(xtr, ytr, xva, yva, catalog, config.baseline, config.seed)
    meta = {"config_hash": config.stage_hash("baseline"), "train_loss": result.train_loss}
    write_checkpoint(out / BASELINE_FILE, result.net.state_dict(), meta=meta)
    return result


def load_baseline(config: RunConfig, out: Path, n_classes: int) -> BaselineNet:
    path = _require(out / BASELINE_FILE, "baseline")
    params, _, meta = read_checkpoint(path)
    _check_hash(meta.get("config_hash"), config, "baseline", path)
    net = BaselineNet(n_classes, config.baseline, np.random.default_rng(0))
    net.load_state_dict(params)
    net.eval()
    return net


def baseline_predict(net: BaselineNet, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return np.argmax(net(Tensor(x)).data, axis=1)


# --- evaluation ---------------------------------------------------------------------


def _curve(path: Path) -> dict[str, list]:
    curves: dict[str, list] = {"train": [], "val": []}
    if path.exists():
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curves[row["split"]].append([int(row["step"]), float(row["loss"])])
    return curves


def _epoch_means(train_curve: list, epochs: int) -> list[float]:
    losses = np.array([v for _, v in train_curve])
    if epochs < 1 or losses.size == 0:
        return []
    return [float(c.mean()) for c in np.array_split(losses, epochs)]


def stage_evaluate(config: RunConfig, out: Path, collapse: str | None = None, with_baseline: bool | None = None) -> dict:
    """Score both heads on both held-out sets and (when present) the baseline.

    The speech set is every validation clip; the RIR set is every RIR
    reserved for validation. Writes ``metrics.json`` and one confusion CSV per
    (model, set), plus type-level CSVs with ``collapse="types"``.
    """
    catalog = load_catalog_artifact(config, out)
    model = load_model(config, out)
    train, val = load_dataset_artifact(config, out)
    _, _, pre_meta = read_checkpoint(out / PRETRAIN_FILE)
    feats = {enc: split_features(val, enc, config) for enc in ENCODERS}
    sets = {"speech_set": "speech", "rir_set": "rir"}
    heads = {enc: load_head(config, out, enc, model) for enc in ENCODERS}

    results: dict = {}
    confusions: dict[str, dict] = {}
    for enc, res in heads.items():
        results[f"{enc}_head"] = {}
        for set_name, set_enc in sets.items():
            x, y = feats[set_enc]
            preds = predict(res, x, set_enc)
            results[f"{enc}_head"][set_name] = scoreboard(preds, y, catalog)
            confusions[f"{enc}_head_{set_name}"] = (preds, y)

    if with_baseline is None:
        with_baseline = (out / BASELINE_FILE).exists()
    if with_baseline:
        net = load_baseline(config, out, len(catalog))
        va_idx, yva = rir_set(val)
        preds = baseline_predict(net, feature_matrix([val.bank[i] for i in va_idx], va_idx))
        results["baseline"] = {"rir_set": scoreboard(preds, yva, catalog)}
        confusions["baseline_rir_set"] = (preds, yva)

    curves = _curve(out / LOSSES_FILE)
    epoch_means = _epoch_means(curves["train"], config.pretrain.epochs)
    metrics = {
        "config_hash": config.hash,
        "stage_hashes": {s: config.stage_hash(s) for s in ("rirs", "data", "pretrain", "finetune", "baseline")},
        "seed": config.seed,
        "n_classes": len(catalog),
        "pretrain": {
            "initial_loss": pre_meta["initial_loss"],
            "epoch_train_loss": epoch_means,
            "final_train_loss": epoch_means[-1] if epoch_means else None,
            "val_loss": [v for _, v in curves["val"]],
            "tau": pre_meta["tau"],
        },
        "finetune": {enc: {"train_loss": h.train_loss} for enc, h in heads.items()},
        "results": results,
    }
    write_metrics(out, metrics, catalog, confusions, collapse)
    return metrics


def write_metrics(out: Path, metrics: dict, catalog: Catalog, confusions: dict, collapse: str | None) -> None:
    (out / METRICS_FILE).write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    for name, (preds, labels) in confusions.items():
        (out / f"confusion_{name}.csv").write_text(confusion(preds, labels, len(catalog), catalog.names).to_csv())
        if collapse == "types":
            tp, tl = collapse_to_types(preds, catalog), collapse_to_types(labels, catalog)
            (out / f"confusion_{name}_types.csv").write_text(confusion(tp, tl, len(TYPE_NAMES), TYPE_NAMES).to_csv())


def score_predictions(catalog: Catalog, path: Path, collapse: str | None) -> tuple[dict, str]:
    """Score a ``prediction,label`` CSV; returns the scoreboard and the confusion CSV."""
    rows = list(csv.DictReader(io.StringIO(_require(path, "evaluate").read_text())))
    if not rows or not {"prediction", "label"} <= set(rows[0]):
        raise ValidationError(f"{path}: expected a CSV with 'prediction' and 'label' columns")
    try:
        preds = np.array([int(r["prediction"]) for r in rows])
        labels = np.array([int(r["label"]) for r in rows])
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    board = scoreboard(preds, labels, catalog)
    if collapse == "types":
        tp, tl = collapse_to_types(preds, catalog), collapse_to_types(labels, catalog)
        return board, confusion(tp, tl, len(TYPE_NAMES), TYPE_NAMES).to_csv()
    return board, confusion(preds, labels, len(catalog), catalog.names).to_csv()


# --- report -------------------------------------------------------------------------


def stage_report(out: Path) -> Path:
    """Loss-curve CSVs and markdown confusion tables from an evaluated run."""
    metrics = json.loads(_require(out / METRICS_FILE, "evaluate").read_text())
    report = out / "report"
    report.mkdir(exist_ok=True)
    curves = _curve(out / LOSSES_FILE)
    for split, rows in curves.items():
        with open(report / f"loss_{split}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            w.writerows(rows)
    lines = [f"# Run {metrics['config_hash'][:12]} (seed {metrics['seed']})", ""]
    pre = metrics["pretrain"]
    lines += [
        "## Pre-training",
        "",
        f"initial loss {pre['initial_loss']:.4f}, final epoch mean {pre['final_train_loss']:.4f}, tau {pre['tau']:.4f}",
        "",
        "## Top-1",
        "",
        "| model | set | rooms | types |",
        "|---|---|---|---|",
    ]
    for model_name, sets in metrics["results"].items():
        for set_name, board in sets.items():
            lines.append(f"| {model_name} | {set_name} | {board['top1']:.3f} | {board['type_top1']:.3f} |")
    lines.append("")
    for model_name, sets in metrics["results"].items():
        for set_name, board in sets.items():
            for key in ("confusion", "type_confusion"):
                c = board[key]
                lines += [f"### {model_name} / {set_name} ({key.replace('_', ' ')})", "", _markdown(c), ""]
    path = report / "report.md"
    path.write_text("\n".join(lines))
    return path


def _markdown(c: dict) -> str:
    rows = ["| GT / Prediction | " + " | ".join(c["names"]) + " |", "|---" * (len(c["names"]) + 1) + "|"]
    for name, row in zip(c["names"], c["matrix"]):
        rows.append(f"| **{name}** | " + " | ".join(f"{v:.3f}" for v in row) + " |")
    return "\n".join(rows)


@dataclass
class PipelineRun:
    metrics: dict
    out: Path


def run_all(config: RunConfig, out: Path, jobs: int = 1, collapse: str | None = "types") -> PipelineRun:
    """Every stage in order, from an empty directory."""
    stage_catalog(config, out)
    stage_rirs(config, out, jobs)
    stage_data(config, out)
    stage_pretrain(config, out)
    stage_finetune(config, out)
    stage_baseline(config, out)
    metrics = stage_evaluate(config, out, collapse)
    stage_report(out)
    return PipelineRun(metrics, out)
