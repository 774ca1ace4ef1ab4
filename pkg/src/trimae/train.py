"""Two-stage training orchestration: masked-reconstruction pretraining,
classifier fine-tuning with early stopping on validation loss, seed-averaged
trials, and checkpoint round-tripping.

All data-side randomness (shuffling, augmentation, masking, missingness) is
drawn from generators keyed on (seed, stream, epoch, sample index), so runs
are reproducible and a resumed run replays the original schedule exactly.
"""

from __future__ import annotations

import copy
import logging
import os
import random
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from . import data as D
from .classifier import StageClassifier, ce_loss
from .data import AugmentationPolicy, MissingnessConfig, MultimodalSample, rng_for
from .encoder import EncoderConfig
from .errors import CheckpointError, DataError, NumericError
from .mae import DecoderConfig, MaskedPretrainModel, mask_batch, masked_mse
from .metrics import EvalReport, evaluate_predictions

logger = logging.getLogger(__name__)

IMPROVEMENT_EPS = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    lr_pretrain: float = 1e-5
    lr_finetune: float = 3e-6
    batch_pretrain: int = 8
    batch_finetune: int = 16
    pretrain_epochs: int = 20
    mask_ratio: float = 0.7
    patch_size: int = 32
    early_stop_patience: int = 10
    max_finetune_epochs: int = 200
    n_seeds: int = 5
    seed: int = 0
    augment: bool = True
    deterministic: bool = False
    freeze_attention: bool = False
    missingness: MissingnessConfig | None = None

    def validate(self) -> None:
        positive = {
            "lr_pretrain": self.lr_pretrain,
            "lr_finetune": self.lr_finetune,
            "batch_pretrain": self.batch_pretrain,
            "batch_finetune": self.batch_finetune,
            "pretrain_epochs": self.pretrain_epochs,
            "max_finetune_epochs": self.max_finetune_epochs,
            "patch_size": self.patch_size,
        }
        for name, value in positive.items():
            if value <= 0:
                raise DataError(f"{name} must be positive, got {value}")
        if self.early_stop_patience < 1:
            raise DataError("early_stop_patience must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise DataError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.missingness is not None:
            self.missingness.validate()


def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _init_torch(cfg: TrainConfig) -> None:
    seed_everything(int(rng_for(cfg.seed, D.STREAM_INIT).integers(2**62)), cfg.deterministic)


# -- config (de)serialization for checkpoints -------------------------------


def _cfg_dict(cfg) -> dict:
    return asdict(cfg)


def _encoder_cfg_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    for key in ("widths", "depths", "modalities"):
        d[key] = tuple(d[key])
    return EncoderConfig(**d)


def _train_cfg_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if d.get("missingness") is not None:
        d["missingness"] = MissingnessConfig(**d["missingness"])
    return TrainConfig(**d)


# -- batching ----------------------------------------------------------------


def to_tensors(samples: Sequence[MultimodalSample]) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
    inputs = {
        mod: torch.from_numpy(np.stack([s.images()[mod] for s in samples]))
        for mod in D.MODALITIES
    }
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    return inputs, labels


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    order = rng_for(seed, D.STREAM_SHUFFLE, epoch).permutation(n).tolist()
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _prepare_batch(
    dataset: Sequence[MultimodalSample],
    indices: list[int],
    cfg: TrainConfig,
    epoch: int,
    policy: AugmentationPolicy,
    missing_counts: list[int] | None,
) -> list[MultimodalSample]:
    batch = []
    for idx in indices:
        s = dataset[idx]
        if cfg.augment:
            s = D.augment(s, policy, rng_for(cfg.seed, D.STREAM_AUG, epoch, idx))
        if cfg.missingness is not None:
            s = D.sample_missingness(s, cfg.missingness, rng_for(cfg.seed, D.STREAM_MISSING, epoch, idx))
            if missing_counts is not None:
                missing_counts[3 - sum(s.present)] += 1
        batch.append(s)
    return batch


def _check_finite(loss: torch.Tensor, stage: str, epoch: int) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"{stage} loss became non-finite at epoch {epoch}")


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str) -> dict:
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        return torch.load(path, weights_only=True)
    except Exception as exc:  # unreadable or tampered archive
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


_STRUCTURAL_KEYS = ("widths", "block", "depths", "stem_channels", "heads", "modalities", "share_weights")


def _check_encoder_compat(ckpt_cfg: dict, cfg: EncoderConfig) -> None:
    ours = _cfg_dict(cfg)
    for key in _STRUCTURAL_KEYS:
        if list(np.atleast_1d(ckpt_cfg[key])) != list(np.atleast_1d(ours[key])):
            raise CheckpointError(
                f"checkpoint encoder {key}={ckpt_cfg[key]!r} incompatible with {ours[key]!r}"
            )


def load_encoder_weights(model: StageClassifier, ckpt: dict) -> None:
    """Initialize a classifier encoder (branches + attention) from a stage-1
    checkpoint; decoder and head weights are discarded."""
    if ckpt.get("kind") != "pretrain":
        raise CheckpointError(f"expected a pretrain checkpoint, got kind={ckpt.get('kind')!r}")
    _check_encoder_compat(ckpt["encoder_config"], model.encoder.config)
    encoder_state = {
        k[len("encoder.") :]: v for k, v in ckpt["model_state"].items() if k.startswith("encoder.")
    }
    model.encoder.load_state_dict(encoder_state, strict=True)


# -- stage 1: masked pretraining ----------------------------------------------


def pretrain(
    dataset: Sequence[MultimodalSample],
    encoder_cfg: EncoderConfig,
    decoder_cfg: DecoderConfig,
    cfg: TrainConfig,
    out_dir: str | None = None,
    resume_from: dict | None = None,
) -> tuple[MaskedPretrainModel, dict]:
    """Masked-reconstruction epochs; returns the model and loss history.

    When ``out_dir`` is given, writes ``pretrain.pt`` (model + optimizer +
    config echo) and ``pretrain_log.txt`` with one "epoch<TAB>loss" line per
    epoch. ``resume_from`` continues a saved run bit-exactly.
    """
    cfg.validate()
    if cfg.mask_ratio == 0.0:
        raise DataError("pretraining needs mask_ratio > 0 (no masked pixels to score)")
    if not dataset:
        raise DataError("empty pretraining dataset")
    policy = AugmentationPolicy()
    _init_torch(cfg)
    model = MaskedPretrainModel(encoder_cfg, decoder_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_pretrain)
    start_epoch = 0
    losses: list[float] = []
    if resume_from is not None:
        if resume_from.get("kind") != "pretrain":
            raise CheckpointError("resume requires a pretrain checkpoint")
        _check_encoder_compat(resume_from["encoder_config"], encoder_cfg)
        model.load_state_dict(resume_from["model_state"])
        optimizer.load_state_dict(resume_from["optimizer_state"])
        start_epoch = int(resume_from["epochs_done"])
        losses = list(resume_from.get("losses", []))

    model.train()
    for epoch in range(start_epoch, cfg.pretrain_epochs):
        epoch_sq, epoch_batches = 0.0, 0
        for indices in _epoch_batches(len(dataset), cfg.batch_pretrain, cfg.seed, epoch):
            batch = _prepare_batch(dataset, indices, replace(cfg, missingness=None), epoch, policy, None)
            targets, _ = to_tensors(batch)
            masked, masks = mask_batch(
                targets, cfg.patch_size, cfg.mask_ratio, cfg.seed, epoch, indices
            )
            loss = masked_mse(model(masked), targets, masks)
            _check_finite(loss, "pretrain", epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_sq += loss.detach().item()
            epoch_batches += 1
        losses.append(epoch_sq / epoch_batches)
        logger.info("pretrain epoch %d loss %.6f", epoch, losses[-1])

    history = {"loss": losses}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "pretrain_log.txt"), "w") as fh:
            for epoch, loss in enumerate(losses):
                fh.write(f"{epoch}\t{loss!r}\n")
        save_checkpoint(
            os.path.join(out_dir, "pretrain.pt"),
            {
                "kind": "pretrain",
                "encoder_config": _cfg_dict(encoder_cfg),
                "decoder_config": _cfg_dict(decoder_cfg),
                "train_config": _cfg_dict(cfg),
                "model_state": model.state_dict(),
                "optimizer_state": optimizer.state_dict(),
                "epochs_done": cfg.pretrain_epochs,
                "losses": losses,
            },
        )
    return model, history


# -- stage 2: fine-tuning ------------------------------------------------------


def finetune(
    train_samples: Sequence[MultimodalSample],
    val_samples: Sequence[MultimodalSample],
    encoder_cfg: EncoderConfig,
    cfg: TrainConfig,
    out_dir: str | None = None,
    init_checkpoint: dict | None = None,
    active: tuple[str, ...] | None = None,
) -> tuple[StageClassifier, dict]:
    """Classifier training with per-epoch validation and early stopping.

    Stops once validation loss has not improved (by more than 1e-6 below the
    best) for ``early_stop_patience`` consecutive epochs, and restores the
    best-validation parameters. ``init_checkpoint=None`` trains from scratch.
    """
    cfg.validate()
    if not train_samples or not val_samples:
        raise DataError("fine-tuning needs non-empty train and val splits")
    policy = AugmentationPolicy()
    _init_torch(cfg)
    model = StageClassifier(encoder_cfg, active=active)
    if init_checkpoint is not None:
        load_encoder_weights(model, init_checkpoint)
    if cfg.freeze_attention:
        for unit in model.encoder.attend:
            for p in unit.parameters():
                p.requires_grad_(False)
    optimizer = torch.optim.Adam(
        (p for p in model.parameters() if p.requires_grad), lr=cfg.lr_finetune
    )

    best_loss, best_epoch, best_state = float("inf"), -1, None
    bad_epochs = 0
    history: dict = {"train_loss": [], "val_loss": [], "val_acc": [], "missing_counts": []}
    log_lines: list[str] = []
    for epoch in range(cfg.max_finetune_epochs):
        model.train()
        counts = [0, 0, 0]
        epoch_loss, n_batches = 0.0, 0
        for indices in _epoch_batches(len(train_samples), cfg.batch_finetune, cfg.seed, epoch):
            batch = _prepare_batch(train_samples, indices, cfg, epoch, policy, counts)
            inputs, labels = to_tensors(batch)
            loss = ce_loss(model(inputs), labels)
            _check_finite(loss, "finetune", epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.detach().item()
            n_batches += 1
        train_loss = epoch_loss / n_batches

        val_loss, val_acc = _validate_epoch(model, val_samples, cfg.batch_finetune)
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        history["val_acc"].append(val_acc)
        history["missing_counts"].append(tuple(counts))
        log_lines.append(f"{epoch}\ttrain\t{train_loss!r}\t-")
        log_lines.append(f"{epoch}\tval\t{val_loss!r}\t{val_acc!r}")
        logger.info("finetune epoch %d train %.6f val %.6f acc %.4f", epoch, train_loss, val_loss, val_acc)

        if val_loss < best_loss - IMPROVEMENT_EPS:
            best_loss, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.early_stop_patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    history["best_epoch"] = best_epoch
    history["best_val_loss"] = best_loss
    history["epochs_run"] = len(history["val_loss"])

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "finetune_log.txt"), "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
        save_checkpoint(
            os.path.join(out_dir, "classifier.pt"),
            {
                "kind": "classifier",
                "encoder_config": _cfg_dict(encoder_cfg),
                "active_modalities": list(model.active),
                "train_config": _cfg_dict(cfg),
                "model_state": model.state_dict(),
                "best_epoch": best_epoch,
                "best_val_loss": best_loss,
            },
        )
    return model, history


def _validate_epoch(
    model: StageClassifier, samples: Sequence[MultimodalSample], batch_size: int
) -> tuple[float, float]:
    model.eval()
    losses, correct = [], 0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            inputs, labels = to_tensors(samples[i : i + batch_size])
            logits = model(inputs)
            losses.append(float(ce_loss(logits, labels)) * len(labels))
            correct += int((logits.argmax(dim=-1) == labels).sum())
    return sum(losses) / len(samples), correct / len(samples)


def build_classifier_from_checkpoint(ckpt: dict) -> StageClassifier:
    if ckpt.get("kind") != "classifier":
        raise CheckpointError(f"expected a classifier checkpoint, got kind={ckpt.get('kind')!r}")
    encoder_cfg = _encoder_cfg_from_dict(ckpt["encoder_config"])
    model = StageClassifier(encoder_cfg, active=tuple(ckpt["active_modalities"]))
    try:
        model.load_state_dict(ckpt["model_state"])
    except RuntimeError as exc:
        raise CheckpointError(f"classifier state incompatible: {exc}") from exc
    model.eval()
    return model


# -- evaluation ----------------------------------------------------------------


def predict_probs(
    model: StageClassifier,
    samples: Sequence[MultimodalSample],
    batch_size: int = 16,
    modalities: tuple[str, ...] | None = None,
) -> tuple[list[str], np.ndarray, np.ndarray]:
    model.eval()
    ids = [s.id for s in samples]
    labels = np.array([s.label for s in samples], dtype=np.int64)
    rows = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            inputs, _ = to_tensors(samples[i : i + batch_size])
            rows.append(model.predict_probs(inputs, modalities).double().numpy())
    return ids, labels, np.concatenate(rows, axis=0)


def evaluate_model(
    model: StageClassifier,
    samples: Sequence[MultimodalSample],
    batch_size: int = 16,
    modalities: tuple[str, ...] | None = None,
) -> EvalReport:
    _, labels, probs = predict_probs(model, samples, batch_size, modalities)
    return evaluate_predictions(labels, probs)


# -- seed averaging ------------------------------------------------------------


@dataclass
class MultiSeedReport:
    runs: list[EvalReport]
    mean: dict[str, float]
    std: dict[str, float]


def multi_seed(run: Callable[[int], EvalReport], n_seeds: int, base_seed: int = 0) -> MultiSeedReport:
    """Execute ``run(seed)`` for consecutive seeds and aggregate the metrics.

    Reports the per-metric mean and population standard deviation across the
    trials (zero when all runs agree).
    """
    if n_seeds < 1:
        raise DataError(f"n_seeds must be >= 1, got {n_seeds}")
    runs = [run(base_seed + i) for i in range(n_seeds)]
    names = list(EvalReport.SCALARS)
    mean, std = {}, {}
    for name in names:
        values = np.array([getattr(r, name) for r in runs], dtype=np.float64)
        mean[name] = float(values.mean())
        std[name] = float(values.std())
    return MultiSeedReport(runs=runs, mean=mean, std=std)
