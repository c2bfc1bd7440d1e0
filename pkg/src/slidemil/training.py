"""Optimization loop: AdamW with decoupled decay, warmup-cosine schedule,
task-aware batch plans, early stopping on validation loss, checkpointing.

Training is a deterministic function of (config, manifest, bag bytes): one
root generator is seeded from config.seed and consumed in a fixed order
(param init, then per epoch: batch plan, per batch: patch subsets, feature
subset, dropout), so identical runs produce bitwise-identical checkpoints.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import DatasetManifest, SlideBag, SurvivalRecord
from .errors import CorruptionError, FormatError, ValidationError
from .fingerprint import RunConfig
from .model import GatedAttentionMIL, cox_loss, cross_entropy_loss, mse_loss
from .sampling import (FixedBag, balanced_batches, full_feature_indices, plain_batches,
                       regression_batches, sample_feature_indices, sample_patches,
                       survival_batches)

CHECKPOINT_MAGIC = b"NNMILCK1"
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def lr_schedule(epoch: int, config: RunConfig) -> float:
    """Linear warmup to learning_rate, then cosine decay to 0 at max_epochs."""
    if not 0 <= epoch < config.max_epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.max_epochs})")
    warm, total, base = config.warmup_epochs, config.max_epochs, config.learning_rate
    if epoch < warm:
        return base * (epoch + 1) / warm
    if total == warm:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (epoch - warm) / (total - warm)))


def init_adam_state(params: dict[str, np.ndarray]) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "step": 0,
    }


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict,
               lr: float, weight_decay: float, betas=ADAM_BETAS, eps=ADAM_EPS) -> None:
    """In-place bias-corrected Adam update with decay decoupled from the moments."""
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient in tensor {name}")
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p *= 1.0 - lr * weight_decay
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_step: int
    config: RunConfig


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int | None = None
    best_val_loss: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "stopped_epoch": self.stopped_epoch,
                "best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss,
                "notes": self.notes}


def build_model(checkpoint: Checkpoint) -> GatedAttentionMIL:
    """Reconstruct the aggregator from checkpoint tensor shapes and config."""
    head = checkpoint.params["head_weight"]
    hidden = checkpoint.params["attention_v"].shape[0]
    model = GatedAttentionMIL(embed_dim=head.shape[1], hidden_dim=hidden,
                              n_outputs=head.shape[0], dropout=checkpoint.config.dropout)
    model.params = checkpoint.params
    return model


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    """magic, uint64 LE header length, JSON metadata, float32 LE tensor payloads."""
    tensors: list[tuple[str, np.ndarray]] = []
    for name, arr in checkpoint.params.items():
        tensors.append((name, arr))
    for name, arr in checkpoint.opt_m.items():
        tensors.append((f"adam_m.{name}", arr))
    for name, arr in checkpoint.opt_v.items():
        tensors.append((f"adam_v.{name}", arr))
    # canonical payload layout: the file is a function of the tensor contents
    # alone, not of dict insertion order
    tensors.sort(key=lambda t: t[0])

    meta_tensors = {}
    payload = bytearray()
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        meta_tensors[name] = {"shape": list(arr.shape), "offset": len(payload)}
        payload.extend(data)
    header = {
        "format_version": 1,
        "config": checkpoint.config.to_dict(),
        "opt_step": checkpoint.opt_step,
        "tensors": meta_tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise FormatError("checkpoint file too short for its header")
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:8]!r}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header_end = 16 + header_len
    if len(raw) < header_end:
        raise CorruptionError("checkpoint header truncated")
    try:
        header = json.loads(raw[16:header_end].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from exc
    payload = raw[header_end:]

    arrays = {}
    expected_end = 0
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        n_bytes = int(np.prod(shape)) * 4 if shape else 4
        start = meta["offset"]
        end = start + n_bytes
        if end > len(payload):
            raise CorruptionError(f"tensor {name} extends past the payload")
        arrays[name] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
        expected_end = max(expected_end, end)
    if expected_end != len(payload):
        raise CorruptionError("checkpoint payload length mismatch")

    params = {k: v for k, v in arrays.items() if not k.startswith("adam_")}
    opt_m = {k[len("adam_m."):]: v for k, v in arrays.items() if k.startswith("adam_m.")}
    opt_v = {k[len("adam_v."):]: v for k, v in arrays.items() if k.startswith("adam_v.")}
    config = RunConfig.from_dict(header["config"])
    return Checkpoint(params=params, opt_m=opt_m, opt_v=opt_v,
                      opt_step=header["opt_step"], config=config)


def _stack_fixed(fixed: list[FixedBag]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([f.embeddings for f in fixed])
    mask = np.stack([f.valid_mask for f in fixed])
    return x, mask


def _batch_targets(task: str, entries, batch: list[int]):
    if task == "classification":
        return np.array([entries[i].label for i in batch], dtype=int)
    if task == "regression":
        return np.array([entries[i].label for i in batch], dtype=np.float64)
    times = np.array([entries[i].label.time for i in batch], dtype=np.float64)
    events = np.array([entries[i].label.event for i in batch], dtype=int)
    return times, events


def _loss_and_grad(task: str, outputs: np.ndarray, targets):
    if task == "classification":
        loss, d_out = cross_entropy_loss(outputs, targets)
        return loss, d_out
    if task == "regression":
        loss, d_pred = mse_loss(outputs[:, 0], targets)
        return loss, d_pred[:, None].astype(outputs.dtype)
    loss, d_pred = cox_loss(outputs[:, 0], *targets)
    return loss, d_pred[:, None].astype(outputs.dtype)


def _validation_loss(model, task, val_entries, bags, windows) -> float | None:
    """Loss of the chunk-ensembled prediction over the whole validation split."""
    from .inference import ensemble_outputs  # local import avoids a module cycle

    outputs = np.stack([
        ensemble_outputs(model, bags[e.slide_id], windows) for e in val_entries
    ])  # (n_val, K, n_out)
    if task == "classification":
        mean_logits = outputs.mean(axis=1)
        labels = np.array([e.label for e in val_entries], dtype=int)
        return cross_entropy_loss(mean_logits, labels)[0]
    if task == "regression":
        preds = outputs.mean(axis=1)[:, 0]
        targets = np.array([e.label for e in val_entries], dtype=np.float64)
        return mse_loss(preds, targets)[0]
    per_chunk = outputs[:, :, 0].astype(np.float64)
    shift = per_chunk.max()
    risks = np.log(np.exp(per_chunk - shift).mean(axis=1)) + shift
    times = np.array([e.label.time for e in val_entries], dtype=np.float64)
    events = np.array([e.label.event for e in val_entries], dtype=int)
    if events.sum() == 0:
        return None
    return cox_loss(risks, times, events)[0]


def train(config: RunConfig, manifest: DatasetManifest, bags: dict[str, SlideBag],
          checkpoint_path=None) -> tuple[Checkpoint, TrainReport]:
    """Train per the run config; returns the latest-epoch checkpoint and a report."""
    from .inference import inference_windows

    if config.task != manifest.task:
        raise ValidationError(f"config task {config.task} != manifest task {manifest.task}")
    train_entries = manifest.split_entries("train")
    val_entries = manifest.split_entries("val")
    if not train_entries or not val_entries:
        raise ValidationError("train and val splits must both be nonempty")
    for e in train_entries + val_entries:
        if e.slide_id not in bags:
            raise ValidationError(f"manifest slide {e.slide_id} missing from loaded bags")

    embed_dim = bags[train_entries[0].slide_id].embed_dim
    for sid, bag in bags.items():
        if bag.embed_dim != embed_dim:
            raise ValidationError(f"slide {sid} embed_dim {bag.embed_dim} != {embed_dim}")

    task = config.task
    full_bag_mode = config.training_mode == "full_bag_batch1"
    n_out = manifest.n_classes if task == "classification" else 1

    rng = np.random.default_rng(config.seed)
    model = GatedAttentionMIL(embed_dim, config.hidden_dim, n_out, dropout=config.dropout)
    model.init_params(rng)
    state = init_adam_state(model.params)
    windows = inference_windows(config, embed_dim)

    if task == "classification":
        labels = np.array([e.label for e in train_entries], dtype=int)
    elif task == "regression":
        targets = np.array([e.label for e in train_entries], dtype=np.float64)
    else:
        records = [e.label for e in train_entries]
        for r in records:
            if not isinstance(r, SurvivalRecord):
                raise ValidationError("survival training needs SurvivalRecord labels")

    report = TrainReport()
    best_val = None
    best_epoch = None
    epochs_since_best = 0
    skipped_eventless = 0

    for epoch in range(config.max_epochs):
        lr = lr_schedule(epoch, config)
        if full_bag_mode:
            plan = plain_batches(len(train_entries), 1, rng)
        elif task == "classification":
            plan = balanced_batches(labels, config.batch_size, rng)
        elif task == "regression":
            plan = regression_batches(targets, config.batch_size, rng)
        else:
            plan = survival_batches(records, config.batch_size, rng)

        loss_sum = 0.0
        n_seen = 0
        for batch in plan.batches:
            if full_bag_mode:
                bag = bags[train_entries[batch[0]].slide_id]
                x = bag.embeddings[None]
                mask = np.ones((1, bag.n_patches), dtype=bool)
                feat = full_feature_indices(embed_dim)
            else:
                fixed = [sample_patches(bags[train_entries[i].slide_id], config.bag_size, rng)
                         for i in batch]
                x, mask = _stack_fixed(fixed)
                feat = sample_feature_indices(embed_dim, config.hidden_dim, rng)
            batch_targets = _batch_targets(task, train_entries, batch)
            if task == "survival" and int(np.sum(batch_targets[1])) == 0:
                skipped_eventless += 1
                continue
            result = model.forward(x, mask, feat, training=True, rng=rng, need_cache=True)
            loss, d_out = _loss_and_grad(task, result.outputs, batch_targets)
            grads = model.backward(result.cache, d_out)
            adamw_step(model.params, grads, state, lr, config.weight_decay)
            loss_sum += loss * len(batch)
            n_seen += len(batch)

        train_loss = loss_sum / n_seen if n_seen else float("nan")
        val_loss = _validation_loss(model, task, val_entries, bags, windows)
        report.epochs.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                              "val_loss": val_loss})
        report.stopped_epoch = epoch + 1

        if val_loss is not None:
            if best_val is None or val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                epochs_since_best = 0
            else:
                epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    if skipped_eventless:
        report.notes.append(f"skipped {skipped_eventless} event-free survival batches")
    if best_val is None and task == "survival":
        report.notes.append("validation split has no events; early stopping disabled")
    report.best_epoch = best_epoch
    report.best_val_loss = best_val

    checkpoint = Checkpoint(params=model.params, opt_m=state["m"], opt_v=state["v"],
                            opt_step=state["step"], config=config)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint, checkpoint_path)
    return checkpoint, report
