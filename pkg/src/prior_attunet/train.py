"""VAE pretraining, segmentation training and evaluation loops."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from . import checkpoint as ck
from .data import LabeledSlice, DatasetError, split, to_tensors
from .layers import attach_generator, he_normal_
from .losses import CSV_HEADER, MetricsRecord, combined_loss, dsc
from .net import ModelConfig, PriorAttUNet, build_network, predict_mask
from .optim import AdamW, TrainConfig
from .priornet import PriorModel, VAEConfig, reconstruction_error, vae_loss
from .rng import derive_seed, numpy_rng, torch_generator

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _batches(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# VAE prior


@dataclass
class PriorHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mse: float = float("inf")


@torch.no_grad()
def prior_val_mse(vae: PriorModel, x: Tensor, batch_size: int = 32) -> float:
    """Mean per-pixel squared error of posterior-mean reconstructions."""
    was = vae.training
    vae.eval()
    total = 0.0
    for i in range(0, x.shape[0], batch_size):
        xb = x[i:i + batch_size]
        total += float(reconstruction_error(xb, vae.reconstruct(xb), "mean")) * xb.shape[0]
    vae.train(was)
    return total / x.shape[0]


def prior_split(n: int, tcfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    perm = numpy_rng(tcfg.seed, "prior-split").permutation(n)
    n_val = max(1, int(round(n * tcfg.prior_val_ratio)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def pretrain_prior(slices: Sequence[LabeledSlice], vae_cfg: VAEConfig, tcfg: TrainConfig,
                   out: str | Path | None = None) -> tuple[PriorModel, ck.Checkpoint, PriorHistory]:
    """Fit the VAE on fluid-free slices; keep the weights with the lowest validation reconstruction MSE.

    Epoch 0 in the history is the untrained model.
    """
    if len(slices) < 2:
        raise DatasetError("VAE pretraining needs at least two slices")
    bad = [s.name or str(i) for i, s in enumerate(slices) if s.has_fluid]
    if bad:
        raise DatasetError(f"VAE pretraining expects fluid-free slices; foreground found in: {', '.join(bad[:10])}")
    tcfg.validate()
    x, _ = to_tensors(slices, vae_cfg.input_size)
    tr, va = prior_split(len(slices), tcfg)
    x_tr, x_va = x[tr], x[va]

    vae = PriorModel(vae_cfg)
    he_normal_(vae, torch_generator(tcfg.seed, "prior-init"))
    with torch.no_grad():
        vae.logvar_head.weight.zero_()  # start at unit posterior variance
    noise = torch_generator(tcfg.seed, "prior-noise")
    batch_rng = numpy_rng(tcfg.seed, "prior-batch")
    opt = AdamW(list(vae.named_parameters()), tcfg, lr=tcfg.prior_lr)

    hist = PriorHistory()

    def record(epoch: int, train_loss: float) -> None:
        mse = prior_val_mse(vae, x_va)
        hist.epochs.append(epoch)
        hist.train_loss.append(train_loss)
        hist.val_mse.append(mse)
        if mse < hist.best_val_mse:
            hist.best_val_mse, hist.best_epoch = mse, epoch
            nonlocal best_state
            best_state = ck.state_tensors(vae)

    best_state = None
    with torch.no_grad():
        vae.eval()
        init_loss = sum(float(vae_loss(x_tr[b], vae.reconstruct(x_tr[b]), *vae.encode(x_tr[b]), tcfg.prior_beta,
                                       tcfg.prior_recon_reduction)) * len(b)
                        for b in _batches(len(tr), tcfg.prior_batch_size, None)) / len(tr)
    record(0, init_loss)
    for epoch in range(1, tcfg.prior_epochs + 1):
        vae.train()
        total = 0.0
        for bi, b in enumerate(_batches(len(tr), tcfg.prior_batch_size, batch_rng)):
            xb = x_tr[b]
            rec, mu, logvar = vae(xb, noise)
            loss = vae_loss(xb, rec, mu, logvar, tcfg.prior_beta, tcfg.prior_recon_reduction)
            if not torch.isfinite(loss):
                raise TrainingError(f"VAE loss is not finite at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
        record(epoch, total / len(tr))
        log.info("prior epoch %d loss %.4f val_mse %.6f", epoch, hist.train_loss[-1], hist.val_mse[-1])

    ck.load_tensors(vae, best_state)
    vae.eval()
    config = {"kind": "prior", "vae": {"in_c": vae_cfg.in_c, "input_size": list(vae_cfg.input_size),
                                       "base_c": vae_cfg.base_c, "latent_dim": vae_cfg.latent_dim},
              "train": tcfg.to_dict()}
    ckpt = ck.Checkpoint(config, ck.state_tensors(vae), hist.best_epoch, hist.best_val_mse)
    if out is not None:
        ck.save(out, ckpt)
    return vae, ckpt, hist


def prior_from_checkpoint(ckpt: ck.Checkpoint) -> PriorModel:
    if ckpt.config.get("kind") != "prior":
        raise ck.CheckpointError(f"expected a prior checkpoint, got kind {ckpt.config.get('kind')!r}")
    v = ckpt.config["vae"]
    vae = PriorModel(VAEConfig(v["in_c"], tuple(v["input_size"]), v["base_c"], v["latent_dim"]))
    ck.load_tensors(vae, ckpt.tensors)
    vae.eval()
    return vae


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalResult:
    slice_macro: MetricsRecord
    pooled: MetricsRecord
    n_slices: int

    @property
    def mdsc(self) -> float:
        return self.slice_macro.mdsc


def evaluate_masks(pred: Tensor | np.ndarray, gt: Tensor | np.ndarray, num_classes: int = 4,
                   include_background: bool = True) -> EvalResult:
    """Slice-macro (per-slice DSC averaged over slices, then classes) and pixel-pooled DSC."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} must be matching (n, h, w) stacks")
    if pred.shape[0] == 0:
        raise DatasetError("cannot evaluate an empty split")
    ids = list(range(num_classes)) if include_background else list(range(1, num_classes))
    per_slice = np.array([[dsc(p, g, c) for c in ids] for p, g in zip(pred, gt)])
    macro = MetricsRecord.from_per_class(per_slice.mean(axis=0), ids)
    pooled = MetricsRecord.from_per_class([dsc(pred, gt, c) for c in ids], ids)
    return EvalResult(macro, pooled, pred.shape[0])


@torch.no_grad()
def evaluate(model: PriorAttUNet, x: Tensor, y: Tensor, include_background: bool = True,
             batch_size: int = 32) -> EvalResult:
    if x.shape[0] == 0:
        raise DatasetError("cannot evaluate an empty split")
    preds = torch.cat([predict_mask(model, x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])
    n_cls = 2 if model.cfg.head == "sigmoid_binary" else model.cfg.num_classes
    return evaluate_masks(preds.numpy(), y.numpy(), n_cls, include_background)


# ---------------------------------------------------------------------------
# segmentation


@dataclass
class TrainResult:
    model: PriorAttUNet
    checkpoint: ck.Checkpoint
    csv_lines: list[str]
    train_loss: list[float]
    evals: list[EvalResult]
    best_epoch: int
    best_mdsc: float
    seconds_per_step: float
    split_ids: tuple[tuple[int, ...], tuple[int, ...]]

    @property
    def final(self) -> EvalResult:
        return self.evals[-1]

    @property
    def best(self) -> EvalResult:
        return self.evals[self.best_epoch - 1]


def segmentation_split(n: int, tcfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Training ids and model-selection ids (the test split, or a validation carve-out of train)."""
    plan = split(n, tcfg.split_ratio, tcfg.seed)
    train_ids = np.array(plan.train_ids)
    if tcfg.selection_split == "val":
        n_val = max(1, int(round(len(train_ids) * tcfg.val_ratio)))
        return train_ids[n_val:], train_ids[:n_val]
    return train_ids, np.array(plan.test_ids)


def segmentation_config(mcfg: ModelConfig, tcfg: TrainConfig) -> dict:
    return {"kind": "segmentation", "model": mcfg.to_dict(), "train": tcfg.to_dict()}


def train_segmentation(slices: Sequence[LabeledSlice], mcfg: ModelConfig, tcfg: TrainConfig,
                       vae: PriorModel | None = None, ckpt_path: str | Path | None = None,
                       csv_path: str | Path | None = None,
                       on_epoch: Callable[[int, float, EvalResult], None] | None = None) -> TrainResult:
    """Train with combined Dice + Lovasz loss; evaluate each epoch and keep the best-mDSC weights.

    The split, initial weights, batch order and dropout masks all derive from ``tcfg.seed``.
    """
    mcfg.validate()
    tcfg.validate()
    x, y = to_tensors(slices, tuple(mcfg.input_size))
    if mcfg.head == "sigmoid_binary":
        y = (y > 0).long()
    tr, sel = segmentation_split(len(slices), tcfg)
    x_tr, y_tr, x_sel, y_sel = x[tr], y[tr], x[sel], y[sel]

    model = build_network(mcfg, derive_seed(tcfg.seed, "init"))
    if mcfg.needs_vae:
        if vae is None:
            raise TrainingError(f"normnet_source {mcfg.normnet_source!r} needs pretrained prior weights")
        model.load_prior(vae)
    attach_generator(model, torch_generator(tcfg.seed, "dropout"))
    batch_rng = numpy_rng(tcfg.seed, "batch")
    opt = AdamW(model.trainable_named_parameters(), tcfg)

    lines = [CSV_HEADER]
    losses: list[float] = []
    evals: list[EvalResult] = []
    best_epoch, best_mdsc, best_state = 0, -1.0, None
    steps, step_time = 0, 0.0
    for epoch in range(1, tcfg.epochs + 1):
        model.train()
        total = 0.0
        for bi, b in enumerate(_batches(len(tr), tcfg.batch_size, batch_rng)):
            t0 = time.perf_counter()
            probs, _ = model(x_tr[b])
            loss = combined_loss(probs, y_tr[b], tcfg.w_dice, tcfg.w_lovasz, tcfg.dice_eps, tcfg.lovasz_class_mode)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss is not finite at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step_time += time.perf_counter() - t0
            steps += 1
            total += loss.item() * len(b)
        losses.append(total / len(tr))
        res = evaluate(model, x_sel, y_sel)
        evals.append(res)
        split_name = tcfg.selection_split
        lines.append(res.slice_macro.csv_row(split_name, epoch))
        lines.append(res.pooled.csv_row(f"{split_name}_pooled", epoch))
        if res.mdsc > best_mdsc:
            best_epoch, best_mdsc, best_state = epoch, res.mdsc, ck.state_tensors(model)
        log.info("epoch %d loss %.4f %s mDSC %.4f (pooled %.4f)", epoch, losses[-1], split_name, res.mdsc, res.pooled.mdsc)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1], res)

    ck.load_tensors(model, best_state)
    model.eval()
    ckpt = ck.Checkpoint(segmentation_config(mcfg, tcfg), best_state, best_epoch, best_mdsc)
    if ckpt_path is not None:
        ck.save(ckpt_path, ckpt)
    if csv_path is not None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        Path(csv_path).write_text("\n".join(lines) + "\n")
    return TrainResult(model, ckpt, lines, losses, evals, best_epoch, best_mdsc, step_time / max(1, steps),
                       (tuple(int(i) for i in tr), tuple(int(i) for i in sel)))


def model_from_checkpoint(ckpt: ck.Checkpoint) -> tuple[PriorAttUNet, ModelConfig, TrainConfig]:
    if ckpt.config.get("kind") != "segmentation":
        raise ck.CheckpointError(f"expected a segmentation checkpoint, got kind {ckpt.config.get('kind')!r}")
    mcfg = ModelConfig.from_dict(ckpt.config["model"])
    tcfg = TrainConfig.from_dict(ckpt.config["train"])
    model = PriorAttUNet(mcfg)
    ck.load_tensors(model, ckpt.tensors)
    model.eval()
    return model, mcfg, tcfg


def copy_model(model: PriorAttUNet) -> PriorAttUNet:
    return copy.deepcopy(model)
