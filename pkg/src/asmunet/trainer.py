"""Training protocol: Dice + cross-entropy loss, Adam with polynomial decay,
periodic validation with early stopping, resumable checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .config import RunConfig
from .metrics import mean_report, report
from .synthetic import CLASS_NAMES, MANIFEST_NAME, case_paths, read_manifest
from .unet import ASMUNet
from .volume import (AugmentParams, LabelVolume, Volume3D, apply_zscore, augment,
                     extract_patch, foreground_stats, read_svol, resample, sample_patch_spec)

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Loss and schedule


def soft_dice_loss(logits, target, smooth=DICE_SMOOTH):
    """1 - mean over classes of the soft Dice, pooled over batch and voxels."""
    n_classes = logits.shape[1]
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target.long(), n_classes).movedim(-1, 1).to(probs.dtype)
    dims = (0,) + tuple(range(2, logits.dim()))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return 1.0 - ((2 * inter + smooth) / (denom + smooth)).mean()


def seg_loss(logits, target, dice_weight=1.0, ce_weight=1.0):
    """Equal-weight Dice + voxel-mean cross-entropy; ``logits`` (B, C, ...)."""
    return (dice_weight * soft_dice_loss(logits, target)
            + ce_weight * F.cross_entropy(logits, target.long()))


def lr_schedule(epoch, cfg):
    if epoch > cfg.max_epochs:
        raise ValueError(f"epoch {epoch} beyond max_epochs {cfg.max_epochs}")
    return cfg.lr0 * (1.0 - epoch / cfg.max_epochs) ** cfg.poly_exp


# --------------------------------------------------------------------------
# Data


@dataclass
class Case:
    case_id: str
    image: Volume3D
    labels: LabelVolume
    variant: int = 1


@dataclass
class Dataset:
    train: list
    val: list
    test: list
    norm: tuple = (0.0, 1.0)


def load_dataset(root):
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    entries = read_manifest(manifest)
    raw = {}
    for e in entries:
        img_path, lbl_path = case_paths(root, e.case_id)
        for p in (img_path, lbl_path):
            if not p.exists():
                raise FileNotFoundError(f"missing case file {p}")
        raw[e.case_id] = (e, read_svol(img_path), read_svol(lbl_path))
    train_ids = [e.case_id for e in entries if e.split == "train"]
    if not train_ids:
        raise ValueError(f"{manifest}: no training cases")
    # isotropic target at the median training spacing
    spacings = np.array([raw[c][1].spacing for c in train_ids])
    target = (float(np.median(spacings)),) * 3
    for cid, (e, img, lbl) in raw.items():
        raw[cid] = (e, resample(img, target), resample(lbl, target))
    mean, std = foreground_stats([raw[c][1] for c in train_ids], [raw[c][2] for c in train_ids])
    splits = {"train": [], "val": [], "test": []}
    for cid, (e, img, lbl) in raw.items():
        lbl = LabelVolume(lbl.data, lbl.spacing, len(CLASS_NAMES))
        splits[e.split].append(Case(cid, apply_zscore(img, mean, std), lbl, e.variant))
    return Dataset(splits["train"], splits["val"], splits["test"], (mean, std))


def sample_batch(cases, cfg, epoch, it):
    """Deterministic batch for (seed, epoch, iteration); one RNG per sample."""
    imgs, lbls = [], []
    aug = AugmentParams(cfg.data.flip_prob, cfg.data.max_angle,
                        (cfg.data.scale_min, cfg.data.scale_max))
    for k in range(cfg.train.batch_size):
        rng = np.random.default_rng([cfg.train.seed, epoch, it, k])
        case = cases[int(rng.integers(len(cases)))]
        spec = sample_patch_spec(case.labels, cfg.train.patch, rng, cfg.data.fg_prob)
        img, lbl = extract_patch(case.image, case.labels, spec)
        aug_seed, aug_draw = int(rng.integers(2 ** 63)), rng.random()
        if cfg.data.augment and aug_draw < cfg.data.aug_prob:
            img, lbl = augment(img, lbl, aug_seed, aug)
        imgs.append(img.data)
        lbls.append(lbl.data)
    x = torch.from_numpy(np.stack(imgs)[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack(lbls).astype(np.int64))
    return x, y


def _window_origins(dim, patch, stride):
    if dim <= patch:
        return [0]
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)
    return origins


@torch.no_grad()
def sliding_window_logits(model, image, patch, stride_frac=0.5):
    """Overlap-averaged logits over the whole volume, shape (C, W, H, D)."""
    patch = tuple(int(p) for p in patch)
    strides = [max(1, int(p * stride_frac)) for p in patch]
    dims = image.shape
    size = tuple(max(d, p) for d, p in zip(dims, patch))
    padded = np.zeros(size, dtype=np.float32)
    padded[:dims[0], :dims[1], :dims[2]] = image
    n_classes = model.cfg.n_classes
    acc = torch.zeros((n_classes,) + size, dtype=torch.float32)
    count = torch.zeros(size, dtype=torch.float32)
    for ox in _window_origins(size[0], patch[0], strides[0]):
        for oy in _window_origins(size[1], patch[1], strides[1]):
            for oz in _window_origins(size[2], patch[2], strides[2]):
                sl = (slice(ox, ox + patch[0]), slice(oy, oy + patch[1]), slice(oz, oz + patch[2]))
                x = torch.from_numpy(np.ascontiguousarray(padded[sl]))[None, None]
                acc[(slice(None),) + sl] += model(x)[0].float()
                count[sl] += 1
    out = acc / count
    return out[:, :dims[0], :dims[1], :dims[2]]


def predict(model, image, patch, stride_frac=0.5):
    return sliding_window_logits(model, image, patch, stride_frac).argmax(0).numpy().astype(np.uint8)


def evaluate(model, cases, patch, stride_frac=0.5):
    was_training = model.training
    model.eval()
    reports = [report(predict(model, c.image.data, patch, stride_frac), c.labels.data)
               for c in cases]
    model.train(was_training)
    return mean_report(reports), reports


# --------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_metric: float = -math.inf
    best_epoch: int = -1
    stopped_early: bool = False
    epochs_run: int = 0
    n_validations: int = 0


HISTORY_FIELDS = (["epoch", "lr", "train_loss"]
                  + [f"val_dice_{n}" for n in CLASS_NAMES[1:]] + ["val_mean"])


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k, "") for k in HISTORY_FIELDS})


def build_model(cfg):
    torch.manual_seed(cfg.train.seed)
    return ASMUNet(cfg.net)


def make_optimizer(model, cfg):
    return torch.optim.Adam(model.parameters(), lr=cfg.train.lr0,
                            betas=(cfg.train.beta1, cfg.train.beta2), eps=cfg.train.eps)


def train_step(model, optimizer, x, y, cfg, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    try:
        loss = seg_loss(model(x), y, cfg.train.dice_weight, cfg.train.ce_weight)
    except FloatingPointError as exc:
        raise TrainingError(f"non-finite activations in forward pass: {exc} (lr={lr:g})") from None
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} (lr={lr:g})")
    loss.backward()
    optimizer.step()
    return float(loss.item())


def train(cfg, data, out_dir=None, resume=None, max_epochs_run=None, on_epoch=None):
    """Run the training protocol.

    ``data`` is a :class:`Dataset` or a dataset directory. Writes
    ``last.asmc`` / ``best.asmc`` / ``history.csv`` under ``out_dir`` when
    given. ``resume`` is a checkpoint path to continue from.
    ``max_epochs_run`` caps the epochs executed in this call (the schedule is
    still defined by ``train.max_epochs``).
    """
    if not isinstance(data, Dataset):
        data = load_dataset(data)
    tc = cfg.train
    model = build_model(cfg)
    optimizer = make_optimizer(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    res = TrainResult()
    start_epoch, bad = 0, 0
    if resume is not None:
        meta = ckpt_io.unpack(ckpt_io.Checkpoint.load(resume), model, optimizer)
        start_epoch = meta["epoch"] + 1
        bad = meta["bad_count"]
        res.best_metric = meta["best_metric"] if meta["best_metric"] is not None else -math.inf
        res.best_epoch = meta["best_epoch"]
        res.history = meta["history"]
        res.n_validations = meta["n_validations"]

    def meta(epoch):
        return {"epoch": epoch, "bad_count": bad,
                "best_metric": None if res.best_metric == -math.inf else res.best_metric,
                "best_epoch": res.best_epoch, "history": res.history,
                "n_validations": res.n_validations, "seed": tc.seed}

    model.train()
    end = tc.max_epochs if max_epochs_run is None else min(tc.max_epochs, start_epoch + max_epochs_run)
    for epoch in range(start_epoch, end):
        lr = lr_schedule(epoch, tc)
        losses = [train_step(model, optimizer, *sample_batch(data.train, cfg, epoch, it), cfg, lr)
                  for it in range(tc.iters_per_epoch)]
        row = {"epoch": epoch, "lr": f"{lr:.8g}", "train_loss": f"{np.mean(losses):.8f}"}
        res.epochs_run += 1
        validate = (epoch + 1) % tc.val_every == 0 or epoch + 1 == tc.max_epochs
        if validate and data.val:
            rep, _ = evaluate(model, data.val, tc.patch, cfg.data.sw_stride)
            res.n_validations += 1
            for k, name in enumerate(CLASS_NAMES[1:], 1):
                row[f"val_dice_{name}"] = f"{rep.dice_per_class[k]:.6f}"
            row["val_mean"] = f"{rep.avg_fine_with_hard:.6f}"
            if rep.avg_fine_with_hard > res.best_metric + tc.improve_tol:
                res.best_metric, res.best_epoch, bad = rep.avg_fine_with_hard, epoch, 0
                if out is not None:
                    ckpt_io.pack(model, None, cfg.to_dict(), meta(epoch)).save(out / "best.asmc")
            else:
                bad += 1
            log.info("epoch %d lr %.5f loss %.4f val %.4f", epoch, lr, np.mean(losses),
                     rep.avg_fine_with_hard)
        else:
            log.info("epoch %d lr %.5f loss %.4f", epoch, lr, np.mean(losses))
        res.history.append(row)
        if out is not None:
            ckpt_io.pack(model, optimizer, cfg.to_dict(), meta(epoch)).save(out / "last.asmc")
            write_history(out / "history.csv", res.history)
        if on_epoch is not None:
            on_epoch(epoch, row)
        if bad >= tc.patience:
            res.stopped_early = True
            break
    res.model = model
    res.optimizer = optimizer
    return res


def load_model(path):
    """Rebuild a model from a checkpoint's config echo and tensors."""
    ck = ckpt_io.Checkpoint.load(path)
    cfg = RunConfig.from_dict(ck.echo["config"])
    model = ASMUNet(cfg.net)
    ckpt_io.unpack(ck, model)
    model.eval()
    return model, cfg
