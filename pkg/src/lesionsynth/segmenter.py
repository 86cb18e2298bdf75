"""Small patch-based lesion segmenter used as the downstream measuring stick.

Two-channel (T1, FLAIR) axial patches, a shallow U-Net, BCE + soft-Dice loss,
and the generator's patch/split/early-stopping conventions.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import DegenerateLabelsError, EmptyInputError, InvalidConfigError, TrainingDivergedError
from .generator import (EarlyStopping, TrainingHistory, UNet, _batches, _init_weights, _padded,
                        patch_origins, split_indices, tile_origins)
from .volume import BinaryMask3D, Volume3D, check_aligned


@dataclass(frozen=True)
class SegmenterConfig:
    patch_size: int = 32
    patch_stride: int = 16
    levels: int = 2
    base_width: int = 8
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 15
    train_fraction: float = 0.70
    learning_rate: float = 1e-3
    rng_seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.patch_size % (2 ** self.levels):
            raise InvalidConfigError("patch_size must be divisible by 2**levels")
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidConfigError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class LabeledImage:
    t1: Volume3D
    flair: Volume3D
    lesion: BinaryMask3D
    brain: BinaryMask3D


def _image_patches(img: LabeledImage, config: SegmenterConfig):
    check_aligned(img.t1, img.flair, img.lesion, img.brain)
    p, s = config.patch_size, config.patch_stride
    origins = patch_origins(img.brain, p, s)
    x = _padded(np.stack([img.t1.data, img.flair.data]).astype(np.float32), p, s)
    y = _padded(img.lesion.data[None].astype(np.float32), p, s)
    xs = np.stack([x[:, a:a + p, b:b + p, z] for a, b, z in origins])
    ys = np.stack([y[:, a:a + p, b:b + p, z] for a, b, z in origins])
    return xs, ys


def build_segmenter(config: SegmenterConfig) -> nn.Module:
    torch.manual_seed(config.rng_seed)
    model = UNet(2, 1, config.levels, config.base_width, "relu")
    model.apply(_init_weights)
    return model


def _loss(logits, target):
    bce = nn.functional.binary_cross_entropy_with_logits(logits, target)
    prob = torch.sigmoid(logits)
    inter = (prob * target).sum()
    dice = 1.0 - (2 * inter + 1.0) / (prob.sum() + target.sum() + 1.0)
    return bce + dice


def train_segmenter(images, config: SegmenterConfig = SegmenterConfig()):
    """Train on a list of LabeledImage; returns ``(model, TrainingHistory)``."""
    images = list(images)
    if not images:
        raise EmptyInputError("need at least one labelled image")
    if not any(img.lesion.data.any() for img in images):
        raise DegenerateLabelsError("training data contains no lesion voxels")
    parts = [_image_patches(img, config) for img in images]
    xs = np.concatenate([p[0] for p in parts])
    ys = np.concatenate([p[1] for p in parts])
    train_idx, val_idx = split_indices(len(xs), config.train_fraction, config.rng_seed)
    model = build_segmenter(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng([config.rng_seed, 2])
    stopper = EarlyStopping(config.patience)
    history = TrainingHistory(settings={"config": asdict(config), "n_train": len(train_idx),
                                        "n_val": len(val_idx)})
    best = copy.deepcopy(model.state_dict())
    for epoch in range(config.max_epochs):
        model.train()
        total = 0.0
        for b in _batches(rng.permutation(train_idx), config.batch_size):
            opt.zero_grad()
            loss = _loss(model(torch.from_numpy(xs[b])), torch.from_numpy(ys[b]))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"segmenter loss became non-finite at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
        model.eval()
        with torch.no_grad():
            val = sum(_loss(model(torch.from_numpy(xs[b])), torch.from_numpy(ys[b])).item() * len(b)
                      for b in _batches(val_idx, config.batch_size)) / len(val_idx)
        if not math.isfinite(val):
            raise TrainingDivergedError(f"segmenter validation loss non-finite at epoch {epoch}")
        history.epochs.append((epoch, total / len(train_idx), val))
        stop = stopper.update(epoch, val)
        if stopper.best_epoch == epoch:
            best = copy.deepcopy(model.state_dict())
        if stop:
            history.stopped_early = True
            break
    model.load_state_dict(best)
    model.eval()
    history.best_epoch = stopper.best_epoch
    return model, history


@torch.no_grad()
def segment(model: nn.Module, t1: Volume3D, flair: Volume3D, brain: BinaryMask3D,
            config: SegmenterConfig = SegmenterConfig()) -> BinaryMask3D:
    """Tile, average probabilities, threshold, restrict to the brain."""
    check_aligned(t1, flair, brain)
    model.eval()
    p, s = config.patch_size, config.patch_stride
    nx, ny, nz = brain.shape
    x = np.stack([t1.data, flair.data]).astype(np.float32)
    px, py = max(p - nx, 0), max(p - ny, 0)
    x = np.pad(x, ((0, 0), (0, px), (0, py), (0, 0)))
    acc = np.zeros((nx + px, ny + py, nz))
    cnt = np.zeros_like(acc)
    tiles = [(a, b, z) for z in range(nz) for a in tile_origins(nx, p, s) for b in tile_origins(ny, p, s)]
    for i in range(0, len(tiles), config.batch_size):
        chunk = tiles[i:i + config.batch_size]
        batch = torch.from_numpy(np.stack([x[:, a:a + p, b:b + p, z] for a, b, z in chunk]))
        prob = torch.sigmoid(model(batch)).numpy()
        for j, (a, b, z) in enumerate(chunk):
            acc[a:a + p, b:b + p, z] += prob[j, 0]
            cnt[a:a + p, b:b + p, z] += 1
    prob = acc[:nx, :ny] / np.maximum(cnt[:nx, :ny], 1)
    return BinaryMask3D((prob > config.threshold) & brain.data, geometry=brain.geometry)
