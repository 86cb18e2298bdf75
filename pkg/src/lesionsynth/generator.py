"""Two-encoder / two-decoder lesion generator with max-fused latents.

Each modality (T1, FLAIR) has its own U-shaped encoder mapping a 9-channel
patch (filled image + 8 intensity-level masks) to a full-resolution 32-channel
latent. One decoder per output modality is applied to the T1 latent, the FLAIR
latent and their elementwise maximum, giving six outputs; the fused ones are
used at inference time.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import (CheckpointVersionError, ConfigMismatchError, CorruptCheckpointError,
                     EmptyInputError, InvalidConfigError, TrainingDivergedError)
from .masking import IntensityLevelBank
from .volume import BinaryMask3D, NormalizationParams, Volume3D, check_aligned, denormalize

log = logging.getLogger(__name__)

MODALITIES = ("t1", "flair")
LATENTS = ("t1", "flair", "fused")
FORMAT_VERSION = 1

_ARCH_FIELDS = ("patch_size", "input_channels", "latent_channels", "levels", "base_width",
                "activation")


@dataclass(frozen=True)
class GeneratorConfig:
    patch_size: int = 64
    patch_stride: int = 32
    input_channels: int = 9
    latent_channels: int = 32
    levels: int = 3
    base_width: int = 32
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 15
    train_fraction: float = 0.70
    rng_seed: int = 0
    learning_rate: float = 1e-3
    activation: str = "elu"

    def __post_init__(self):
        if self.patch_size % (2 ** self.levels):
            raise InvalidConfigError(
                f"patch_size {self.patch_size} not divisible by 2**levels ({2 ** self.levels})")
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidConfigError("train_fraction must lie in (0, 1)")
        if self.patch_stride < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidConfigError("stride, batch size and epochs must be positive")
        if self.activation not in _ACTIVATIONS:
            raise InvalidConfigError(f"unknown activation {self.activation!r}")

    def architecture(self) -> dict:
        return {k: getattr(self, k) for k in _ARCH_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


_ACTIVATIONS = {"elu": nn.ELU, "relu": nn.ReLU, "leaky_relu": nn.LeakyReLU}


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

def _double_conv(cin, cout, act):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), act(),
                         nn.Conv2d(cout, cout, 3, padding=1), act())


class UNet(nn.Module):
    """U-shaped fully convolutional net with concatenating skip connections.

    Level ``l`` uses ``base_width * 2**l`` channels. On the way up the coarser
    features are upsampled and projected (``up_proj``) before being
    concatenated with the skip features of the same level.
    """

    def __init__(self, in_channels, out_channels, levels=3, base_width=32, activation="elu"):
        super().__init__()
        act = _ACTIVATIONS[activation]
        widths = [base_width * 2 ** i for i in range(levels + 1)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths[:-1]:
            self.down.append(_double_conv(cin, w, act))
            cin = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _double_conv(widths[-2], widths[-1], act)
        self.up_proj = nn.ModuleList()
        self.up = nn.ModuleList()
        for lvl in reversed(range(levels)):
            self.up_proj.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                              nn.Conv2d(widths[lvl + 1], widths[lvl], 1)))
            self.up.append(_double_conv(2 * widths[lvl], widths[lvl], act))
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for proj, block, skip in zip(self.up_proj, self.up, reversed(skips)):
            x = block(torch.cat([proj(x), skip], dim=1))
        return self.head(x)


def _init_weights(module):
    if isinstance(module, nn.Conv2d):
        # fan-in scaled normal init with unit gain
        nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="linear")
        nn.init.zeros_(module.bias)


def fuse(latent_a: torch.Tensor, latent_b: torch.Tensor) -> torch.Tensor:
    """Elementwise maximum of two latents."""
    if latent_a.shape != latent_b.shape:
        raise ValueError(f"latent shapes differ: {tuple(latent_a.shape)} vs {tuple(latent_b.shape)}")
    return torch.maximum(latent_a, latent_b)


class GeneratorModel(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        c = config
        self.encoders = nn.ModuleDict({
            m: UNet(c.input_channels, c.latent_channels, c.levels, c.base_width, c.activation)
            for m in MODALITIES})
        self.decoders = nn.ModuleDict({
            m: UNet(c.latent_channels, 1, c.levels, c.base_width, c.activation)
            for m in MODALITIES})

    def _check_patch(self, patch):
        if patch.dim() == 3:
            patch = patch.unsqueeze(0)
        c = self.config
        if patch.dim() != 4 or patch.shape[1] != c.input_channels \
                or patch.shape[2] != c.patch_size or patch.shape[3] != c.patch_size:
            raise ValueError(f"expected patches of shape (B, {c.input_channels}, {c.patch_size}, "
                             f"{c.patch_size}), got {tuple(patch.shape)}")
        return patch

    def encode(self, modality: str, patch: torch.Tensor) -> torch.Tensor:
        return self.encoders[modality](self._check_patch(patch))

    def decode(self, modality: str, latent: torch.Tensor) -> torch.Tensor:
        return self.decoders[modality](latent)

    def forward(self, t1_patch, flair_patch):
        """Return ``{(decoder, latent): (B, 1, P, P)}`` for all six pairs."""
        t1_patch = self._check_patch(t1_patch)
        flair_patch = self._check_patch(flair_patch)
        if t1_patch.shape != flair_patch.shape:
            raise ValueError("T1 and FLAIR batches differ in shape")
        z_t1 = self.encoders["t1"](t1_patch)
        z_flair = self.encoders["flair"](flair_patch)
        latents = {"t1": z_t1, "flair": z_flair, "fused": fuse(z_t1, z_flair)}
        return {(dec, lat): self.decoders[dec](z) for dec in MODALITIES for lat, z in latents.items()}

    def synthesize_patch(self, t1_patch, flair_patch):
        """Fused-latent outputs only (the inference path)."""
        t1_patch = self._check_patch(t1_patch)
        flair_patch = self._check_patch(flair_patch)
        z = fuse(self.encoders["t1"](t1_patch), self.encoders["flair"](flair_patch))
        return self.decoders["t1"](z), self.decoders["flair"](z)


def build_model(config: GeneratorConfig = GeneratorConfig()) -> GeneratorModel:
    torch.manual_seed(config.rng_seed)
    model = GeneratorModel(config)
    model.apply(_init_weights)
    return model


def generator_loss(outputs: dict, t1_target, flair_target) -> torch.Tensor:
    """Mean of the six per-output MSEs, each against its decoder's modality."""
    targets = {"t1": t1_target, "flair": flair_target}
    terms = []
    for (dec, _lat), out in outputs.items():
        if out.shape != targets[dec].shape:
            raise ValueError(f"output {tuple(out.shape)} vs target {tuple(targets[dec].shape)}")
        terms.append(torch.mean((out - targets[dec]) ** 2))
    return torch.stack(terms).mean()


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------

@dataclass
class PatchSet:
    """Training samples: 9-channel inputs and 1-channel targets per modality."""

    t1_in: np.ndarray
    flair_in: np.ndarray
    t1_target: np.ndarray
    flair_target: np.ndarray
    origins: np.ndarray  # (N, 4): subject, x0, y0, z

    def __len__(self):
        return self.t1_in.shape[0]

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        return cls(*(np.concatenate([getattr(s, f.name) for s in sets]) for f in fields(cls)))

    def subset(self, idx):
        return PatchSet(*(getattr(self, f.name)[idx] for f in fields(self)))


def stack_inputs(filled: Volume3D, bank: IntensityLevelBank) -> np.ndarray:
    """(9, nx, ny, nz) float32: filled image followed by the bands in gamma order."""
    return np.concatenate([filled.data[None].astype(np.float32), bank.stack()])


def _padded(arr, patch, stride):
    """Zero-pad (C, nx, ny, nz) in-plane so any window origin < n fits."""
    _, nx, ny, _ = arr.shape
    px = max(0, (nx - 1) // stride * stride + patch - nx)
    py = max(0, (ny - 1) // stride * stride + patch - ny)
    return np.pad(arr, ((0, 0), (0, px), (0, py), (0, 0)))


def patch_origins(brain: BinaryMask3D, patch: int, stride: int):
    """Axial window origins (x0, y0, z) whose center voxel is inside the brain."""
    nx, ny, nz = brain.shape
    half = patch // 2
    out = []
    for z in range(nz):
        for x0 in range(0, nx, stride):
            for y0 in range(0, ny, stride):
                cx, cy = x0 + half, y0 + half
                if cx < nx and cy < ny and brain.data[cx, cy, z]:
                    out.append((x0, y0, z))
    return out


def extract_patches(t1: Volume3D, flair: Volume3D, filled_t1: Volume3D, filled_flair: Volume3D,
                    bank: IntensityLevelBank, brain: BinaryMask3D, config: GeneratorConfig,
                    subject: int = 0) -> PatchSet:
    check_aligned(t1, flair, filled_t1, filled_flair, brain, bank.wmh_mask)
    if not brain.data.any():
        raise EmptyInputError("brain mask is empty")
    p, s = config.patch_size, config.patch_stride
    origins = patch_origins(brain, p, s)
    ins_t1 = _padded(stack_inputs(filled_t1, bank), p, s)
    ins_fl = _padded(stack_inputs(filled_flair, bank), p, s)
    tgt_t1 = _padded(t1.data[None].astype(np.float32), p, s)
    tgt_fl = _padded(flair.data[None].astype(np.float32), p, s)

    def cut(arr):
        if not origins:
            return np.zeros((0, arr.shape[0], p, p), np.float32)
        return np.stack([arr[:, x:x + p, y:y + p, z] for x, y, z in origins])

    org = np.array([(subject, *o) for o in origins], dtype=np.int64).reshape(-1, 4)
    return PatchSet(cut(ins_t1), cut(ins_fl), cut(tgt_t1), cut(tgt_fl), org)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to improve the best loss."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_epoch: int = -1
    stopped_early: bool = False
    settings: dict = field(default_factory=dict)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tr, va in self.epochs:
            w.writerow([e, repr(float(tr)), repr(float(va))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def split_indices(n: int, train_fraction: float, seed: int):
    if n < 2:
        raise EmptyInputError(f"need at least 2 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(n - 1, max(1, int(round(train_fraction * n))))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _batches(idx, batch_size):
    for i in range(0, len(idx), batch_size):
        yield idx[i:i + batch_size]


def _tensors(patches: PatchSet, idx):
    return (torch.from_numpy(patches.t1_in[idx]), torch.from_numpy(patches.flair_in[idx]),
            torch.from_numpy(patches.t1_target[idx]), torch.from_numpy(patches.flair_target[idx]))


def train(patches: PatchSet, config: GeneratorConfig = GeneratorConfig(),
          model: GeneratorModel | None = None):
    """Fit the generator; returns ``(best-validation model, TrainingHistory)``."""
    n = len(patches)
    train_idx, val_idx = split_indices(n, config.train_fraction, config.rng_seed)
    if model is None:
        model = build_model(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng([config.rng_seed, 1])
    stopper = EarlyStopping(config.patience)
    history = TrainingHistory(settings={
        "optimizer": "adam", "learning_rate": config.learning_rate,
        "init": "lecun_normal_fan_in", "n_train": len(train_idx), "n_val": len(val_idx),
        "config": asdict(config)})
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(config.max_epochs):
        model.train()
        order = rng.permutation(train_idx)
        total = 0.0
        for b in _batches(order, config.batch_size):
            x1, x2, y1, y2 = _tensors(patches, b)
            opt.zero_grad()
            loss = generator_loss(model(x1, x2), y1, y2)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}: {loss.item()}")
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
        train_loss = total / len(train_idx)
        val_loss = evaluate_loss(model, patches, val_idx, config.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.epochs.append((epoch, train_loss, val_loss))
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            history.stopped_early = True
            break

    model.load_state_dict(best_state)
    model.eval()
    history.best_epoch = stopper.best_epoch
    return model, history


@torch.no_grad()
def evaluate_loss(model, patches: PatchSet, idx, batch_size=32) -> float:
    model.eval()
    total = 0.0
    for b in _batches(np.asarray(idx), batch_size):
        x1, x2, y1, y2 = _tensors(patches, b)
        total += generator_loss(model(x1, x2), y1, y2).item() * len(b)
    return total / max(len(idx), 1)


# --------------------------------------------------------------------------
# whole-volume inference
# --------------------------------------------------------------------------

def tile_origins(n: int, patch: int, stride: int):
    """Stride-spaced origins along one axis, plus a flush last tile when needed."""
    if n <= patch:
        return [0]
    origins = list(range(0, n - patch + 1, stride))
    if origins[-1] + patch < n:
        origins.append(n - patch)
    return origins


@torch.no_grad()
def synthesize(model: GeneratorModel, filled_t1: Volume3D, filled_flair: Volume3D,
               bank: IntensityLevelBank, brain: BinaryMask3D,
               norms: tuple[NormalizationParams, NormalizationParams] | None = None,
               batch_size: int = 32):
    """Tile every axial slice, average the overlapping fused outputs inside the
    brain and copy the input elsewhere. With ``norms`` the result is mapped
    back to the original intensity range."""
    check_aligned(filled_t1, filled_flair, brain, bank.wmh_mask)
    model.eval()
    p, s = model.config.patch_size, model.config.patch_stride
    nx, ny, nz = brain.shape
    ins_t1 = stack_inputs(filled_t1, bank)
    ins_fl = stack_inputs(filled_flair, bank)
    px, py = max(p - nx, 0), max(p - ny, 0)
    if px or py:
        ins_t1 = np.pad(ins_t1, ((0, 0), (0, px), (0, py), (0, 0)))
        ins_fl = np.pad(ins_fl, ((0, 0), (0, px), (0, py), (0, 0)))
    acc = np.zeros((2, nx + px, ny + py, nz), np.float64)
    cnt = np.zeros((nx + px, ny + py, nz), np.float64)
    tiles = [(x, y, z) for z in range(nz) if brain.data[:, :, z].any()
             for x in tile_origins(nx, p, s) for y in tile_origins(ny, p, s)]
    for i in range(0, len(tiles), batch_size):
        chunk = tiles[i:i + batch_size]
        a = torch.from_numpy(np.stack([ins_t1[:, x:x + p, y:y + p, z] for x, y, z in chunk]))
        b = torch.from_numpy(np.stack([ins_fl[:, x:x + p, y:y + p, z] for x, y, z in chunk]))
        out_t1, out_fl = model.synthesize_patch(a, b)
        out_t1 = out_t1.numpy()
        out_fl = out_fl.numpy()
        for j, (x, y, z) in enumerate(chunk):
            acc[0, x:x + p, y:y + p, z] += out_t1[j, 0]
            acc[1, x:x + p, y:y + p, z] += out_fl[j, 0]
            cnt[x:x + p, y:y + p, z] += 1
    cnt = cnt[:nx, :ny]
    inside = brain.data & (cnt > 0)
    results = []
    for k, filled in enumerate((filled_t1, filled_flair)):
        data = filled.data.copy()
        data[inside] = acc[k, :nx, :ny][inside] / cnt[inside]
        vol = filled.with_data(data)
        if norms is not None:
            vol = denormalize(vol, norms[k])
        results.append(vol)
    return tuple(results)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
# Layout: an uncompressed .npz (zip) archive with
#   __meta__.npy      json string {"format_version", "config", "checksum", "names"}
#   p{i}.npy          parameter arrays (float32), in state_dict order

def save_model(model: GeneratorModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    names = list(state)
    meta = {"format_version": FORMAT_VERSION, "config": asdict(model.config),
            "checksum": parameter_checksum(model), "names": names}
    arrays = {f"p{i}": state[n].detach().cpu().numpy() for i, n in enumerate(names)}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_model(path, expected_config: GeneratorConfig | None = None) -> GeneratorModel:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            meta = json.loads(str(npz["__meta__"]))
            arrays = [npz[f"p{i}"] for i in range(len(meta["names"]))]
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, KeyError, EOFError, OSError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {meta.get('format_version')} != supported {FORMAT_VERSION}")
    config = GeneratorConfig.from_dict(meta["config"])
    if expected_config is not None and expected_config.architecture() != config.architecture():
        raise ConfigMismatchError(
            f"checkpoint architecture {config.architecture()} != requested "
            f"{expected_config.architecture()}")
    model = GeneratorModel(config)
    state = model.state_dict()
    if list(state) != meta["names"]:
        raise CorruptCheckpointError("checkpoint parameter names do not match the architecture")
    try:
        model.load_state_dict({n: torch.from_numpy(np.array(a)) for n, a in zip(meta["names"], arrays)})
    except RuntimeError as exc:
        raise CorruptCheckpointError(str(exc)) from exc
    if parameter_checksum(model) != meta["checksum"]:
        raise CorruptCheckpointError("parameter checksum mismatch")
    model.eval()
    return model
