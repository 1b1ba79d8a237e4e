"""Residual encoders, the three-encoder fusion classifier, and the
freeze-then-fuse training protocol.

One compact 2-2-2-2 residual encoder per modality (width-configurable so
the 512-feature scale and a fast test scale share every dimension
contract), a single linear head over the concatenated features, and an
input-agnostic mode where missing modalities arrive as black images.
Frozen encoders are bit-frozen: gradients off, batch-norm statistics
locked, verified by hashing around every head-training run.
"""

from __future__ import annotations

import hashlib
import io
import json
import random
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .core import LABELS, stable_json
from .dataset import SliceImage

MODES = ("PerModality", "Fusion", "InputAgnostic")
CHECKPOINT_MAGIC = b"NFUSE\x00"
CHECKPOINT_VERSION = 1


class ModelError(Exception):
    pass


class ShapeMismatch(ModelError):
    pass


class WidthMismatch(ModelError):
    pass


class ModeViolation(ModelError):
    pass


class EmptyDataset(ModelError):
    pass


class CheckpointError(ModelError):
    pass


#### architecture ####


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResidualEncoder(nn.Module):
    """7x7/2 stem, max-pool, stages of widths (w, 2w, 4w, 8w) with two
    residual blocks each, global average pooling; features have length 8w
    for any input resolution."""

    def __init__(self, width: int = 64):
        super().__init__()
        if width < 1:
            raise ValueError(f"width must be >= 1, got {width}")
        self.width = width
        self.frozen = False
        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        blocks = []
        in_ch = width
        for i, mult in enumerate((1, 2, 4, 8)):
            out_ch = width * mult
            blocks.append(ResidualBlock(in_ch, out_ch, 1 if i == 0 else 2))
            blocks.append(ResidualBlock(out_ch, out_ch, 1))
            in_ch = out_ch
        self.stages = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)

    @property
    def feature_length(self) -> int:
        return 8 * self.width

    def forward(self, x):
        return torch.flatten(self.pool(self.stages(self.stem(x))), 1)

    def freeze(self) -> "ResidualEncoder":
        self.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def train(self, mode: bool = True):
        # a frozen encoder never re-enters training mode: running BN
        # statistics are part of the bitwise freeze contract
        return super().train(mode and not self.frozen)


def make_encoder(width: int, seed: int = 0) -> ResidualEncoder:
    """Seed-deterministic fresh encoder."""
    torch.manual_seed(seed)
    return ResidualEncoder(width)


class PerModalityClassifier(nn.Module):
    """Encoder plus its temporary linear head, used both during encoder
    pretraining and for the single-modality report columns."""

    def __init__(self, encoder: ResidualEncoder, seed: int = 0):
        super().__init__()
        self.encoder = encoder
        torch.manual_seed(seed)
        self.head = nn.Linear(encoder.feature_length, len(LABELS))

    def forward(self, x):
        return self.head(self.encoder(x))


class FusionModel(nn.Module):
    """Three modality encoders feeding one common linear head.

    The head sees concat(t1w, fa, md) features: 3 * 8w inputs (1536 at
    width 64). Head initialization is the fan-in uniform rule
    (+-1/sqrt(fan_in)), seeded.
    """

    def __init__(
        self,
        t1w_encoder: ResidualEncoder,
        fa_encoder: ResidualEncoder,
        md_encoder: ResidualEncoder,
        mode: str = "Fusion",
        seed: int = 0,
    ):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode {mode!r} not in {MODES}")
        widths = (t1w_encoder.width, fa_encoder.width, md_encoder.width)
        if len(set(widths)) != 1:
            raise WidthMismatch(f"encoder widths differ: {widths}")
        self.mode = mode
        self.t1w_encoder = t1w_encoder
        self.fa_encoder = fa_encoder
        self.md_encoder = md_encoder
        torch.manual_seed(seed)
        self.head = nn.Linear(3 * t1w_encoder.feature_length, len(LABELS))

    def encoders(self):
        return (self.t1w_encoder, self.fa_encoder, self.md_encoder)

    def encode(self, t1w, fa, md):
        return torch.cat(
            [self.t1w_encoder(t1w), self.fa_encoder(fa), self.md_encoder(md)], dim=1
        )

    def forward(self, t1w, fa, md):
        return self.head(self.encode(t1w, fa, md))


def build_fusion(
    t1w_encoder: ResidualEncoder,
    fa_encoder: ResidualEncoder,
    md_encoder: ResidualEncoder,
    seed: int = 0,
    mode: str = "Fusion",
) -> FusionModel:
    """Freeze the three pretrained encoders under a fresh seeded head."""
    if mode not in ("Fusion", "InputAgnostic"):
        raise ValueError(f"build_fusion mode must be Fusion or InputAgnostic, got {mode!r}")
    for enc in (t1w_encoder, fa_encoder, md_encoder):
        enc.freeze()
    return FusionModel(t1w_encoder, fa_encoder, md_encoder, mode, seed)


#### samples and tensors ####


@dataclass
class FusionSample:
    """One subject's three aligned slice images (Black = missing)."""

    t1w: SliceImage
    fa: SliceImage
    md: SliceImage
    label: str
    subject_id: str = ""

    def images(self):
        return (self.t1w, self.fa, self.md)

    def has_black(self) -> bool:
        return any(im.modality == "Black" for im in self.images())


def _to_tensor(image: SliceImage) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.pixels.transpose(2, 0, 1)))


def _stack(images) -> torch.Tensor:
    shapes = {im.pixels.shape for im in images}
    if len(shapes) != 1:
        raise ShapeMismatch(f"images must share one shape, got {sorted(map(str, shapes))}")
    return torch.stack([_to_tensor(im) for im in images])


def forward(model: FusionModel, t1w: SliceImage, fa: SliceImage, md: SliceImage) -> np.ndarray:
    """Class scores for one sample; deterministic given parameters."""
    shapes = {t1w.pixels.shape, fa.pixels.shape, md.pixels.shape}
    if len(shapes) != 1:
        raise ShapeMismatch(f"modalities must share one shape, got {sorted(map(str, shapes))}")
    model.eval()
    with torch.no_grad():
        scores = model(*(_stack([im]) for im in (t1w, fa, md)))
    return scores.squeeze(0).numpy()


def predict(model: FusionModel, sample: FusionSample) -> str:
    """argmax label; ties break toward the lowest class index."""
    scores = forward(model, sample.t1w, sample.fa, sample.md)
    return LABELS[int(np.argmax(scores))]


#### training ####


@dataclass
class TrainConfig:
    epochs: int
    seed: int = 0
    batch_size: int = 16
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass
class TrainTrace:
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    val_accuracies: list = field(default_factory=list)
    best_epoch: int | None = None

    def to_csv(self) -> str:
        lines = ["epoch,mean_loss,val_accuracy"]
        for i, loss in enumerate(self.epoch_losses):
            val = f"{self.val_accuracies[i]:.6f}" if i < len(self.val_accuracies) else ""
            lines.append(f"{i},{loss:.8f},{val}")
        return "\n".join(lines) + "\n"


def _label_tensor(labels) -> torch.Tensor:
    return torch.tensor([LABELS.index(lab) for lab in labels], dtype=torch.int64)


def _batched_accuracy(module, x, y, batch_size: int = 64) -> float:
    module.eval()
    hits = 0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            pred = module(x[i : i + batch_size]).argmax(dim=1)
            hits += int((pred == y[i : i + batch_size]).sum())
    return hits / len(x)


def _optimizer(params, config: TrainConfig):
    return torch.optim.Adam(
        params, lr=config.learning_rate, betas=config.betas, eps=config.eps
    )


def pretrain_encoder(encoder: ResidualEncoder, images, config: TrainConfig):
    """Train encoder + a temporary head on one modality's images.

    A 10% subject-wise holdout (when the subject count allows one) scores
    each epoch; the best-validation-epoch weights are restored at the end
    and recorded as trace.best_epoch. Returns (classifier, trace) — the
    classifier holds the trained encoder and the temporary head kept for
    single-modality evaluation.
    """
    images = list(images)
    if not images:
        raise EmptyDataset("no images to pretrain on")
    if encoder.frozen:
        raise ModeViolation("cannot pretrain a frozen encoder")
    modalities = {im.modality for im in images}
    if len(modalities) != 1:
        raise ModeViolation(f"pretraining needs a single modality, got {sorted(modalities)}")

    subjects = sorted({im.subject_id for im in images})
    n_val = int(len(subjects) * config.validation_fraction)
    val_subjects = set()
    if n_val >= 1:
        shuffled = list(subjects)
        random.Random(f"{config.seed}|holdout").shuffle(shuffled)
        val_subjects = set(shuffled[:n_val])
    train_images = [im for im in images if im.subject_id not in val_subjects]
    val_images = [im for im in images if im.subject_id in val_subjects]
    if not train_images:
        train_images, val_images = images, []

    x_train = _stack(train_images)
    y_train = _label_tensor([im.label for im in train_images])
    if val_images:
        x_val = _stack(val_images)
        y_val = _label_tensor([im.label for im in val_images])

    clf = PerModalityClassifier(encoder, seed=config.seed)
    opt = _optimizer(clf.parameters(), config)
    loss_fn = nn.CrossEntropyLoss()
    gen = torch.Generator().manual_seed(config.seed)
    trace = TrainTrace()
    best_acc, best_state = -1.0, None
    for epoch in range(config.epochs):
        clf.train()
        perm = torch.randperm(len(x_train), generator=gen)
        epoch_losses = []
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i : i + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(clf(x_train[idx]), y_train[idx])
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        trace.step_losses.extend(epoch_losses)
        trace.epoch_losses.append(sum(epoch_losses) / len(epoch_losses))
        if val_images:
            acc = _batched_accuracy(clf, x_val, y_val)
            trace.val_accuracies.append(acc)
            if acc > best_acc:
                best_acc = acc
                best_state = {k: v.detach().clone() for k, v in clf.state_dict().items()}
                trace.best_epoch = epoch
    if best_state is not None:
        clf.load_state_dict(best_state)
    return clf, trace


def state_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer (names, dtypes, bytes)."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def train_head(model: FusionModel, samples, config: TrainConfig):
    """Optimize the head on frozen-encoder features.

    Fusion mode refuses Black placeholders; InputAgnostic accepts them.
    Features are computed once (encoders are frozen, so this is exact) and
    the encoders' bitwise integrity is verified by hashing before and
    after. Returns (model, trace).
    """
    samples = list(samples)
    if not samples:
        raise EmptyDataset("no samples to train on")
    if model.mode == "PerModality":
        raise ModeViolation("train_head requires a Fusion or InputAgnostic model")
    if model.mode == "Fusion":
        for s in samples:
            if s.has_black():
                raise ModeViolation(
                    f"Fusion mode got a Black image for subject {s.subject_id!r}"
                )
    for enc in model.encoders():
        if not enc.frozen:
            raise ModeViolation("all encoders must be frozen before head training")
    shapes = {im.pixels.shape for s in samples for im in s.images()}
    if len(shapes) != 1:
        raise ShapeMismatch(f"samples must share one image shape, got {sorted(map(str, shapes))}")
    hashes_before = [state_hash(enc) for enc in model.encoders()]

    model.eval()
    feats = []
    with torch.no_grad():
        for i in range(0, len(samples), 32):
            chunk = samples[i : i + 32]
            feats.append(
                model.encode(
                    _stack([s.t1w for s in chunk]),
                    _stack([s.fa for s in chunk]),
                    _stack([s.md for s in chunk]),
                )
            )
    x = torch.cat(feats)
    y = _label_tensor([s.label for s in samples])

    opt = _optimizer(model.head.parameters(), config)
    loss_fn = nn.CrossEntropyLoss()
    gen = torch.Generator().manual_seed(config.seed)
    trace = TrainTrace()
    for _ in range(config.epochs):
        perm = torch.randperm(len(x), generator=gen)
        epoch_losses = []
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i : i + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(model.head(x[idx]), y[idx])
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        trace.step_losses.extend(epoch_losses)
        trace.epoch_losses.append(sum(epoch_losses) / len(epoch_losses))

    hashes_after = [state_hash(enc) for enc in model.encoders()]
    if hashes_before != hashes_after:
        raise ModelError("frozen encoder parameters changed during head training")
    return model, trace


#### checkpoints ####


def save_checkpoint(path, state_dict: dict, metadata: dict):
    """Versioned container: magic, version, JSON metadata, torch payload."""
    buf = io.BytesIO()
    torch.save(state_dict, buf)
    meta = stable_json(metadata).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(meta)))
        f.write(meta)
        f.write(buf.getvalue())


def _read_header(f, path):
    magic = f.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic {magic!r})")
    raw = f.read(6)
    if len(raw) != 6:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    version, meta_len = struct.unpack("<HI", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta_raw = f.read(meta_len)
    if len(meta_raw) != meta_len:
        raise CheckpointError(f"{path}: truncated checkpoint metadata")
    try:
        return json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint metadata") from e


def read_checkpoint_metadata(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def load_checkpoint(path):
    """(metadata, state_dict) from a checkpoint file."""
    with open(path, "rb") as f:
        metadata = _read_header(f, path)
        payload = f.read()
    try:
        state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"{path}: corrupt checkpoint payload") from e
    return metadata, state


def save_classifier(path, clf: PerModalityClassifier, metadata: dict):
    meta = dict(metadata)
    meta.setdefault("kind", "per_modality")
    meta["width"] = clf.encoder.width
    save_checkpoint(path, clf.state_dict(), meta)


def load_classifier(path):
    """(classifier, metadata); the encoder arrives unfrozen."""
    metadata, state = load_checkpoint(path)
    if metadata.get("kind") != "per_modality":
        raise CheckpointError(f"{path}: expected a per-modality checkpoint")
    clf = PerModalityClassifier(ResidualEncoder(int(metadata["width"])))
    clf.load_state_dict(state)
    return clf, metadata


def save_fusion(path, model: FusionModel, metadata: dict):
    meta = dict(metadata)
    meta.setdefault("kind", "fusion")
    meta["mode"] = model.mode
    meta["width"] = model.t1w_encoder.width
    save_checkpoint(path, model.state_dict(), meta)


def load_fusion(path):
    """(model, metadata) with encoders frozen, ready for inference."""
    metadata, state = load_checkpoint(path)
    if metadata.get("kind") != "fusion":
        raise CheckpointError(f"{path}: expected a fusion checkpoint")
    width = int(metadata["width"])
    encoders = [ResidualEncoder(width) for _ in range(3)]
    model = FusionModel(*encoders, mode=metadata["mode"])
    model.load_state_dict(state)
    for enc in model.encoders():
        enc.freeze()
    return model, metadata


def load_external_encoder(path, width: int) -> ResidualEncoder:
    """Escape hatch: a raw torch state_dict of externally supplied
    encoder weights (must match ResidualEncoder(width) exactly)."""
    encoder = ResidualEncoder(width)
    state = torch.load(path, map_location="cpu", weights_only=True)
    encoder.load_state_dict(state)
    return encoder
