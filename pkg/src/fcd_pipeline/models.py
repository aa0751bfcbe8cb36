"""Multi-view patch models: shared encoder, autoencoder pretraining,
patch classifier, and the specific-to-localization ensemble.

The encoder has one convolutional head per active view; each head
consumes that view's (crop, mirrored-crop) channel pair, head outputs are
flattened, concatenated, and passed through a single linear map to the
latent vector. The autoencoder mirrors this with one transposed-conv tail
per view pair, so it pretrains the encoder on unlabeled subjects; the
classifier stacks a small sigmoid head on the same encoder and trains
with binary cross-entropy against hard or soft labels.

All training is deterministic for a fixed (data, config, seed) on a given
platform: weight init is seeded through the encoder config, shuffling
through a derived generator, and no stochastic layers are used.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .patching import LabeledPatch, canonical_views
from .seeding import checksum_lines, derive_seed

logger = logging.getLogger(__name__)

DEFAULT_CLASSIFIER_EPOCHS = 30
DEFAULT_AUTOENCODER_EPOCHS = 20


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the shared multi-head encoder."""

    views: tuple[str, ...] = ("axial",)
    h: int = 24
    w: int = 40
    head_channels: tuple[int, ...] = (16, 32)
    latent_dim: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "views", canonical_views(self.views))
        object.__setattr__(self, "head_channels", tuple(int(c) for c in self.head_channels))
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if len(self.head_channels) < 1 or any(c < 1 for c in self.head_channels):
            raise ValueError("head_channels must be non-empty positive widths")

    @property
    def channels(self) -> int:
        return 2 * len(self.views)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.h, self.w)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    ``epochs=None`` resolves to the context default: 30 for classifier
    training, 20 for autoencoder pretraining.
    """

    epochs: int | None = None
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


@dataclass(frozen=True)
class TrainingFingerprint:
    seed: int
    epochs: int
    data_checksum: str


def dataset_checksum(data: Sequence[LabeledPatch]) -> str:
    """Order-insensitive checksum of patch identities and labels."""
    return checksum_lines(f"{p.spec.identity()}|label={p.label:.12g}" for p in data)


# ---------------------------------------------------------------------------
# Network definitions
# ---------------------------------------------------------------------------


def _size_sequence(h: int, w: int, n_layers: int) -> list[tuple[int, int]]:
    sizes = [(h, w)]
    for _ in range(n_layers):
        ph, pw = sizes[-1]
        sizes.append(((ph + 1) // 2, (pw + 1) // 2))
    return sizes


class _ViewHead(nn.Module):
    """Per-view convolution stack over a (crop, mirrored-crop) channel pair."""

    def __init__(self, head_channels: tuple[int, ...]):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 2
        for out_ch in head_channels:
            layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1))
            layers.append(nn.ReLU())
            in_ch = out_ch
        self.convs = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.convs(x), 1)


class MultiViewEncoder(nn.Module):
    """One head per view; concatenated head features mapped linearly to latent."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        sizes = _size_sequence(config.h, config.w, len(config.head_channels))
        self.head_out_hw = sizes[-1]
        self.head_feature_size = config.head_channels[-1] * sizes[-1][0] * sizes[-1][1]
        total = self.head_feature_size * len(config.views)
        if config.latent_dim > total:
            logger.warning(
                "latent_dim %d exceeds total head feature size %d", config.latent_dim, total
            )
        self.heads = nn.ModuleList(_ViewHead(config.head_channels) for _ in config.views)
        self.to_latent = nn.Linear(total, config.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        parts = [head(x[:, 2 * i : 2 * i + 2]) for i, head in enumerate(self.heads)]
        return self.to_latent(torch.cat(parts, dim=1))


class _ViewTail(nn.Module):
    """Transposed-convolution stack restoring one view's channel pair."""

    def __init__(self, head_channels: tuple[int, ...], sizes: list[tuple[int, int]]):
        super().__init__()
        chans = (2,) + head_channels
        layers: list[nn.Module] = []
        # Walk the encoder's layer stack in reverse, restoring each size.
        for i in range(len(head_channels) - 1, -1, -1):
            in_hw, out_hw = sizes[i + 1], sizes[i]
            out_pad = (out_hw[0] - (2 * in_hw[0] - 1), out_hw[1] - (2 * in_hw[1] - 1))
            layers.append(
                nn.ConvTranspose2d(
                    chans[i + 1], chans[i], kernel_size=3, stride=2, padding=1, output_padding=out_pad
                )
            )
            if i > 0:
                layers.append(nn.ReLU())
        self.deconvs = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.deconvs(x)


class MultiViewDecoder(nn.Module):
    """Mirror of the encoder: latent -> per-view tails -> stacked channels."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        sizes = _size_sequence(config.h, config.w, len(config.head_channels))
        self.bottom_hw = sizes[-1]
        self.head_feature_size = config.head_channels[-1] * sizes[-1][0] * sizes[-1][1]
        total = self.head_feature_size * len(config.views)
        self.from_latent = nn.Linear(config.latent_dim, total)
        self.tails = nn.ModuleList(_ViewTail(config.head_channels, sizes) for _ in config.views)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        feats = self.from_latent(z)
        c_last = self.config.head_channels[-1]
        outputs = []
        for i, tail in enumerate(self.tails):
            part = feats[:, i * self.head_feature_size : (i + 1) * self.head_feature_size]
            part = part.view(-1, c_last, self.bottom_hw[0], self.bottom_hw[1])
            outputs.append(tail(part))
        return torch.cat(outputs, dim=1)


class AutoencoderNet(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.encoder = MultiViewEncoder(config)
        self.decoder = MultiViewDecoder(config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


class ClassifierNet(nn.Module):
    """Encoder plus a small head; forward returns the pre-sigmoid logit."""

    def __init__(self, config: EncoderConfig, head_hidden: int = 64):
        super().__init__()
        self.encoder = MultiViewEncoder(config)
        self.head = nn.Sequential(
            nn.Linear(config.latent_dim, head_hidden),
            nn.ReLU(),
            nn.Linear(head_hidden, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x)).squeeze(-1)


# ---------------------------------------------------------------------------
# Model wrappers
# ---------------------------------------------------------------------------


@dataclass
class AutoencoderModel:
    net: AutoencoderNet
    config: EncoderConfig
    loss_trace: list[float] = field(default_factory=list)


@dataclass
class ClassifierModel:
    net: ClassifierNet
    config: EncoderConfig
    fingerprint: TrainingFingerprint | None = None
    loss_trace: list[float] = field(default_factory=list)


@dataclass
class LocalizationEnsemble:
    temporal_model: ClassifierModel
    non_temporal_model: ClassifierModel


def build_encoder(c: EncoderConfig) -> MultiViewEncoder:
    """Construct the encoder with weights drawn from the config seed."""
    torch.manual_seed(c.seed)
    return MultiViewEncoder(c)


def _build_autoencoder_net(c: EncoderConfig) -> AutoencoderNet:
    torch.manual_seed(c.seed)
    return AutoencoderNet(c)


def _build_classifier_net(c: EncoderConfig) -> ClassifierNet:
    torch.manual_seed(c.seed)
    return ClassifierNet(c)


def _make_optimizer(net: nn.Module, t: TrainConfig) -> torch.optim.Optimizer:
    if t.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=t.learning_rate)
    return torch.optim.SGD(net.parameters(), lr=t.learning_rate)


def _stack_tensor(stacks: Sequence[np.ndarray], c: EncoderConfig) -> torch.Tensor:
    arr = np.ascontiguousarray(np.stack(stacks, axis=0), dtype=np.float32)
    if arr.shape[1:] != c.input_shape:
        raise ValueError(f"stack shape {arr.shape[1:]} does not match config {c.input_shape}")
    return torch.from_numpy(arr)


def _run_training(
    net: nn.Module,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    loss_fn: nn.Module,
    t: TrainConfig,
    epochs: int,
    shuffle_seed: int,
) -> list[float]:
    """Seeded minibatch training; returns [initial eval loss, per-epoch losses...]."""
    opt = _make_optimizer(net, t)
    n = inputs.shape[0]
    with torch.no_grad():
        trace = [float(loss_fn(net(inputs), targets))]
    gen = torch.Generator().manual_seed(shuffle_seed)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, t.batch_size):
            idx = perm[start : start + t.batch_size]
            opt.zero_grad()
            loss = loss_fn(net(inputs[idx]), targets[idx])
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
        trace.append(total / n)
    return trace


def pretrain_autoencoder(
    stacks: Sequence[np.ndarray], c: EncoderConfig, t: TrainConfig
) -> AutoencoderModel:
    """Train the mirrored autoencoder to reconstruct unlabeled patch stacks.

    Minimizes mean squared reconstruction error. The returned loss trace
    holds the pre-training evaluation loss followed by one mean training
    loss per epoch.
    """
    if len(stacks) == 0:
        raise ValueError("need at least one stack for pretraining")
    epochs = t.epochs if t.epochs is not None else DEFAULT_AUTOENCODER_EPOCHS
    inputs = _stack_tensor(stacks, c)
    net = _build_autoencoder_net(c)
    trace = _run_training(
        net,
        inputs,
        inputs,
        nn.MSELoss(),
        t,
        epochs,
        shuffle_seed=derive_seed(t.seed, "autoencoder-shuffle"),
    )
    return AutoencoderModel(net=net, config=c, loss_trace=trace)


def train_classifier(
    data: Sequence[LabeledPatch],
    c: EncoderConfig,
    t: TrainConfig,
    init: AutoencoderModel | None = None,
) -> ClassifierModel:
    """Train the patch classifier with binary cross-entropy on (soft) labels.

    When ``init`` is given its encoder weights are copied in as the
    starting point and fine-tuned (not frozen).
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if init is not None and init.config != c:
        raise ValueError("autoencoder init config does not match classifier config")
    epochs = t.epochs if t.epochs is not None else DEFAULT_CLASSIFIER_EPOCHS
    labels = [p.label for p in data]
    if len(set(labels)) == 1:
        logger.warning("all %d training labels are identical (%g)", len(labels), labels[0])
    inputs = _stack_tensor([p.stack for p in data], c)
    targets = torch.tensor(labels, dtype=torch.float32)
    net = _build_classifier_net(c)
    if init is not None:
        net.encoder.load_state_dict(init.net.encoder.state_dict())
    trace = _run_training(
        net,
        inputs,
        targets,
        nn.BCEWithLogitsLoss(),
        t,
        epochs,
        shuffle_seed=derive_seed(t.seed, "classifier-shuffle"),
    )
    fingerprint = TrainingFingerprint(seed=t.seed, epochs=epochs, data_checksum=dataset_checksum(data))
    return ClassifierModel(net=net, config=c, fingerprint=fingerprint, loss_trace=trace)


def predict(m: ClassifierModel, s: np.ndarray) -> float:
    """Probability that one C x h x w stack is a lesion patch."""
    arr = np.ascontiguousarray(s, dtype=np.float32)
    if arr.shape != m.config.input_shape:
        raise ValueError(f"stack shape {arr.shape} does not match model {m.config.input_shape}")
    m.net.eval()
    with torch.no_grad():
        prob = float(torch.sigmoid(m.net(torch.from_numpy(arr).unsqueeze(0)))[0])
    assert 0.0 <= prob <= 1.0
    return prob


def predict_batch(m: ClassifierModel, stacks: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Vectorized ``predict`` over an (N, C, h, w) array."""
    arr = np.ascontiguousarray(stacks, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[1:] != m.config.input_shape:
        raise ValueError(f"stacks shape {arr.shape} does not match model {m.config.input_shape}")
    m.net.eval()
    probs = np.empty(arr.shape[0], dtype=np.float64)
    with torch.no_grad():
        for start in range(0, arr.shape[0], batch_size):
            chunk = torch.from_numpy(arr[start : start + batch_size])
            probs[start : start + len(chunk)] = torch.sigmoid(m.net(chunk)).numpy()
    assert np.all((probs >= 0) & (probs <= 1))
    return probs


def train_localization_ensemble(
    temporal_data: Sequence[LabeledPatch],
    non_temporal_data: Sequence[LabeledPatch],
    c: EncoderConfig,
    t: TrainConfig,
    init: AutoencoderModel | None = None,
    member_seeds: tuple[int, int] | None = None,
) -> LocalizationEnsemble:
    """Train independent classifiers for temporal and non-temporal lesions.

    Both members share the encoder config (and autoencoder init, when
    given) but train with independent seeds derived from ``t.seed``
    unless ``member_seeds`` overrides them.
    """
    if len(temporal_data) == 0 or len(non_temporal_data) == 0:
        raise ValueError("both localization datasets must be non-empty")
    if member_seeds is None:
        member_seeds = (derive_seed(t.seed, "temporal"), derive_seed(t.seed, "non_temporal"))
    temporal = train_classifier(
        temporal_data, c, dataclasses.replace(t, seed=member_seeds[0]), init
    )
    non_temporal = train_classifier(
        non_temporal_data, c, dataclasses.replace(t, seed=member_seeds[1]), init
    )
    return LocalizationEnsemble(temporal_model=temporal, non_temporal_model=non_temporal)


def ensemble_predict(
    e: LocalizationEnsemble, localization: str, s: np.ndarray, mode: str = "route"
) -> float:
    """Score a stack with the ensemble.

    ``route`` (the evaluation protocol) uses the member matching the
    subject's localization; ``max`` takes the maximum of both members,
    for inference when localization is unknown.
    """
    if mode == "max":
        return max(predict(e.temporal_model, s), predict(e.non_temporal_model, s))
    if mode != "route":
        raise ValueError(f"unknown ensemble mode '{mode}'")
    if localization == "temporal":
        return predict(e.temporal_model, s)
    if localization == "non_temporal":
        return predict(e.non_temporal_model, s)
    raise ValueError(f"unknown localization '{localization}'")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CHECKPOINT_VERSION = 1


def _config_dict(c: EncoderConfig) -> dict:
    return {
        "views": list(c.views),
        "h": c.h,
        "w": c.w,
        "head_channels": list(c.head_channels),
        "latent_dim": c.latent_dim,
        "seed": c.seed,
    }


def _config_from_dict(d: dict) -> EncoderConfig:
    return EncoderConfig(
        views=tuple(d["views"]),
        h=d["h"],
        w=d["w"],
        head_channels=tuple(d["head_channels"]),
        latent_dim=d["latent_dim"],
        seed=d["seed"],
    )


def _classifier_payload(m: ClassifierModel) -> dict:
    fp = None
    if m.fingerprint is not None:
        fp = {
            "seed": m.fingerprint.seed,
            "epochs": m.fingerprint.epochs,
            "data_checksum": m.fingerprint.data_checksum,
        }
    return {
        "config": _config_dict(m.config),
        "state_dict": m.net.state_dict(),
        "fingerprint": fp,
        "loss_trace": list(m.loss_trace),
    }


def _classifier_from_payload(payload: dict) -> ClassifierModel:
    config = _config_from_dict(payload["config"])
    net = _build_classifier_net(config)
    net.load_state_dict(payload["state_dict"])
    fp = payload.get("fingerprint")
    fingerprint = TrainingFingerprint(**fp) if fp else None
    return ClassifierModel(
        net=net, config=config, fingerprint=fingerprint, loss_trace=list(payload["loss_trace"])
    )


def save_checkpoint(
    model: ClassifierModel | AutoencoderModel | LocalizationEnsemble, path: str | Path
) -> None:
    """Persist a model as a versioned binary checkpoint."""
    if isinstance(model, ClassifierModel):
        payload = {"kind": "classifier", **_classifier_payload(model)}
    elif isinstance(model, AutoencoderModel):
        payload = {
            "kind": "autoencoder",
            "config": _config_dict(model.config),
            "state_dict": model.net.state_dict(),
            "loss_trace": list(model.loss_trace),
        }
    elif isinstance(model, LocalizationEnsemble):
        payload = {
            "kind": "ensemble",
            "temporal": _classifier_payload(model.temporal_model),
            "non_temporal": _classifier_payload(model.non_temporal_model),
        }
    else:
        raise TypeError(f"cannot checkpoint object of type {type(model).__name__}")
    payload["format_version"] = _CHECKPOINT_VERSION
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> ClassifierModel | AutoencoderModel | LocalizationEnsemble:
    payload = torch.load(path, weights_only=True)
    version = payload.get("format_version")
    if version != _CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    kind = payload["kind"]
    if kind == "classifier":
        return _classifier_from_payload(payload)
    if kind == "autoencoder":
        config = _config_from_dict(payload["config"])
        net = _build_autoencoder_net(config)
        net.load_state_dict(payload["state_dict"])
        return AutoencoderModel(net=net, config=config, loss_trace=list(payload["loss_trace"]))
    if kind == "ensemble":
        return LocalizationEnsemble(
            temporal_model=_classifier_from_payload(payload["temporal"]),
            non_temporal_model=_classifier_from_payload(payload["non_temporal"]),
        )
    raise ValueError(f"{path}: unknown checkpoint kind '{kind}'")
