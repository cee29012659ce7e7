"""
Toy-scale training: MAE loss, Adam, milestone step decay, uniform
image-then-patch sampling and dihedral augmentation.
"""

import dataclasses
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from maxsr.errors import (
    ConfigError,
    ImageFormatError,
    NonFiniteError,
    ShapeError,
    TrainingDivergedError,
)
from maxsr.network import MaxSR
from maxsr.pipelines.imaging import ImageBuffer, bicubic_resize, dihedral, quantize
from maxsr.utilities.constructors import ModelState
from maxsr.utilities.general import Files
from maxsr.utilities.parsers import Parse
from maxsr.utilities.tensor import Tensor, backward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings of one training run.

    Attributes:
        batch: int
            Patch pairs per iteration.
        lr0: float
            Initial learning rate.
        milestones: tuple of int
            Iterations at which the learning rate is divided by `decay`.
        decay: float
            Step-decay divisor.
        total_iters: int
            Number of optimizer steps.
        patch_lr: int
            LR patch extent; HR patches are `patch_lr * scale`.
        seed: int
            Seeds patch sampling and augmentation.
        beta1, beta2, eps: float
            Adam hyperparameters.
        augment: bool
            Draw one of the eight dihedral transforms per sample.
        log_every: int
            Iterations between loss log lines.
    """

    batch: int = 32
    lr0: float = 2e-4
    milestones: Tuple[int, ...] = (250_000, 400_000, 450_000, 475_000, 500_000)
    decay: float = 2.0
    total_iters: int = 500_000
    patch_lr: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    log_every: int = 100

    def __post_init__(self) -> None:
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"Milestones must increase strictly: {self.milestones}")
        if self.patch_lr < 1 or self.batch < 1:
            raise ConfigError("Patch size and batch must be >= 1")
        if self.total_iters < 0 or self.decay <= 0 or self.lr0 <= 0:
            raise ConfigError("Iterations must be >= 0, decay and lr0 positive")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "TrainConfig":
        """A named regime (div2k, div2k-flickr2k, big-patch or toy) with overrides."""
        key = name.replace("_", "-").lower()
        if key not in TRAIN_PRESETS:
            raise ConfigError(f"Unknown training preset {name!r}")
        return dataclasses.replace(TRAIN_PRESETS[key], **overrides)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        known = {item.name for item in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown training config keys: {', '.join(unknown)}")
        return cls(**values)

    def finetuned(self) -> "TrainConfig":
        """Halved learning rate, iterations and milestones, for x3/x4/x8 from x2."""
        return dataclasses.replace(
            self,
            lr0=self.lr0 / 2,
            total_iters=self.total_iters // 2,
            milestones=tuple(m // 2 for m in self.milestones),
        )


TRAIN_PRESETS = {
    "div2k": TrainConfig(),
    "div2k-flickr2k": TrainConfig(
        total_iters=1_500_000,
        milestones=(750_000, 1_200_000, 1_350_000, 1_425_000, 1_500_000),
    ),
    "big-patch": TrainConfig(batch=8, patch_lr=128),
    "toy": TrainConfig(
        batch=4, lr0=1e-3, milestones=(), total_iters=200, patch_lr=16, log_every=20
    ),
}


@dataclass
class PatchPair:
    """
    Aligned LR/HR training patches.

    Attributes:
        lr_patch: np.ndarray
            [3, p, p] float values.
        hr_patch: np.ndarray
            [3, p * r, p * r], the r-scaled footprint of `lr_patch`.
        image_index: int
            Dataset position of the source pair.
        top, left: int
            LR coordinates of the patch corner.
    """

    lr_patch: np.ndarray
    hr_patch: np.ndarray
    image_index: int = 0
    top: int = 0
    left: int = 0


@dataclass
class PairDataset:
    """LR/HR image pairs in [3, h, w] float layout, LR made by bicubic downscaling."""

    scale: int
    lr_images: List[np.ndarray] = field(default_factory=list)
    hr_images: List[np.ndarray] = field(default_factory=list)
    names: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.hr_images)

    def add(self, hr: ImageBuffer):
        hr = hr.crop_to_multiple(self.scale)
        low = bicubic_resize(
            hr.to_float(), hr.height // self.scale, hr.width // self.scale
        )
        self.lr_images.append(
            np.transpose(quantize(low).astype(np.float64) / 255.0, (2, 0, 1))
        )
        self.hr_images.append(np.transpose(hr.to_float(), (2, 0, 1)))
        self.names.append(hr.name)

        return

    @classmethod
    def from_directory(cls, path: Union[str, Path], scale: int) -> "PairDataset":
        dataset = cls(scale)
        for png in sorted(Path(path).glob("*.png")):
            try:
                dataset.add(ImageBuffer.read(png))
            except (ImageFormatError, ShapeError) as err:
                logger.warning("Skipping %s: %s", png.name, err)
        if not len(dataset):
            raise ConfigError(f"No usable PNG images in {path}")

        return dataset

    @classmethod
    def synthetic(
        cls, count: int, lr_size: int, scale: int, seed: int = 0
    ) -> "PairDataset":
        """Smooth random colour fields, each a few low-frequency sinusoids."""
        rng = np.random.default_rng(seed)
        size = lr_size * scale
        grid = np.linspace(0.0, 1.0, size)
        rows, cols = np.meshgrid(grid, grid, indexing="ij")
        dataset = cls(scale)
        for index in range(count):
            channels = []
            for _ in range(3):
                fy, fx = rng.uniform(0.5, 3.0, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                channels.append(
                    0.5 + 0.4 * np.sin(2 * np.pi * (fy * rows + fx * cols) + phase)
                )
            pixels = quantize(np.stack(channels, axis=-1))
            dataset.add(ImageBuffer(pixels, f"synthetic-{index}"))

        return dataset


def mae_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over every element."""
    if prediction.shape != target.shape:
        raise ShapeError(f"Cannot compare {prediction.shape} with {target.shape}")
    return (prediction - target).abs().mean()


def sample_patch_pair(
    dataset: PairDataset, scale: int, patch: int, rng: np.random.Generator
) -> PatchPair:
    """Pick an image uniformly, then a patch position uniformly within it."""
    index = int(rng.integers(len(dataset)))
    low, high = dataset.lr_images[index], dataset.hr_images[index]
    height, width = low.shape[1:]
    if height < patch or width < patch:
        raise ShapeError(
            f"{dataset.names[index]}: LR image {height}x{width} is smaller than "
            f"the {patch}px patch"
        )
    top = int(rng.integers(height - patch + 1))
    left = int(rng.integers(width - patch + 1))
    hr_patch = high[
        :, top * scale : (top + patch) * scale, left * scale : (left + patch) * scale
    ]

    return PatchPair(
        low[:, top : top + patch, left : left + patch].copy(),
        hr_patch.copy(),
        index,
        top,
        left,
    )


def augment(pair: PatchPair, code: int) -> PatchPair:
    """Apply dihedral transform `code` (0..7) to both patches alike."""
    return dataclasses.replace(
        pair,
        lr_patch=dihedral(pair.lr_patch, code, axes=(1, 2)),
        hr_patch=dihedral(pair.hr_patch, code, axes=(1, 2)),
    )


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """lr0 divided by decay once per milestone already reached."""
    passed = sum(1 for milestone in cfg.milestones if milestone <= iteration)
    return cfg.lr0 / cfg.decay**passed


def adam_step(
    state: ModelState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ModelState:
    """
    One bias-corrected Adam update of every parameter holding a gradient.

    Moments and the step counter live on `state`; parameters without a
    gradient are left untouched. Updated parameters are new leaf tensors.
    """
    state.step += 1
    t = state.step
    for name, tensor in list(state.params.items()):
        if tensor.grad is None:
            continue
        grad = tensor.grad
        first, second = state.moments.get(
            name, (np.zeros_like(tensor.data), np.zeros_like(tensor.data))
        )
        first = beta1 * first + (1 - beta1) * grad
        second = beta2 * second + (1 - beta2) * grad * grad
        state.moments[name] = (first, second)

        corrected_first = first / (1 - beta1**t)
        corrected_second = second / (1 - beta2**t)
        update = lr * corrected_first / (np.sqrt(corrected_second) + eps)
        state.params[name] = Tensor(
            tensor.data - update.astype(tensor.dtype),
            requires_grad=True,
            dtype=tensor.dtype,
        )

    return state


class PatchLoader:
    """
    Batches of augmented patch pairs, optionally produced ahead on a thread.

    One generator drives all draws in a fixed order, so the batch sequence is
    the same with or without prefetching.
    """

    def __init__(self, dataset: PairDataset, cfg: TrainConfig, prefetch: int = 0):
        self.dataset = dataset
        self.cfg = cfg
        self.prefetch = prefetch
        self.rng = np.random.default_rng(cfg.seed)

    def __repr__(self):
        return f"PatchLoader({len(self.dataset)} pairs, batch {self.cfg.batch})"

    def next_batch(self) -> Tuple[np.ndarray, np.ndarray]:
        pairs = []
        for _ in range(self.cfg.batch):
            pair = sample_patch_pair(
                self.dataset, self.dataset.scale, self.cfg.patch_lr, self.rng
            )
            if self.cfg.augment:
                pair = augment(pair, int(self.rng.integers(8)))
            pairs.append(pair)

        return (
            np.stack([pair.lr_patch for pair in pairs]),
            np.stack([pair.hr_patch for pair in pairs]),
        )

    def batches(self, count: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        if self.prefetch < 1:
            for _ in range(count):
                yield self.next_batch()
            return

        ready: "queue.Queue[Any]" = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()

        def produce() -> None:
            try:
                for _ in range(count):
                    batch = self.next_batch()
                    while not stop.is_set():
                        try:
                            ready.put(batch, timeout=0.1)
                            break
                        except queue.Full:
                            continue
                    if stop.is_set():
                        return
            except Exception as err:  # handed to the consumer
                ready.put(err)

        worker = threading.Thread(target=produce, name="patch-loader", daemon=True)
        worker.start()
        try:
            for _ in range(count):
                item = ready.get()
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            worker.join(timeout=1.0)


@dataclass
class LossTrace:
    """Loss and learning rate per iteration."""

    iterations: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    rates: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.losses)

    def record(self, iteration: int, loss: float, lr: float):
        self.iterations.append(iteration)
        self.losses.append(loss)
        self.rates.append(lr)

        return

    def mean_first(self, count: int) -> float:
        return float(np.mean(self.losses[:count]))

    def mean_last(self, count: int) -> float:
        return float(np.mean(self.losses[-count:]))

    def table(
        self, as_frame: Optional[bool] = False
    ) -> Union[Dict[str, list], pd.DataFrame]:
        columns = {"iteration": self.iterations, "loss": self.losses, "lr": self.rates}
        return Parse.table(columns, as_frame)

    def to_csv(self, path: Union[str, Path]) -> Path:
        frame = self.table(as_frame=True)
        assert isinstance(frame, pd.DataFrame)
        return Files.write_frame(path, frame)


def train(
    model: MaxSR,
    dataset: PairDataset,
    cfg: TrainConfig,
    prefetch: int = 0,
) -> Tuple[ModelState, LossTrace]:
    """
    Minimize the MAE between the network output and HR patches.

    Args:
      model: MaxSR
        Trained in place; its scale must match the dataset's.
      dataset: PairDataset
        Source of patch pairs.
      cfg: TrainConfig
        Batch, schedule and Adam settings.
      prefetch: int
        Batches sampled ahead on a background thread; 0 samples inline.

    Returns:
      The trained state (the model's own) and the per-iteration loss trace.

    Raises:
      TrainingDivergedError: the loss or an update stopped being finite.
    """
    if model.scale != dataset.scale:
        raise ConfigError(f"Model is x{model.scale} but the data is x{dataset.scale}")
    trace = LossTrace()
    dtype = next(iter(model.state.params.values())).dtype
    loader = PatchLoader(dataset, cfg, prefetch)

    for iteration, (low, high) in enumerate(loader.batches(cfg.total_iters)):
        lr = lr_schedule(iteration, cfg)
        model.state.zero_grad()
        try:
            prediction = model.forward(Tensor(low, dtype=dtype), training=True)
            loss = mae_loss(prediction, Tensor(high, dtype=dtype))
            backward(loss)
            adam_step(model.state, lr, cfg.beta1, cfg.beta2, cfg.eps)
        except NonFiniteError as err:
            raise TrainingDivergedError(
                f"Training diverged at iteration {iteration} (lr {lr:g}): {err}"
            ) from err

        trace.record(iteration, loss.item(), lr)
        if iteration % cfg.log_every == 0 or iteration == cfg.total_iters - 1:
            logger.info("iter %d  loss %.5f  lr %.3g", iteration, loss.item(), lr)

    model.state.zero_grad()
    return model.state, trace
