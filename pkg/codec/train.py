import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from codec.model import EVAL, TRAIN, ModelGraph, forward
from engine import functional as F
from engine.optim import AdamState, adam_step
from engine.prng import Xoshiro256, derive_seed
from engine.tensor import NumericalError, ShapeError, Tensor
from evaluation.rd_metrics import RDPoint, psnr

logger = logging.getLogger("lic-quant.codec.train")

PEAK = 255.0


class TrainingDivergedError(Exception):
    """Raised when the training loss or a gradient stops being finite."""
    pass


@dataclass
class RDLossConfig:
    """λ of the RD trade-off plus the coefficients of the optional regularizers."""
    lmbda: float
    reg_strength: float = 0.0
    eta: float = 0.0

    def __post_init__(self) -> None:
        if not self.lmbda > 0:
            raise ValueError(f"lambda must be positive, got {self.lmbda}")
        if self.reg_strength < 0 or self.eta < 0:
            raise ValueError("reg_strength and eta must be non-negative")


@dataclass
class TrainConfig:
    lmbda: float
    lr: float = 1e-4
    batch: int = 8
    crop: int = 16
    iters: int = 1000
    seed: int = 0
    log_every: int = 50


@dataclass
class TrainResult:
    model: ModelGraph
    losses: list[float] = field(default_factory=list)
    trace: list[tuple[int, float]] = field(default_factory=list)


def rd_loss(x: Tensor, x_hat: Tensor, bpp: Tensor, cfg: RDLossConfig | float) -> Tensor:
    """
    L = bpp + λ · mean((255·(x − x̂))²).

    :param Tensor x: Original in [0, 1].
    :param Tensor x_hat: Reconstruction.
    :param Tensor bpp: Rate in bits per pixel.
    :param cfg: RDLossConfig or λ directly.
    :return: Scalar loss.
    :rtype: Tensor

    :raises: ShapeError when x and x̂ differ in shape.
    """
    lmbda = cfg.lmbda if isinstance(cfg, RDLossConfig) else float(cfg)
    if x.shape != x_hat.shape:
        raise ShapeError(f"rd_loss: original {x.shape} and reconstruction {x_hat.shape} differ")
    distortion = F.mean(F.square((x - x_hat) * PEAK))
    return bpp + distortion * lmbda


def sample_batch(dataset: list[np.ndarray], batch: int, crop: int, rng: Xoshiro256) -> np.ndarray:
    """Random crops: one image index, then row and column offsets, per batch entry."""
    if not dataset:
        raise ValueError("cannot sample from an empty dataset")
    crops = []
    for index in rng.integers(len(dataset), batch):
        image = dataset[int(index)]
        _, h, w = image.shape
        if h < crop or w < crop:
            raise ShapeError(f"image of size {h}x{w} is smaller than the {crop}px crop")
        top = int(rng.integers(h - crop + 1, 1)[0])
        left = int(rng.integers(w - crop + 1, 1)[0])
        crops.append(image[:, top:top + crop, left:left + crop])
    return np.stack(crops)


def train(
        model: ModelGraph,
        dataset: list[np.ndarray],
        cfg: TrainConfig,
        extra_loss: Callable[[ModelGraph], Tensor | None] | None = None,
        on_step: Callable[[int, ModelGraph], None] | None = None,
        state: AdamState | None = None,
) -> TrainResult:
    """
    Adam-driven RD training, in place.

    :param ModelGraph model: Model to train.
    :param dataset: Images [3, H, W] in [0, 1].
    :param TrainConfig cfg: Loop settings.
    :param extra_loss: Regularizer added to every step's loss.
    :param on_step: Called before every iteration with its index.
    :param state: Optimizer state to continue from.
    :return: The model and its loss trace.
    :rtype: TrainResult

    :raises: TrainingDivergedError with the iteration index on a non-finite loss or gradient.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    batch_rng = Xoshiro256(derive_seed(cfg.seed, "batch"))
    noise_rng = Xoshiro256(derive_seed(cfg.seed, "noise"))
    state = state if state is not None else AdamState()
    params = model.parameters()
    result = TrainResult(model=model)
    for i in range(cfg.iters):
        if on_step is not None:
            on_step(i, model)
        x = Tensor(sample_batch(dataset, cfg.batch, cfg.crop, batch_rng))
        out = forward(model, x, mode=TRAIN, rng=noise_rng)
        loss = rd_loss(x, out.x_hat, out.bpp(x.shape[0] * x.shape[2] * x.shape[3]), cfg.lmbda)
        if extra_loss is not None:
            extra = extra_loss(model)
            if extra is not None:
                loss = loss + extra
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"training diverged at iteration {i}: loss={value}")
        loss.backward()
        try:
            adam_step(params, state, cfg.lr)
        except NumericalError as e:
            raise TrainingDivergedError(f"training diverged at iteration {i}: {e}") from e
        result.losses.append(value)
        if i % cfg.log_every == 0 or i == cfg.iters - 1:
            result.trace.append((i, value))
            logger.info(f"iter {i}/{cfg.iters} loss={value:.5f}")
    return result


def _image_batch(image: np.ndarray) -> Tensor:
    return Tensor(np.asarray(image)[np.newaxis])


def eval_rd_point(model: ModelGraph, images: list[np.ndarray]) -> RDPoint:
    """
    Mean bpp and mean PSNR over whole images in eval mode.

    :param ModelGraph model: Model.
    :param images: Images [3, H, W] in [0, 1].
    :return: The RD point; PSNR is +inf when every image is reconstructed exactly.
    :rtype: RDPoint
    """
    if not images:
        raise ValueError("evaluation needs at least one image")
    rates, qualities = [], []
    for image in images:
        x = _image_batch(image)
        out = forward(model, x, mode=EVAL)
        rates.append(out.rate_bits.item() / (x.shape[2] * x.shape[3]))
        qualities.append(psnr(np.asarray(image, dtype=np.float64) * PEAK,
                              out.x_hat.data[0].astype(np.float64) * PEAK))
    return RDPoint(bpp=float(np.mean(rates)), psnr=float(np.mean(qualities)))


def eval_loss(model: ModelGraph, images: list[np.ndarray], lmbda: float) -> float:
    """Mean eval-mode RD loss over whole images."""
    if not images:
        raise ValueError("evaluation needs at least one image")
    total = 0.0
    for image in images:
        x = _image_batch(image)
        out = forward(model, x, mode=EVAL)
        total += rd_loss(x, out.x_hat, out.bpp(x.shape[2] * x.shape[3]), lmbda).item()
    return total / len(images)
