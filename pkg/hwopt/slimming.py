"""
GDN-slimming: L1-regularized training of the slim-GDN channel scales, and pruning
of the channels whose scale fell below a threshold.
"""
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from codec.model import CONV, SLIM_GDN, TCONV, LayerNode, ModelGraph
from codec.train import TrainConfig, TrainResult, train
from engine import functional as F
from engine.tensor import Tensor, parameter
from hwopt.flops import flops_count

logger = logging.getLogger("lic-quant.hwopt.slimming")

DEFAULT_EPSILON_P = 1e-4
HISTOGRAM_BINS = 10

PRUNE_COLUMNS = ["layer", "channels_before", "channels_after", "kept", "flops_before", "flops_after"]


class SlimmingError(Exception):
    """Raised when a model cannot be slim-trained or pruned."""
    pass


@dataclass
class SlimResult:
    model: ModelGraph
    training: TrainResult
    histograms: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


@dataclass
class PruneReport:
    """Kept channel indices per slim-GDN layer, with channel and FLOPs counts around the prune."""
    epsilon_p: float
    kept: dict[str, list[int]] = field(default_factory=dict)
    channels_before: dict[str, int] = field(default_factory=dict)
    flops_before: int = 0
    flops_after: int = 0

    @property
    def channels_after(self) -> dict[str, int]:
        return {layer: len(indices) for layer, indices in self.kept.items()}

    @property
    def pruned_channels(self) -> int:
        return sum(self.channels_before[layer] - len(indices) for layer, indices in self.kept.items())

    def to_dict(self) -> dict[str, Any]:
        return {
            "epsilon_p": self.epsilon_p,
            "kept": {layer: list(indices) for layer, indices in self.kept.items()},
            "channels_before": dict(self.channels_before),
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PruneReport":
        return cls(
            epsilon_p=float(data["epsilon_p"]),
            kept={layer: [int(i) for i in indices] for layer, indices in data["kept"].items()},
            channels_before={layer: int(count) for layer, count in data["channels_before"].items()},
            flops_before=int(data["flops_before"]),
            flops_after=int(data["flops_after"]),
        )

    def rows(self) -> list[dict[str, Any]]:
        return [{
            "layer": layer,
            "channels_before": self.channels_before[layer],
            "channels_after": len(indices),
            "kept": " ".join(str(i) for i in indices),
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
        } for layer, indices in self.kept.items()]


def _slim_layers(model: ModelGraph) -> list[LayerNode]:
    return [layer for layer in model.layers if layer.kind == SLIM_GDN]


def scale_l1(model: ModelGraph) -> Tensor:
    """Σ |a_i| over every slim-GDN layer."""
    total = None
    for layer in _slim_layers(model):
        term = F.sum(F.abs(layer.params["scale"]))
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def scale_histograms(model: ModelGraph, bins: int = HISTOGRAM_BINS) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Histogram of |a_i| per slim-GDN layer, over [0, max |a_i|]."""
    histograms = {}
    for layer in _slim_layers(model):
        magnitudes = np.abs(layer.params["scale"].data.astype(np.float64))
        upper = float(magnitudes.max()) if magnitudes.size and magnitudes.max() > 0 else 1.0
        histograms[layer.id] = np.histogram(magnitudes, bins=bins, range=(0.0, upper))
    return histograms


def slim_train(model: ModelGraph, dataset: list[np.ndarray], cfg: TrainConfig, eta: float) -> SlimResult:
    """
    RD training with an added η·Σ|a_i| on the slim-GDN scales.

    :param ModelGraph model: Model with slim-GDN layers, trained in place.
    :param dataset: Training images.
    :param TrainConfig cfg: Loop settings.
    :param float eta: L1 strength; 0 gives plain training.
    :return: The model, its loss trace and the |a_i| histograms after training.
    :rtype: SlimResult

    :raises: SlimmingError when the model has no slim-GDN layer or η < 0.
    :raises: TrainingDivergedError on a non-finite loss.
    """
    if not _slim_layers(model):
        raise SlimmingError("slim training needs a model with slim_gdn layers")
    if eta < 0:
        raise SlimmingError(f"eta must be non-negative, got {eta}")
    extra_loss = None
    if eta > 0:
        def extra_loss(m: ModelGraph) -> Tensor:
            return scale_l1(m) * eta

    training = train(model, dataset, cfg, extra_loss=extra_loss)
    histograms = scale_histograms(model)
    logger.info(f"Slim training done (eta={eta}); ||a||_1 = {scale_l1(model).item():.5f}")
    return SlimResult(model=model, training=training, histograms=histograms)


def _sliced(tensor: Tensor, data: np.ndarray) -> Tensor:
    return parameter(np.ascontiguousarray(data), name=tensor.name)


def _prune_layer(model: ModelGraph, index: int, keep: np.ndarray) -> None:
    node = model.layers[index]
    previous, following = model.layers[index - 1], model.layers[index + 1]
    if previous.kind != CONV or following.kind not in (CONV, TCONV):
        raise SlimmingError(f"slim layer {node.id} must sit between two convolutions")
    removed = np.setdiff1d(np.arange(node.in_channels), keep)

    # A channel with a_i = 0 emits the constant b_i; fold it into the next bias
    kernel = following.params["kernel"].data
    in_axis = 1 if following.kind == CONV else 0
    tap_sums = kernel.sum(axis=(2, 3))
    if in_axis == 0:
        tap_sums = tap_sums.T
    b = node.params["bias"].data
    following.params["bias"] = _sliced(following.params["bias"],
                                       following.params["bias"].data + tap_sums[:, removed] @ b[removed])
    following.params["kernel"] = _sliced(following.params["kernel"], np.take(kernel, keep, axis=in_axis))
    following.hyper["in_channels"] = len(keep)

    previous.params["kernel"] = _sliced(previous.params["kernel"], previous.params["kernel"].data[keep])
    previous.params["bias"] = _sliced(previous.params["bias"], previous.params["bias"].data[keep])
    previous.hyper["out_channels"] = len(keep)

    node.params["raw_beta"] = _sliced(node.params["raw_beta"], node.params["raw_beta"].data[keep])
    node.params["raw_gamma"] = _sliced(node.params["raw_gamma"], node.params["raw_gamma"].data[np.ix_(keep, keep)])
    node.params["scale"] = _sliced(node.params["scale"], node.params["scale"].data[keep])
    node.params["bias"] = _sliced(node.params["bias"], b[keep])
    node.hyper["in_channels"] = node.hyper["out_channels"] = len(keep)


def prune(
        model: ModelGraph,
        epsilon_p: float = DEFAULT_EPSILON_P,
        input_shape: tuple[int, int] = (16, 16),
) -> tuple[ModelGraph, PruneReport]:
    """
    Remove every slim-GDN channel with |a_i| < ε_p, along with the matching output
    filter of the preceding conv and input slice of the succeeding conv.

    The constant b_i a removed channel would have emitted is folded into the
    succeeding bias through the spatial sum of its kernel taps. The fold is exact away
    from zero-padded borders, or everywhere when b_i = 0.

    :param ModelGraph model: Slim-trained model (left untouched).
    :param float epsilon_p: Scale threshold.
    :param input_shape: (H, W) used for the FLOPs counts.
    :return: The pruned copy and the report.
    :rtype: tuple[ModelGraph, PruneReport]

    :raises: SlimmingError when the model has no slim-GDN layer.
    """
    slim_layers = _slim_layers(model)
    if not slim_layers:
        raise SlimmingError("pruning needs a model with slim_gdn layers")
    pruned = model.copy()
    report = PruneReport(epsilon_p=epsilon_p, flops_before=flops_count(model, input_shape).total)
    for layer in slim_layers:
        magnitudes = np.abs(layer.params["scale"].data.astype(np.float64))
        keep = np.flatnonzero(magnitudes >= epsilon_p)
        if keep.size == 0:
            keep = np.array([int(np.argmax(magnitudes))])
            logger.warning(f"Every channel of {layer.id} is below {epsilon_p}; keeping channel {keep[0]}")
        report.channels_before[layer.id] = magnitudes.size
        report.kept[layer.id] = [int(i) for i in keep]
        _prune_layer(pruned, pruned.index(layer.id), keep)
        logger.info(f"Pruned {layer.id}: {magnitudes.size} -> {keep.size} channels")
    pruned.validate()
    report.flops_after = flops_count(pruned, input_shape).total
    return pruned, report


def prune_and_finetune(
        model: ModelGraph,
        dataset: list[np.ndarray],
        cfg: TrainConfig,
        epsilon_p: float = DEFAULT_EPSILON_P,
        input_shape: tuple[int, int] = (16, 16),
) -> tuple[ModelGraph, PruneReport, TrainResult]:
    """Prune, then fine-tune the smaller network for ``cfg.iters`` iterations."""
    pruned, report = prune(model, epsilon_p, input_shape)
    training = train(pruned, dataset, cfg)
    return pruned, report, training
