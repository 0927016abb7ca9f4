"""
Per-layer bit-width plans and the equivalent (footprint-weighted) bit-width.
"""
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable

from codec.model import TCONV, ModelGraph
from hwopt.flops import layer_shapes
from quant.quantizer import MAX_BITS, MIN_BITS

logger = logging.getLogger("lic-quant.hwopt.bitwidth")

ELEMENT_COUNT = "element_count"
HALVING_SYNTHESIS = "halving_synthesis"

# Footprint coefficients of a four-layer synthesis stack, P_1 first
SYNTHESIS_COEFFICIENTS = (Fraction(8, 15), Fraction(4, 15), Fraction(2, 15), Fraction(1, 15))

SWEEP_COLUMNS = ["bits", "loss"]


class SearchError(Exception):
    """Raised when a bit-width plan or the search over plans is inconsistent."""
    pass


@dataclass
class BitWidthPlan:
    """
    One bit-width per quantized layer, with the search bookkeeping.

    ``frozen`` marks layers the search has finished with; ``epsilon`` and
    ``baseline_loss`` record the tolerance and the Phase-1 loss the plan was built
    against, and ``budget`` the P_m limit it was pushed under, if any.
    """
    widths: dict[str, int]
    frozen: dict[str, bool] = field(default_factory=dict)
    epsilon: float = 0.0
    baseline_loss: float | None = None
    baseline_bits: int | None = None
    budget: float | None = None

    def __post_init__(self) -> None:
        if not self.widths:
            raise SearchError("a bit-width plan needs at least one layer")
        for layer, bits in self.widths.items():
            if not isinstance(bits, int) or not MIN_BITS <= bits <= MAX_BITS:
                raise SearchError(f"bit-width of layer {layer} must be an integer in "
                                  f"[{MIN_BITS}, {MAX_BITS}], got {bits}")
        unknown = set(self.frozen) - set(self.widths)
        if unknown:
            raise SearchError(f"frozen flags for layers outside the plan: {sorted(unknown)}")

    @classmethod
    def uniform(cls, layers: list[str], bits: int, **kwargs: Any) -> "BitWidthPlan":
        return cls(widths={layer: bits for layer in layers}, **kwargs)

    @property
    def layers(self) -> list[str]:
        return list(self.widths)

    def with_bits(self, layer: str, bits: int) -> "BitWidthPlan":
        """A copy with one layer's width changed."""
        if layer not in self.widths:
            raise SearchError(f"layer {layer} is not part of the plan")
        return BitWidthPlan(widths={**self.widths, layer: bits}, frozen=dict(self.frozen), epsilon=self.epsilon,
                            baseline_loss=self.baseline_loss, baseline_bits=self.baseline_bits, budget=self.budget)

    def subset(self, layers: list[str]) -> "BitWidthPlan":
        """The plan restricted to ``layers``, in that order."""
        missing = [layer for layer in layers if layer not in self.widths]
        if missing:
            raise SearchError(f"layers not in the plan: {missing}")
        return BitWidthPlan(widths={layer: self.widths[layer] for layer in layers},
                            frozen={layer: self.frozen[layer] for layer in layers if layer in self.frozen},
                            epsilon=self.epsilon, baseline_loss=self.baseline_loss,
                            baseline_bits=self.baseline_bits, budget=self.budget)

    def key(self) -> tuple[tuple[str, int], ...]:
        return tuple(sorted(self.widths.items()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "widths": dict(self.widths),
            "frozen": dict(self.frozen),
            "epsilon": self.epsilon,
            "baseline_loss": self.baseline_loss,
            "baseline_bits": self.baseline_bits,
            "budget": self.budget,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BitWidthPlan":
        return cls(
            widths={layer: int(bits) for layer, bits in data["widths"].items()},
            frozen={layer: bool(flag) for layer, flag in data.get("frozen", {}).items()},
            epsilon=float(data.get("epsilon", 0.0)),
            baseline_loss=data.get("baseline_loss"),
            baseline_bits=data.get("baseline_bits"),
            budget=data.get("budget"),
        )


@dataclass(frozen=True)
class FootprintModel:
    """Positive rational memory weights per layer, summing to exactly 1."""
    weights: dict[str, Fraction]

    def __post_init__(self) -> None:
        if not self.weights:
            raise SearchError("a footprint model needs at least one layer")
        for layer, weight in self.weights.items():
            if not isinstance(weight, Fraction) or weight <= 0:
                raise SearchError(f"footprint weight of layer {layer} must be a positive Fraction, got {weight!r}")
        total = sum(self.weights.values(), Fraction(0))
        if total != 1:
            raise SearchError(f"footprint weights sum to {total}, expected 1")

    @classmethod
    def from_counts(cls, counts: dict[str, int]) -> "FootprintModel":
        """Normalize positive integer footprints (e.g. element counts) into weights."""
        total = sum(counts.values())
        if total <= 0 or any(count <= 0 for count in counts.values()):
            raise SearchError(f"footprint counts must be positive, got {counts}")
        return cls(weights={layer: Fraction(count, total) for layer, count in counts.items()})


def equivalent_bitwidth_exact(plan: BitWidthPlan, footprint: FootprintModel) -> Fraction:
    """
    Σ w_l · P_l in exact rational arithmetic.

    :raises: SearchError when the plan and the footprint do not cover the same layers.
    """
    if set(plan.widths) != set(footprint.weights):
        raise SearchError(f"plan layers {sorted(plan.widths)} do not match footprint layers "
                          f"{sorted(footprint.weights)}")
    return sum((footprint.weights[layer] * plan.widths[layer] for layer in footprint.weights), Fraction(0))


def equivalent_bitwidth(plan: BitWidthPlan, footprint: FootprintModel) -> float:
    """
    Footprint-weighted average bit-width P_m of a plan.

    :param BitWidthPlan plan: Per-layer widths.
    :param FootprintModel footprint: Normalized per-layer weights.
    :return: P_m, computed exactly and then rendered as a float.
    :rtype: float

    :raises: SearchError on a layer mismatch.
    """
    return float(equivalent_bitwidth_exact(plan, footprint))


def synthesis_layers(model: ModelGraph) -> list[str]:
    return [layer.id for layer in model.layers if layer.kind == TCONV]


def footprint_from_graph(
        model: ModelGraph,
        mode: str = ELEMENT_COUNT,
        input_shape: tuple[int, int] = (16, 16),
        layers: list[str] | None = None,
) -> FootprintModel:
    """
    Footprint weights of a model's quantized layers.

    ``element_count`` weighs every layer by the element count of the feature map it
    produces. ``halving_synthesis`` assigns the fixed 8:4:2:1 coefficients to a
    four-layer stack in the order given (P_1 first).

    :param ModelGraph model: Model with static shapes.
    :param str mode: "element_count" or "halving_synthesis".
    :param input_shape: (H, W) used for shape propagation.
    :param layers: Layers to weigh; every quantized layer (element_count) or every
        synthesis tconv (halving_synthesis) by default.
    :return: The normalized footprint.
    :rtype: FootprintModel

    :raises: SearchError when halving_synthesis is asked for a stack that is not four layers.
    """
    match mode:
        case "element_count":
            layers = layers if layers is not None else [layer.id for layer in model.quant_layers()]
            shapes = layer_shapes(model, input_shape)
            return FootprintModel.from_counts({layer: shapes[layer].out_elements for layer in layers})
        case "halving_synthesis":
            layers = layers if layers is not None else synthesis_layers(model)
            if len(layers) != len(SYNTHESIS_COEFFICIENTS):
                raise SearchError(f"halving_synthesis footprint needs exactly {len(SYNTHESIS_COEFFICIENTS)} "
                                  f"layers, got {len(layers)}")
            return FootprintModel(weights=dict(zip(layers, SYNTHESIS_COEFFICIENTS)))
    raise SearchError(f"unknown footprint mode {mode!r}")


def bitwidth_sweep(
        evaluator: Callable[..., float],
        layers: list[str],
        widths: list[int],
) -> list[tuple[int, float]]:
    """
    Loss of the uniform plan at every width, in the given order.

    :param evaluator: Plan evaluator, called with fine-tuning enabled.
    :param layers: Quantized layer ids.
    :param widths: Uniform widths to try.
    :return: (bits, loss) pairs.
    :rtype: list[tuple[int, float]]
    """
    results = []
    for bits in widths:
        loss = float(evaluator(BitWidthPlan.uniform(layers, bits)))
        logger.info(f"Uniform {bits}-bit loss {loss:.6f}")
        results.append((bits, loss))
    return results
