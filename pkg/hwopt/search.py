"""
Progressive mixed-precision search.

Phase 1 lowers one uniform width from ``start_bits`` while the loss stays within
``ε`` of the reference loss at ``start_bits``. Phase 2 then lowers each layer in turn,
the others held fixed, and freezes it at the lowest conforming width. With a P_m
budget, Phase 3 keeps dropping single bits, cheapest loss first, until the
footprint-weighted width fits; the budget then overrides the tolerance.
"""
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Protocol

import numpy as np

from codec.model import ModelGraph, set_bit_widths
from codec.train import TrainConfig, eval_loss
from draq.calibration import CalibStats, bind_activation_specs
from draq.finetune import DraqConfig, draq_finetune
from hwopt.bitwidth import BitWidthPlan, FootprintModel, SearchError, equivalent_bitwidth, equivalent_bitwidth_exact
from quant.quantizer import MAX_BITS, MIN_BITS

logger = logging.getLogger("lic-quant.hwopt.search")

BY_SENSITIVITY = "by_sensitivity"
GIVEN = "given"

DEFAULT_PROBE_BITS = 6
DEFAULT_FINETUNE_ITERS = 300
UNIFORM_LAYER = "*"

STEP_COLUMNS = ["step", "layer", "width", "loss", "accepted"]


class Evaluator(Protocol):
    def __call__(self, plan: BitWidthPlan, finetune: bool = True) -> float: ...


@dataclass
class SearchStep:
    step: int
    phase: int
    layer: str
    width: int
    loss: float
    accepted: bool

    def row(self) -> dict[str, Any]:
        return {"step": self.step, "layer": self.layer, "width": self.width, "loss": self.loss,
                "accepted": int(self.accepted)}


@dataclass
class SearchResult:
    plan: BitWidthPlan
    reference_loss: float
    steps: list[SearchStep] = field(default_factory=list)
    order: list[str] = field(default_factory=list)

    def rows(self) -> list[dict[str, Any]]:
        return [step.row() for step in self.steps]


class _GuardedEvaluator:
    """
    Records every loss so a repeated plan can be checked for determinism.

    ``verify`` re-runs a plan through the evaluator's uncached ``fresh`` path when it
    has one, so a memoizing evaluator is still checked.
    """

    def __init__(self, evaluator: Evaluator) -> None:
        self.evaluator = evaluator
        self.seen: dict[tuple, float] = {}

    def __call__(self, plan: BitWidthPlan, finetune: bool = True) -> float:
        loss = float(self.evaluator(plan, finetune=finetune))
        key = (plan.key(), finetune)
        if key in self.seen and self.seen[key] != loss:
            raise SearchError(f"evaluator is not deterministic: plan {dict(plan.widths)} gave "
                              f"{self.seen[key]} and then {loss}")
        self.seen[key] = loss
        return loss

    def verify(self, plan: BitWidthPlan, finetune: bool = True) -> float:
        """
        Evaluate ``plan`` and evaluate it again from scratch.

        :raises: SearchError when the two losses differ.
        """
        loss = self(plan, finetune=finetune)
        rerun = getattr(self.evaluator, "fresh", self.evaluator)
        again = float(rerun(plan, finetune=finetune))
        if again != loss:
            raise SearchError(f"evaluator is not deterministic: plan {dict(plan.widths)} gave "
                              f"{loss} and then {again}")
        return loss


def sensitivity_rank(
        layers: list[str],
        evaluator: Evaluator,
        probe_bits: int = DEFAULT_PROBE_BITS,
        base_bits: int = MAX_BITS,
) -> list[str]:
    """
    Order layers by how much their loss rises when that layer alone drops to
    ``probe_bits`` (no fine-tuning), most sensitive first.

    :param layers: Quantized layer ids in model order.
    :param evaluator: Plan evaluator.
    :param int probe_bits: Width of the probed layer.
    :param int base_bits: Width of every other layer.
    :return: Layer ids, ties broken by model order.
    :rtype: list[str]
    """
    base = BitWidthPlan.uniform(layers, base_bits)
    base_loss = float(evaluator(base, finetune=False))
    increases = [float(evaluator(base.with_bits(layer, probe_bits), finetune=False)) - base_loss
                 for layer in layers]
    order = sorted(range(len(layers)), key=lambda i: (-increases[i], i))
    logger.info(f"Sensitivity order at {probe_bits} bits: {[layers[i] for i in order]}")
    return [layers[i] for i in order]


def progressive_search(
        layers: list[str],
        evaluator: Evaluator,
        eps: float,
        layer_order: str | list[str] = BY_SENSITIVITY,
        start_bits: int = MAX_BITS,
        floor_bits: int = MIN_BITS,
        probe_bits: int = DEFAULT_PROBE_BITS,
        budget: float | None = None,
        footprint: FootprintModel | None = None,
) -> SearchResult:
    """
    Greedy search for the lowest per-layer widths within ``eps`` of the reference
    loss, optionally pushed down to a P_m budget.

    :param layers: Quantized layer ids in model order.
    :param evaluator: Deterministic plan evaluator (fine-tunes when asked).
    :param float eps: Loss tolerance over the reference loss at ``start_bits``.
    :param layer_order: "by_sensitivity", "given" (model order) or an explicit list.
    :param int start_bits: Width of the reference model.
    :param int floor_bits: Lowest width ever tried.
    :param int probe_bits: Probe width of the sensitivity ranking.
    :param budget: Largest acceptable equivalent bit-width P_m, or None.
    :param footprint: Per-layer weights defining P_m; required with ``budget``.
    :return: The plan, the reference loss and the step log.
    :rtype: SearchResult

    :raises: SearchError on invalid bounds, an unreachable budget, a non-deterministic
        evaluator or a plan that fails the final re-check.
    """
    if not layers:
        raise SearchError("nothing to search: no quantized layers")
    if eps < 0:
        raise SearchError(f"eps must be non-negative, got {eps}")
    if not MIN_BITS <= floor_bits <= start_bits <= MAX_BITS:
        raise SearchError(f"need {MIN_BITS} <= floor_bits <= start_bits <= {MAX_BITS}, "
                          f"got floor={floor_bits} start={start_bits}")
    if budget is not None:
        if footprint is None:
            raise SearchError("a P_m budget needs a footprint model")
        if set(footprint.weights) != set(layers):
            raise SearchError(f"footprint layers {sorted(footprint.weights)} do not match {sorted(layers)}")
        if budget < floor_bits:
            raise SearchError(f"budget {budget} is below floor_bits {floor_bits} and cannot be met")
    guarded = _GuardedEvaluator(evaluator)
    steps: list[SearchStep] = []

    def log_step(phase: int, layer: str, width: int, loss: float, accepted: bool) -> None:
        steps.append(SearchStep(len(steps), phase, layer, width, loss, accepted))
        logger.info(f"search phase {phase} {layer}@{width}: loss={loss:.6f} "
                    f"{'accepted' if accepted else 'rejected'}")

    reference = BitWidthPlan.uniform(layers, start_bits)
    reference_loss = guarded.verify(reference)
    threshold = reference_loss + eps
    log_step(1, UNIFORM_LAYER, start_bits, reference_loss, True)

    baseline_bits, baseline_loss = start_bits, reference_loss
    for bits in range(start_bits - 1, floor_bits - 1, -1):
        loss = guarded(BitWidthPlan.uniform(layers, bits))
        accepted = loss <= threshold
        log_step(1, UNIFORM_LAYER, bits, loss, accepted)
        if not accepted:
            break
        baseline_bits, baseline_loss = bits, loss
    logger.info(f"Uniform baseline: {baseline_bits} bits, loss {baseline_loss:.6f}")

    plan = BitWidthPlan.uniform(layers, baseline_bits, epsilon=eps, baseline_loss=baseline_loss,
                                baseline_bits=baseline_bits, budget=budget)
    if isinstance(layer_order, list):
        if sorted(layer_order) != sorted(layers):
            raise SearchError(f"layer order {layer_order} is not a permutation of {layers}")
        order = list(layer_order)
    elif layer_order == GIVEN:
        order = list(layers)
    elif layer_order == BY_SENSITIVITY:
        order = sensitivity_rank(layers, guarded, probe_bits, base_bits=baseline_bits)
    else:
        raise SearchError(f"unknown layer order {layer_order!r}")

    for layer in order:
        for bits in range(plan.widths[layer] - 1, floor_bits - 1, -1):
            candidate = plan.with_bits(layer, bits)
            loss = guarded(candidate)
            accepted = loss <= threshold
            log_step(2, layer, bits, loss, accepted)
            if not accepted:
                break
            plan = candidate
        plan.frozen[layer] = True

    forced = False
    while budget is not None and equivalent_bitwidth_exact(plan, footprint) > Fraction(budget):
        forced = True
        # least sensitive first, so ties in loss go to the layer ranked last
        trials = []
        for layer in reversed(order):
            if plan.widths[layer] > floor_bits:
                candidate = plan.with_bits(layer, plan.widths[layer] - 1)
                trials.append((guarded(candidate), candidate, layer))
        best = min(range(len(trials)), key=lambda i: trials[i][0])
        for i, (loss, candidate, layer) in enumerate(trials):
            log_step(3, layer, candidate.widths[layer], loss, i == best)
        plan = trials[best][1]
    if forced:
        logger.info(f"Budget {budget} met at P_m {equivalent_bitwidth(plan, footprint):.4f}")

    final_loss = guarded.verify(plan)
    if final_loss > threshold and not forced:
        raise SearchError(f"searched plan has loss {final_loss} above the tolerance {threshold}")
    logger.info(f"Searched plan {dict(plan.widths)} with loss {final_loss:.6f}")
    return SearchResult(plan=plan, reference_loss=reference_loss, steps=steps, order=order)


class PlanEvaluator:
    """
    Loss of a bit-width plan on a calibrated model: copy the model, apply the plan,
    fine-tune a fixed budget with DRAQ, and return the eval-mode RD loss.

    Results are memoized per (plan, finetune); ``fresh`` bypasses the memo.
    """

    def __init__(
            self,
            model: ModelGraph,
            stats: CalibStats,
            dataset: list[np.ndarray],
            eval_images: list[np.ndarray],
            train_cfg: TrainConfig,
            draq_cfg: DraqConfig,
            finetune_iters: int = DEFAULT_FINETUNE_ITERS,
            calib_set: list[np.ndarray] | None = None,
    ) -> None:
        self.model = model
        self.stats = stats
        self.dataset = dataset
        self.eval_images = eval_images
        self.train_cfg = replace(train_cfg, iters=finetune_iters)
        self.draq_cfg = replace(draq_cfg, bits=None)
        self.calib_set = calib_set
        self.cache: dict[tuple, float] = {}
        self.evaluations = 0

    def build(self, plan: BitWidthPlan, finetune: bool = True) -> ModelGraph:
        """The model with ``plan`` applied (and fine-tuned when asked)."""
        candidate = self.model.copy()
        set_bit_widths(candidate, plan.widths)
        if finetune and self.train_cfg.iters > 0:
            draq_finetune(candidate, self.dataset, self.train_cfg, self.draq_cfg, self.calib_set)
        else:
            bind_activation_specs(candidate, self.stats)
        return candidate

    def fresh(self, plan: BitWidthPlan, finetune: bool = True) -> float:
        """Build and evaluate ``plan`` without consulting or filling the memo."""
        self.evaluations += 1
        return eval_loss(self.build(plan, finetune), self.eval_images, self.train_cfg.lmbda)

    def __call__(self, plan: BitWidthPlan, finetune: bool = True) -> float:
        key = (plan.key(), finetune)
        if key not in self.cache:
            self.cache[key] = self.fresh(plan, finetune)
        return self.cache[key]

