"""
The experiment pipeline: one method per subcommand, each reading the checkpoints of
its prerequisite stage and writing its own checkpoints and CSV reports.

Stage order: train -> slim -> prune -> calibrate -> draq-finetune -> search, plus the
ablation and activation-compare experiments, and eval, bdrate, flops, int-check and
report, which only read checkpoints.
"""
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from codec.int_infer import fake_quant_trace, int_infer, max_trace_difference
from codec.model import ModelGraph, build_model
from codec.train import eval_loss, eval_rd_point, train
from draq.analysis import calibration_report, distribution_report
from draq.calibration import calibrate, calibration_subset, collect_activation_stats, install_clips
from draq.finetune import DraqConfig, draq_finetune
from evaluation.rd_metrics import BDRateError, RDCurve, RDCurveError, RDPoint, bd_rate, msqe_rows, msqe_table
from hwopt.bitwidth import bitwidth_sweep, equivalent_bitwidth, footprint_from_graph
from hwopt.flops import flops_count, flops_rows
from hwopt.search import PlanEvaluator, progressive_search
from hwopt.slimming import prune_and_finetune, slim_train
from monitoring import metrics
from storage.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from storage.config import RunConfig
from storage.datasets import DatasetError, load_dataset, synth_dataset
from storage.reports import write_report

logger = logging.getLogger("lic-quant.stages")

STAGES = ("train", "slim", "prune", "calibrate", "draq-finetune", "search", "ablation", "activation-compare",
          "eval", "bdrate", "flops", "int-check", "report")

# Checkpoint variants, in the order reports list them
FP, SLIM, PRUNED, CALIBRATED, DRAQ, QAT = "fp", "slim", "pruned", "calibrated", "draq", "qat"
SEARCHED, SEARCHED_QAT = "searched", "searched_qat"
EVAL_VARIANTS = (FP, PRUNED, QAT, DRAQ, SEARCHED_QAT, SEARCHED)
PRODUCER = {FP: "train", SLIM: "slim", PRUNED: "prune", CALIBRATED: "calibrate",
            DRAQ: "draq-finetune", QAT: "draq-finetune", SEARCHED: "search", SEARCHED_QAT: "search"}

# Fine-tuning settings compared by the ablation stage, plus the unquantized model with clips
BASELINE, CLIP_ONLY, REG_ONLY, BOTH, FP_CLIPPED = "baseline", "clip_only", "reg_only", "both", "fp_clipped"
ABLATION_VARIANTS = (BASELINE, CLIP_ONLY, REG_ONLY, BOTH, FP_CLIPPED)
ACTIVATIONS = ("relu", "gdn")

INT_CHECK_IMAGES = 10


class PrerequisiteError(Exception):
    """Raised when a stage runs before the stage whose checkpoint it needs."""

    def __init__(self, stage: str, required: str, detail: str = "") -> None:
        super().__init__(f"stage '{stage}' requires the output of stage '{required}'"
                         + (f" ({detail})" if detail else ""))
        self.stage = stage
        self.required = required


class Pipeline:
    """
    Runs stages for every λ of a configuration.

    Checkpoints live under ``<out>/checkpoints/<variant>/lambda_<λ>`` and reports
    under ``<out>/reports``.
    """

    def __init__(self, config: RunConfig, out_dir: str | Path | None = None) -> None:
        self.config = config
        self.out_dir = Path(out_dir if out_dir is not None else config.output_dir)
        self.config_hash = config.config_hash()
        self._images: tuple[list[np.ndarray], list[np.ndarray]] | None = None

    # Paths and data

    def checkpoint_dir(self, variant: str, lmbda: float) -> Path:
        return self.out_dir / "checkpoints" / variant / f"lambda_{lmbda!r}"

    def report_path(self, name: str) -> Path:
        return self.out_dir / "reports" / f"{name}.csv"

    def images(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """(training images, held-out evaluation images)."""
        if self._images is None:
            spec = self.config.dataset
            dataset = load_dataset(spec.path) if spec.path is not None else synth_dataset(**spec.synthetic)
            if len(dataset) <= spec.eval_images:
                raise DatasetError(spec.path or "<synthetic>", 0,
                                   f"{len(dataset)} images cannot hold out {spec.eval_images} for evaluation")
            split = len(dataset) - spec.eval_images
            self._images = dataset[:split], dataset[split:] or dataset[:1]
        return self._images

    def calib_set(self) -> list[np.ndarray]:
        return calibration_subset(self.images()[0], self.config.training.crop)

    def has(self, variant: str, lmbda: float) -> bool:
        return (self.checkpoint_dir(variant, lmbda) / "manifest.json").exists()

    def load(self, stage: str, variant: str, lmbda: float) -> Checkpoint:
        if not self.has(variant, lmbda):
            raise PrerequisiteError(stage, PRODUCER[variant], f"no {variant} checkpoint for lambda {lmbda}")
        return load_checkpoint(self.checkpoint_dir(variant, lmbda))

    def save(self, variant: str, lmbda: float, model: ModelGraph, **kwargs: Any) -> None:
        checkpoint = Checkpoint(model=model, stage=PRODUCER[variant], seed=self.config.seed,
                                config_hash=self.config_hash, **kwargs)
        save_checkpoint(checkpoint, self.checkpoint_dir(variant, lmbda))

    def report(self, name: str, rows: list[dict[str, Any]], schema_name: str | None = None) -> Path:
        return write_report(self.report_path(name), schema_name or name, rows, self.config_hash, self.config.seed)

    # Stages

    def train(self) -> None:
        images, _ = self.images()
        rows = []
        for lmbda in self.config.training.lambdas:
            model = build_model(self.config.model)
            result = train(model, images, self.config.training.train_config(lmbda))
            metrics.record_training("train", result.losses)
            rows.extend({"lambda": lmbda, "iteration": i, "loss": loss} for i, loss in result.trace)
            self.save(FP, lmbda, model)
        self.report("train", rows)

    def slim(self) -> None:
        images, _ = self.images()
        slimming = self.config.slimming
        rows = []
        for lmbda in self.config.training.lambdas:
            checkpoint = self.load("slim", FP, lmbda)
            result = slim_train(checkpoint.model, images, self.config.training.train_config(lmbda, slimming.iters),
                                slimming.eta)
            metrics.record_training("slim", result.training.losses)
            for layer, (counts, edges) in result.histograms.items():
                rows.extend({"layer": layer, "bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]),
                             "count": int(counts[i])} for i in range(len(counts)))
            self.save(SLIM, lmbda, result.model)
        self.report("scale_histogram", rows)

    def prune(self) -> None:
        images, _ = self.images()
        slimming, crop = self.config.slimming, self.config.training.crop
        rows = []
        for lmbda in self.config.training.lambdas:
            checkpoint = self.load("prune", SLIM, lmbda)
            pruned, report, training = prune_and_finetune(
                checkpoint.model, images, self.config.training.train_config(lmbda, slimming.iters),
                slimming.epsilon_p, (crop, crop))
            metrics.record_training("prune", training.losses)
            metrics.record_pruning(report.channels_before, report.channels_after)
            rows.extend(report.rows())
            self.save(PRUNED, lmbda, pruned, prune_report=report)
        self.report("prune", rows)

    def calibrate(self) -> None:
        draq = self.config.draq
        calib_set = self.calib_set()
        calibration_rows, distribution_rows = [], []
        for lmbda in self.config.training.lambdas:
            source = PRUNED if self.has(PRUNED, lmbda) else FP
            checkpoint = self.load("calibrate", source, lmbda)
            model = checkpoint.model
            distribution_rows.extend(distribution_report(model, calib_set))
            stats = calibrate(model, calib_set, lmbda, draq.clip_activations, draq.k_override, draq.alpha, draq.bits)
            calibration_rows.extend(calibration_report(model, stats))
            self.save(CALIBRATED, lmbda, model, stats=stats, prune_report=checkpoint.prune_report,
                      extra={"source": source})
        self.report("calibration", calibration_rows)
        self.report("distribution", distribution_rows)

    def draq_finetune(self) -> None:
        images, _ = self.images()
        draq = self.config.draq
        calib_set = self.calib_set()
        variants = {DRAQ: draq.draq_config(), QAT: DraqConfig.baseline(alpha=draq.alpha, bits=draq.bits)}
        for lmbda in self.config.training.lambdas:
            for variant, draq_cfg in variants.items():
                checkpoint = self.load("draq-finetune", CALIBRATED, lmbda)
                result = draq_finetune(checkpoint.model, images,
                                       self.config.training.train_config(lmbda, draq.finetune_iters),
                                       draq_cfg, calib_set)
                metrics.record_training(f"draq-finetune:{variant}", result.training.losses)
                self.save(variant, lmbda, result.model, stats=result.stats, prune_report=checkpoint.prune_report,
                          extra={"outliers_before": result.outliers_before,
                                 "outliers_after": result.outliers_after})

    def search(self) -> None:
        """Search the DRAQ model and, for comparison, the plain-QAT one; QAT reports carry a ``_qat`` suffix."""
        draq = self.config.draq
        sources = {SEARCHED: (DRAQ, draq.draq_config()),
                   SEARCHED_QAT: (QAT, DraqConfig.baseline(alpha=draq.alpha, bits=draq.bits))}
        for variant, (source, draq_cfg) in sources.items():
            self._search_variant(variant, source, draq_cfg, "" if variant == SEARCHED else "_qat")

    def _search_variant(self, variant: str, source: str, draq_cfg: DraqConfig, suffix: str) -> None:
        images, eval_images = self.images()
        search, crop = self.config.search, self.config.training.crop
        step_rows, plan_rows, sweep_rows = [], [], []
        for lmbda in self.config.training.lambdas:
            checkpoint = self.load("search", source, lmbda)
            evaluator = PlanEvaluator(checkpoint.model, checkpoint.stats, images, eval_images,
                                      self.config.training.train_config(lmbda), draq_cfg,
                                      finetune_iters=search.finetune_iters, calib_set=self.calib_set())
            layers = [layer.id for layer in checkpoint.model.quant_layers()]
            footprint = footprint_from_graph(checkpoint.model, input_shape=(crop, crop))
            result = progressive_search(layers, evaluator, search.eps, search.order, search.start_bits,
                                        search.floor_bits, search.probe_bits, search.budget, footprint)
            metrics.record_search_steps(result.rows())
            step_rows.extend(result.rows())
            plan_rows.extend({"layer": layer, "bits": bits, "footprint_weight": float(footprint.weights[layer])}
                             for layer, bits in result.plan.widths.items())
            logger.info(f"{variant} lambda={lmbda}: equivalent bit-width "
                        f"{equivalent_bitwidth(result.plan, footprint):.4f} "
                        f"(uniform baseline {result.plan.baseline_bits})")
            widths = list(range(search.start_bits, search.floor_bits - 1, -1))
            sweep_rows.extend({"bits": bits, "loss": loss} for bits, loss in bitwidth_sweep(evaluator, layers, widths))
            self.save(variant, lmbda, evaluator.build(result.plan), stats=checkpoint.stats, plan=result.plan,
                      prune_report=checkpoint.prune_report)
        self.report(f"search_steps{suffix}", step_rows, "search_steps")
        self.report(f"bitwidth_plan{suffix}", plan_rows, "bitwidth_plan")
        self.report(f"bitwidth_sweep{suffix}", sweep_rows, "bitwidth_sweep")

    def ablation(self) -> None:
        """
        BD-rate against the full-precision curve of each DRAQ component on its own,
        of plain QAT, of both components together, and of the unquantized model with
        calibrated clips.
        """
        images, eval_images = self.images()
        draq = self.config.draq
        calib_set = self.calib_set()
        full = draq.draq_config()
        settings = {CLIP_ONLY: replace(full, clip_activations=True, regularize_weights=False),
                    REG_ONLY: replace(full, clip_activations=False, regularize_weights=True),
                    BOTH: replace(full, clip_activations=True, regularize_weights=True)}
        reference: list[RDPoint] = []
        points: dict[str, list[RDPoint]] = {}
        point_rows = []
        for lmbda in self.config.training.lambdas:
            reference.append(eval_rd_point(self.load("ablation", FP, lmbda).model, eval_images))
            models = {BASELINE: self.load("ablation", QAT, lmbda).model}
            for name, draq_cfg in settings.items():
                if name == BOTH and full.clip_activations and full.regularize_weights:
                    models[name] = self.load("ablation", DRAQ, lmbda).model
                    continue
                checkpoint = self.load("ablation", CALIBRATED, lmbda)
                result = draq_finetune(checkpoint.model, images,
                                       self.config.training.train_config(lmbda, draq.finetune_iters),
                                       draq_cfg, calib_set)
                metrics.record_training(f"ablation:{name}", result.training.losses)
                models[name] = result.model
            models[FP_CLIPPED] = self._fp_clipped(lmbda, calib_set)
            for name in ABLATION_VARIANTS:
                row = self._point_row(name, lmbda, models[name])
                points.setdefault(name, []).append(RDPoint(row["bpp"], row["psnr"]))
                point_rows.append(row)
        rows = []
        try:
            reference_curve = RDCurve(reference, label=FP)
        except RDCurveError as e:
            logger.warning(f"No ablation BD-rates, the full-precision curve is invalid: {e}")
        else:
            for name in ABLATION_VARIANTS:
                try:
                    rows.append({"variant": name,
                                 "bd_rate": bd_rate(reference_curve, RDCurve(points[name], label=name))})
                except (RDCurveError, BDRateError) as e:
                    logger.warning(f"No ablation BD-rate for {name}: {e}")
        self.report("ablation", rows)
        self.report("ablation_points", point_rows, "rd_points")

    def _fp_clipped(self, lmbda: float, calib_set: list[np.ndarray]) -> ModelGraph:
        """The pre-trained model with calibrated clips installed, fine-tuned without quantization."""
        images, _ = self.images()
        draq = self.config.draq
        model = self.load("ablation", PRUNED if self.has(PRUNED, lmbda) else FP, lmbda).model
        install_clips(model, collect_activation_stats(model, calib_set), lmbda, True, draq.k_override)
        result = train(model, images, self.config.training.train_config(lmbda, draq.finetune_iters))
        metrics.record_training(f"ablation:{FP_CLIPPED}", result.losses)
        return model

    def activation_compare(self) -> None:
        """
        Point-by-point RD comparison of the ReLU and GDN codecs, full precision and
        after DRAQ fine-tuning. The configured activation reuses its checkpoints; the
        other one is trained and fine-tuned here with the same settings.
        """
        images, _ = self.images()
        draq = self.config.draq
        calib_set = self.calib_set()
        configured = self.config.model.activation
        rows = []
        for lmbda in self.config.training.lambdas:
            for activation in ACTIVATIONS:
                if activation == configured:
                    fp_model = self.load("activation-compare", FP, lmbda).model
                    draq_model = self.load("activation-compare", DRAQ, lmbda).model
                else:
                    fp_model = build_model(replace(self.config.model, activation=activation, slim=False))
                    result = train(fp_model, images, self.config.training.train_config(lmbda))
                    metrics.record_training(f"activation-compare:{activation}", result.losses)
                    draq_model = fp_model.copy()
                    draq_finetune(draq_model, images, self.config.training.train_config(lmbda, draq.finetune_iters),
                                  draq.draq_config(), calib_set)
                for variant, model in ((FP, fp_model), (DRAQ, draq_model)):
                    rows.append({"activation": activation, **self._point_row(variant, lmbda, model)})
        for variant in (FP, DRAQ):
            by_activation = {activation: [row["psnr"] for row in rows
                                          if row["activation"] == activation and row["variant"] == variant]
                             for activation in ACTIVATIONS}
            gaps = np.subtract(by_activation["gdn"], by_activation["relu"])
            logger.info(f"{variant}: GDN minus ReLU PSNR per lambda {np.round(gaps, 3).tolist()} dB")
        self.report("activation_compare", rows)

    def _point_row(self, variant: str, lmbda: float, model: ModelGraph) -> dict[str, Any]:
        _, eval_images = self.images()
        point = eval_rd_point(model, eval_images)
        return {"variant": variant, "lambda": lmbda, "bpp": point.bpp, "psnr": point.psnr,
                "loss": eval_loss(model, eval_images, lmbda)}

    def _rd_points(self) -> list[dict[str, Any]]:
        rows = []
        for variant in EVAL_VARIANTS:
            for lmbda in self.config.training.lambdas:
                if self.has(variant, lmbda):
                    model = load_checkpoint(self.checkpoint_dir(variant, lmbda)).model
                    rows.append(self._point_row(variant, lmbda, model))
        return rows

    def eval(self) -> None:
        if not any(self.has(FP, lmbda) for lmbda in self.config.training.lambdas):
            raise PrerequisiteError("eval", "train")
        self.report("rd_points", self._rd_points())

    def _curves(self, stage: str) -> dict[str, RDCurve]:
        points: dict[str, list[RDPoint]] = {}
        for row in self._rd_points():
            points.setdefault(row["variant"], []).append(RDPoint(row["bpp"], row["psnr"]))
        if FP not in points:
            raise PrerequisiteError(stage, "train")
        curves = {}
        for variant, variant_points in points.items():
            try:
                curves[variant] = RDCurve(variant_points, label=variant)
            except RDCurveError as e:
                logger.warning(f"Skipping {variant} curve: {e}")
        return curves

    def bdrate(self) -> None:
        curves = self._curves("bdrate")
        if FP not in curves:
            raise RDCurveError("the full-precision points do not form a valid RD curve")
        rows = []
        for variant, curve in curves.items():
            if variant == FP:
                continue
            try:
                rows.append({"reference": FP, "test": variant, "bd_rate": bd_rate(curves[FP], curve)})
            except BDRateError as e:
                logger.warning(f"No BD-rate for {variant}: {e}")
        self.report("bdrate", rows)

    def flops(self) -> None:
        crop = self.config.training.crop
        lmbda = self.config.training.lambdas[0]
        for variant in (FP, PRUNED):
            if variant == FP or self.has(variant, lmbda):
                model = self.load("flops", variant, lmbda).model
                self.report(f"flops_{variant}", flops_rows(flops_count(model, (crop, crop))), "flops")

    def int_check(self) -> None:
        _, eval_images = self.images()
        lmbda = self.config.training.lambdas[0]
        model = self.load("int-check", DRAQ, lmbda).model
        worst: dict[str, int] = {}
        for image in eval_images[:INT_CHECK_IMAGES]:
            differences = max_trace_difference(int_infer(model, image), fake_quant_trace(model, image))
            for layer, difference in differences.items():
                worst[layer] = max(worst.get(layer, 0), difference)
        for layer, difference in worst.items():
            if difference > 1:
                logger.warning(f"Integer datapath differs from fake-quant by {difference} LSB at {layer}")
        self.report("int_check", [{"layer": layer, "max_lsb_difference": d} for layer, d in worst.items()])

    def report_all(self) -> None:
        calib_set = self.calib_set()
        lmbda = self.config.training.lambdas[0]
        for variant in (QAT, DRAQ):
            model = self.load("report", variant, lmbda).model
            rows = msqe_rows(msqe_table(model, calib_set))
            if variant == DRAQ:
                metrics.record_msqe(rows)
            self.report(f"msqe_{variant}", rows, "msqe")
        curves = self._curves("report")
        self.report("rd_curve", [{"variant": variant, "bpp": p.bpp, "psnr": p.psnr}
                                 for variant, curve in curves.items() for p in curve.points])
        metrics.export_metrics(self.out_dir)

    def run(self, stage: str) -> None:
        """
        Run one stage and record its outcome and duration.

        :raises: ValueError on an unknown stage name; stage errors propagate unchanged.
        """
        handlers: dict[str, Callable[[], None]] = {
            "train": self.train,
            "slim": self.slim,
            "prune": self.prune,
            "calibrate": self.calibrate,
            "draq-finetune": self.draq_finetune,
            "search": self.search,
            "ablation": self.ablation,
            "activation-compare": self.activation_compare,
            "eval": self.eval,
            "bdrate": self.bdrate,
            "flops": self.flops,
            "int-check": self.int_check,
            "report": self.report_all,
        }
        if stage not in handlers:
            raise ValueError(f"unknown stage {stage!r}; expected one of {list(STAGES)}")
        logger.info(f"Running stage {stage} (config {self.config_hash[:12]}, seed {self.config.seed})")
        start = time.perf_counter()
        try:
            handlers[stage]()
        except Exception:
            metrics.stage_runs.labels(stage=stage, status="error").inc()
            raise
        finally:
            metrics.stage_latency.labels(stage=stage).observe(time.perf_counter() - start)
        metrics.stage_runs.labels(stage=stage, status="ok").inc()
        logger.info(f"Stage {stage} finished in {time.perf_counter() - start:.1f}s")
