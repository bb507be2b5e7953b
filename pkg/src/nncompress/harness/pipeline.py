"""Composable compression passes and the stage-by-stage pipeline runner."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..distill import DistillConfig, distill_train, generate_soft_targets
from ..errors import CompressError, ConfigError, NumericError
from ..lowrank import FactorizationPlan, choose_ranks, rank_constrain_model
from ..nn.model import Model
from ..nn.train import TrainConfig, evaluate, train
from ..nn.zoo import build_model
from ..pruning import PruneMask, SparsitySchedule, gradual_prune_train, one_shot_prune_train
from ..tensor import Rng
from .data import Dataset
from .metrics import CompressionReport, count_params, measure_inference
from .serialize import model_to_bytes

log = logging.getLogger(__name__)


def default_schedule(sparsity: float, steps: int, events: int = 10) -> SparsitySchedule:
    """Cubic ramp from 0 that finishes halfway through ``steps``, leaving the rest to recover."""
    n = max(1, min(events, steps // 2))
    delta_t = max(1, (steps // 2) // n)
    return SparsitySchedule(0.0, sparsity, 0, delta_t, n)


@dataclass
class PrunePass:
    sparsity: float = 0.75
    gradual: bool = True
    steps: int = 500
    schedule: SparsitySchedule | None = None
    name: str = "prune"

    def resolved_schedule(self) -> SparsitySchedule:
        return self.schedule or default_schedule(self.sparsity, self.steps)


@dataclass
class LowRankPass:
    energy: float | None = 0.9
    ranks: dict[int, int] | None = None
    steps: int = 0
    name: str = "lowrank"


@dataclass
class DistillPass:
    student: str | list = "snn_student"
    temperature: float = 4.0
    soft_weight: float = 0.5
    steps: int = 500
    name: str = "distill"


Pass = PrunePass | LowRankPass | DistillPass


@dataclass
class PipelineSpec:
    passes: list[Pass]
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not self.passes:
            raise ConfigError("a pipeline needs at least one pass")

    @classmethod
    def from_dicts(cls, entries: list[dict], train_cfg: TrainConfig) -> PipelineSpec:
        passes = []
        for entry in entries:
            entry = dict(entry)
            kind = entry.pop("pass", None)
            try:
                if kind == "prune":
                    sched = entry.pop("schedule", None)
                    p = PrunePass(**entry)
                    if sched is not None:
                        p.schedule = SparsitySchedule(**sched)
                elif kind == "lowrank":
                    ranks = entry.pop("ranks", None)
                    p = LowRankPass(**entry)
                    if ranks is not None:
                        p.ranks = {int(k): int(v) for k, v in ranks.items()}
                        p.energy = None
                elif kind == "distill":
                    p = DistillPass(**entry)
                else:
                    raise ConfigError(f"unknown pass {kind!r}; use prune, lowrank or distill")
            except TypeError as exc:
                raise ConfigError(f"bad {kind} pass options: {exc}") from exc
            passes.append(p)
        return cls(passes, train_cfg)


@dataclass
class StageResult:
    model: Model
    mask: PruneMask
    traces: dict[str, list[float]]


def run_pass(p: Pass, model: Model, data: Dataset, cfg: TrainConfig) -> StageResult:
    """Apply one pass to ``model`` and return the new model, its mask and traces."""
    if isinstance(p, PrunePass):
        pcfg = replace(cfg, steps=p.steps)
        if p.gradual:
            res = gradual_prune_train(model, data, pcfg, p.resolved_schedule())
        else:
            res = one_shot_prune_train(model, data, pcfg, p.sparsity)
        traces = {"loss": res.losses, "target_sparsity": res.target_trace}
        traces.update({f"sparsity/{k}": v for k, v in res.sparsity_trace.items()})
        return StageResult(res.model, res.mask, traces)
    if isinstance(p, LowRankPass):
        if p.ranks is not None:
            plan = FactorizationPlan(dict(p.ranks))
        else:
            plan = choose_ranks(model, p.energy if p.energy is not None else 0.9)
        new = rank_constrain_model(model, plan)
        traces = {"rank/" + str(i): [float(k)] for i, k in sorted(plan.ranks.items())}
        if p.steps > 0:
            res = train(new, data, replace(cfg, steps=p.steps))
            new = res.model
            traces["loss"] = res.losses
        return StageResult(new, {}, traces)
    if isinstance(p, DistillPass):
        dcfg = DistillConfig(p.temperature, p.soft_weight, teacher=model)
        soft = generate_soft_targets(model, data, p.temperature)
        student = build_model(p.student, data.input_shape, model.num_classes, Rng(cfg.seed))
        res = distill_train(student, data, soft, replace(cfg, steps=p.steps), dcfg)
        return StageResult(res.model, {}, {"loss": res.losses})
    raise ConfigError(f"not a pipeline pass: {p!r}")


def make_report(method: str, model: Model, mask: PruneMask, baseline_nonzero: int,
                previous_nonzero: int, test: Dataset | None, timing: dict | None,
                traces: dict | None = None) -> CompressionReport:
    counts = count_params(model)
    seconds = speedup = None
    if timing is not None:
        seconds = measure_inference(model, timing["data"], timing["repeats"])
        speedup = timing["baseline_seconds"] / seconds if timing.get("baseline_seconds") else 1.0
    return CompressionReport(
        method=method,
        total_params=counts.total,
        nonzero_params=counts.nonzero,
        disk_bytes=len(model_to_bytes(model, mask)),
        compression_rate=baseline_nonzero / counts.nonzero,
        inference_seconds=seconds,
        speedup=speedup,
        accuracy=evaluate(model, test) if test is not None else None,
        aux_params=counts.aux,
        stage_rate=previous_nonzero / counts.nonzero,
        traces=traces or {},
    )


@dataclass
class PipelineResult:
    reports: list[CompressionReport]
    model: Model
    mask: PruneMask


def run_pipeline(spec: PipelineSpec, base: Model, data: Dataset, test: Dataset | None = None,
                 timing_repeats: int | None = None) -> PipelineResult:
    """Run the passes in order, each starting from the previous output.

    Reports are: the baseline, one per stage (``compression_rate`` end to end,
    ``stage_rate`` against the previous stage) and a final combined entry
    whose rate is checked against the product of the stage rates.
    """
    base_nonzero = count_params(base).nonzero
    timing = None
    if timing_repeats:
        timing = {"data": test if test is not None else data, "repeats": timing_repeats}
        timing["baseline_seconds"] = measure_inference(base, timing["data"], timing_repeats)
    baseline = make_report("baseline", base, {}, base_nonzero, base_nonzero, test, None)
    if timing is not None:
        baseline.inference_seconds, baseline.speedup = timing["baseline_seconds"], 1.0
    reports = [baseline]
    model, mask = base, {}
    prev_nonzero = base_nonzero
    names = []
    for i, p in enumerate(spec.passes):
        try:
            stage = run_pass(p, model, data, spec.train)
        except CompressError as exc:
            raise type(exc)(f"pipeline stage {i} ({p.name}): {exc}") from exc
        model, mask = stage.model, stage.mask
        names.append(p.name)
        report = make_report(p.name, model, mask, base_nonzero, prev_nonzero, test, timing,
                             stage.traces)
        reports.append(report)
        prev_nonzero = report.nonzero_params
        log.info("stage %d %s: rate %.3fx (stage %.3fx), accuracy %s", i, p.name,
                 report.compression_rate, report.stage_rate, report.accuracy)
    product = float(np.prod([r.stage_rate for r in reports[1:]]))
    final = reports[-1]
    if not math.isclose(product, final.compression_rate, rel_tol=1e-9):
        raise NumericError(f"stage rates multiply to {product}, end-to-end rate is "
                           f"{final.compression_rate}")
    combined = CompressionReport(
        method=" + ".join(names), total_params=final.total_params,
        nonzero_params=final.nonzero_params, disk_bytes=final.disk_bytes,
        compression_rate=final.compression_rate, inference_seconds=final.inference_seconds,
        speedup=final.speedup, accuracy=final.accuracy, aux_params=final.aux_params,
        stage_rate=product)
    reports.append(combined)
    return PipelineResult(reports, model, mask)
