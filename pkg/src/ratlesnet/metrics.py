"""Dice scoring, grouped aggregation, and the cross-validation and
cross-study evaluation harnesses.

Reports carry every (group, shams-included) cell twice: once over all scans
and once with shams dropped, since scoring empty ground truth inflates the
mean.  Empty-vs-empty predictions score 1.0, so a model that correctly
leaves a sham brain untouched is rewarded rather than skipped.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import (Manifest, Sample, TIME_POINTS, derive_seed, load_samples,
                   split_folds, split_train_val)
from .errors import ConfigError, RatlesnetError, ShapeError
from .model import Model, ModelConfig, build_model, predict_mask
from .nifti import Mask
from .training import TrainConfig, TrainResult, train


@dataclass(frozen=True)
class DiceResult:
    scan_id: str
    dice: float
    time_point: str
    sham: bool
    study: str


def dice(a: Mask, b: Mask) -> float:
    """2|a∩b| / (|a|+|b|); two empty masks count as perfect agreement."""
    if a.values.shape != b.values.shape:
        raise ShapeError(f"dice needs matching shapes, got {a.values.shape} and {b.values.shape}")
    a_bool = a.values.astype(bool)
    b_bool = b.values.astype(bool)
    total = int(a_bool.sum()) + int(b_bool.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a_bool & b_bool).sum()) / total


@dataclass(frozen=True)
class ReportRow:
    group: str
    shams_included: bool
    n: int
    mean_dice: float | None
    std_dice: float | None


@dataclass
class EvalReport:
    group_by: str  # "time_point" or "study"
    rows: list[ReportRow]
    results: list[DiceResult]

    def row(self, group: str, shams_included: bool) -> ReportRow:
        for r in self.rows:
            if r.group == group and r.shams_included == shams_included:
                return r
        raise KeyError((group, shams_included))

    def to_text(self) -> str:
        header = f"{self.group_by:<14}{'shams':<8}{'n':>4}  {'mean_dice':>10}  {'std_dice':>10}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            mean = f"{r.mean_dice:.4f}" if r.mean_dice is not None else "-"
            std = f"{r.std_dice:.4f}" if r.std_dice is not None else "-"
            shams = "yes" if r.shams_included else "no"
            lines.append(f"{r.group:<14}{shams:<8}{r.n:>4}  {mean:>10}  {std:>10}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["group,shams_included,n,mean_dice,std_dice"]
        for r in self.rows:
            mean = f"{r.mean_dice:.6f}" if r.mean_dice is not None else ""
            std = f"{r.std_dice:.6f}" if r.std_dice is not None else ""
            shams = "yes" if r.shams_included else "no"
            lines.append(f"{r.group},{shams},{r.n},{mean},{std}")
        return "\n".join(lines) + "\n"


def _group_order(results: Sequence[DiceResult], group_by: str) -> list[str]:
    if group_by == "time_point":
        seen = {r.time_point for r in results}
        return [tp for tp in TIME_POINTS if tp in seen]
    if group_by == "study":
        return sorted({r.study for r in results})
    raise ConfigError(f"group_by must be time_point or study, got {group_by!r}")


def aggregate(results: Sequence[DiceResult], group_by: str = "time_point") -> EvalReport:
    """Mean and population std per group, with and without shams, plus an
    Average row over all scans."""
    if not results:
        raise ConfigError("cannot aggregate an empty result list")
    key = (lambda r: r.time_point) if group_by == "time_point" else (lambda r: r.study)
    rows = []
    for group in _group_order(results, group_by) + ["Average"]:
        members = list(results) if group == "Average" else [r for r in results if key(r) == group]
        for shams_included in (True, False):
            subset = members if shams_included else [r for r in members if not r.sham]
            if subset:
                scores = np.array([r.dice for r in subset], dtype=np.float64)
                row = ReportRow(group=group, shams_included=shams_included, n=len(subset),
                                mean_dice=float(scores.mean()), std_dice=float(scores.std()))
            else:
                row = ReportRow(group=group, shams_included=shams_included, n=0,
                                mean_dice=None, std_dice=None)
            rows.append(row)
    return EvalReport(group_by=group_by, rows=rows, results=list(results))


def _score_samples(model: Model, samples: Sequence[Sample], threads: int) -> list[DiceResult]:
    def score(sample: Sample) -> DiceResult:
        predicted = predict_mask(model, sample.volume)
        return DiceResult(scan_id=sample.record.id, dice=dice(predicted, sample.mask),
                          time_point=sample.record.time_point, sham=sample.record.sham,
                          study=sample.record.study)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(score, samples))
    return [score(s) for s in samples]


@dataclass
class FoldOutcome:
    fold: int
    model: Model
    result: TrainResult
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]


@dataclass
class CrossvalResult:
    report: EvalReport
    folds: list[FoldOutcome]

    def audit_lines(self) -> list[str]:
        """One line per fold listing the id partition actually used."""
        lines = []
        for f in self.folds:
            lines.append(f"fold {f.fold}\ttrain={','.join(f.train_ids)}"
                         f"\tval={','.join(f.val_ids)}\ttest={','.join(f.test_ids)}")
        return lines


def crossval(manifest: Manifest, k: int, model_config: ModelConfig, train_config: TrainConfig,
             seed: int, threads: int = 1,
             epoch_callback_factory: Callable[[int], Callable] | None = None) -> CrossvalResult:
    """k-fold cross-validation over one manifest.

    Each fold trains a fresh model on the remaining folds (with an internal
    stratified validation split) and scores the held-out fold, so every scan
    is scored exactly once.
    """
    samples = {s.record.id: s for s in load_samples(manifest)}
    split = split_folds(manifest, k, seed)
    outcomes: list[FoldOutcome] = []
    all_results: list[DiceResult] = []
    for fold in range(k):
        test_ids = split.test_ids(fold)
        rest = [r for r in manifest.records if r.id not in set(test_ids)]
        train_recs, val_recs = split_train_val(rest, train_config.val_fraction,
                                               derive_seed(seed, fold, "split"))
        model = build_model(model_config)
        callback = epoch_callback_factory(fold) if epoch_callback_factory else None
        try:
            result = train(model,
                           [samples[r.id] for r in train_recs],
                           [samples[r.id] for r in val_recs],
                           policy=train_config.policy(),
                           adam=train_config.adam(),
                           seed=derive_seed(seed, fold, "train"),
                           epoch_callback=callback)
        except RatlesnetError as exc:
            raise type(exc)(f"fold {fold}: {exc}") from exc
        all_results.extend(_score_samples(model, [samples[i] for i in test_ids], threads))
        outcomes.append(FoldOutcome(fold=fold, model=model, result=result,
                                    train_ids=[r.id for r in train_recs],
                                    val_ids=[r.id for r in val_recs],
                                    test_ids=list(test_ids)))
    report = aggregate(all_results, group_by="time_point")
    return CrossvalResult(report=report, folds=outcomes)


@dataclass
class GeneralizationResult:
    report: EvalReport
    model: Model
    result: TrainResult
    train_ids: list[str]
    val_ids: list[str]


def generalization_eval(train_manifest: Manifest, test_manifests: Sequence[Manifest],
                        model_config: ModelConfig, train_config: TrainConfig, seed: int,
                        threads: int = 1,
                        epoch_callback: Callable | None = None) -> GeneralizationResult:
    """Train once on one study, score every scan of the held-out studies."""
    if not test_manifests:
        raise ConfigError("generalization_eval needs at least one test manifest")
    train_ids = set(train_manifest.ids())
    train_studies = {r.study for r in train_manifest.records}
    for m in test_manifests:
        overlap = train_ids & set(m.ids())
        if overlap:
            raise ConfigError(f"test manifest shares scan ids with training: {sorted(overlap)}")
        shared = train_studies & {r.study for r in m.records}
        if shared:
            raise ConfigError(f"test manifest reuses the training study: {sorted(shared)}")

    train_recs, val_recs = split_train_val(train_manifest.records, train_config.val_fraction,
                                           derive_seed(seed, 0, "split"))
    samples = {s.record.id: s for s in load_samples(train_manifest)}
    model = build_model(model_config)
    result = train(model,
                   [samples[r.id] for r in train_recs],
                   [samples[r.id] for r in val_recs],
                   policy=train_config.policy(),
                   adam=train_config.adam(),
                   seed=derive_seed(seed, 0, "train"),
                   epoch_callback=epoch_callback)
    all_results: list[DiceResult] = []
    for m in test_manifests:
        all_results.extend(_score_samples(model, load_samples(m), threads))
    report = aggregate(all_results, group_by="study")
    return GeneralizationResult(report=report, model=model, result=result,
                                train_ids=[r.id for r in train_recs],
                                val_ids=[r.id for r in val_recs])
