"""
Training strategies and the experiment harnesses built on them.

A strategy turns an ExperimentSpec into a trained SNet and a metric
report on the held-out target cases:

    target_only         supervised on target data
    mix_direct          supervised on pooled source + target data
    mix_resampled       as mix_direct, source first resampled to target spacing
    finetune            SNet-s on source, then supervised on target
    finetune_resampled  as finetune, source first resampled
    adapt_ce            SNet-s, then adversarial adaptation with plain losses
    adapt_bowda         SNet-s, then adversarial adaptation with boundary-weighted losses
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.config_validator import SNET_PRESETS, STRATEGIES, ExperimentSpec, canonical_json
from .dataset import PreparedData, prepare_data
from .errors import DegenerateVarianceError
from .metrics import METRICS, SegmentationAnalyzer, five_number_summary, paired_ttest
from .trainer import TrainingEngine, evaluate_net

logger = logging.getLogger(__name__)

RESAMPLED = {"mix_resampled", "finetune_resampled"}
FROM_SOURCE = {"finetune", "finetune_resampled", "adapt_ce", "adapt_bowda"}
LOSS_COMBINATIONS: Tuple[Tuple[str, str], ...] = (("ce", "ce"), ("bwsl", "ce"), ("ce", "bwtl"), ("bwsl", "bwtl"))


@dataclass
class StrategyReport:
    strategy: str
    analyzer: SegmentationAnalyzer
    output_dir: Path
    steps: List[str] = field(default_factory=list)
    source_checkpoint: Optional[Path] = None

    @property
    def mean_dsc(self) -> float:
        return float(np.nanmean(self.analyzer.values("dsc")))


def effective_spec(spec: ExperimentSpec) -> ExperimentSpec:
    """adapt_ce pins both adversarial losses to the unweighted ones."""
    if spec.strategy == "adapt_ce":
        return spec.with_strategy("adapt_ce", adversarial__seg_loss="ce", adversarial__disc_loss="ce")
    return spec


def _train(engine: TrainingEngine, spec: ExperimentSpec, data: PreparedData,
           source_checkpoint: Optional[Path]) -> Tuple[object, Optional[Path]]:
    strategy = spec.strategy
    target = data.target

    if strategy == "target_only":
        return engine.train_target(engine.build_snet(), target.train_pairs(), target).net, None

    if strategy in ("mix_direct", "mix_resampled"):
        pooled = data.source.train_pairs() + target.train_pairs()
        engine.log(f"pooled training set: {len(data.source.train)} source + {len(target.train)} target")
        return engine.train_target(engine.build_snet(), pooled, target).net, None

    if source_checkpoint is None:
        source_checkpoint = engine.train_source(data.source).best_path
    else:
        engine.log(f"reusing SNet-s checkpoint {source_checkpoint}")
    snet_t = engine.init_target_from_source(source_checkpoint)

    if strategy in ("finetune", "finetune_resampled"):
        return engine.train_target(snet_t, target.train_pairs(), target).net, source_checkpoint

    snet_s = engine.load_snet(source_checkpoint)
    result = engine.train_adversarial(snet_s, snet_t, data.source, target)
    return result.net, source_checkpoint


def run_strategy(spec: ExperimentSpec, output_dir=None, workers: int = 1, progress: bool = False,
                 log_callback: Optional[Callable[[str], None]] = None,
                 source_checkpoint=None) -> StrategyReport:
    """
    Run one strategy end to end and write into ``output_dir``:
    spec.json, preprocessing.log, checkpoints, step logs, metrics.csv, run.log.

    ``source_checkpoint`` skips SNet-s training for strategies that start
    from it; the checkpoint must match the spec's network configuration.
    """
    spec = effective_spec(spec)
    out = Path(output_dir or spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(canonical_json(spec) + "\n", encoding="utf-8")

    engine = TrainingEngine(spec, out, workers=workers, log_callback=log_callback, progress=progress)
    engine.log(f"strategy {spec.strategy}, seed {spec.seed}")
    data = prepare_data(spec, resample_source=spec.strategy in RESAMPLED, workers=workers)
    (out / "preprocessing.log").write_text("\n".join(data.steps) + "\n", encoding="utf-8")

    net, source_ckpt = _train(engine, spec, data, Path(source_checkpoint) if source_checkpoint else None)

    analyzer = evaluate_net(net, data.target.val, spec, workers, name=spec.strategy)
    analyzer.to_csv(out / "metrics.csv")
    report = StrategyReport(spec.strategy, analyzer, out, data.steps, source_ckpt)
    engine.log(f"{spec.strategy}: target validation DSC {report.mean_dsc:.2f} over {len(data.target.val)} cases")
    engine.write_log()
    return report


# ══════════════════════════════════════════════════════════════════
# Harnesses
# ══════════════════════════════════════════════════════════════════

def _whole_means(analyzer: SegmentationAnalyzer) -> Dict[str, float]:
    summary = analyzer.analyze().get("whole", {})
    return {metric: summary.get(metric, {}).get("mean", float("nan")) for metric in METRICS}


def _seeded(spec: ExperimentSpec, strategy: str, seed: int, **updates) -> ExperimentSpec:
    return spec.with_strategy(strategy, seed=seed, **updates)


def _pooled_dsc(reports: Sequence[StrategyReport]) -> pd.Series:
    """Per-case whole-volume DSC across seeds, keyed 'seed/case'."""
    parts = []
    for seed_index, report in enumerate(reports):
        whole = report.analyzer.region("whole")
        parts.append(pd.Series(whole["dsc"].astype(float).to_numpy(),
                               index=[f"{seed_index}/{c}" for c in whole["case"]]))
    return pd.concat(parts) if parts else pd.Series(dtype=float)


def run_loss_ablation(spec: ExperimentSpec, output_dir, seeds: Sequence[int] = (0,), workers: int = 1,
                      progress: bool = False) -> pd.DataFrame:
    """
    Adversarial adaptation under all four (SNet-t loss, D loss) pairings.

    SNet-s is trained once per seed and shared by the four runs.
    Writes loss_ablation.csv with mean whole-volume ABD, HD, RVD and DSC.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        source_ckpt = None
        for seg_loss, disc_loss in LOSS_COMBINATIONS:
            run_spec = _seeded(spec, "adapt_bowda", seed,
                               adversarial__seg_loss=seg_loss, adversarial__disc_loss=disc_loss)
            report = run_strategy(run_spec, out / f"seed{seed}" / f"{seg_loss}_{disc_loss}", workers,
                                  progress, source_checkpoint=source_ckpt)
            source_ckpt = report.source_checkpoint
            rows.append({"seed": seed, "seg_loss": seg_loss, "disc_loss": disc_loss,
                         **_whole_means(report.analyzer)})
    frame = pd.DataFrame(rows, columns=["seed", "seg_loss", "disc_loss", "abd", "hd", "rvd", "dsc"])
    summary = frame.groupby(["seg_loss", "disc_loss"], sort=False)[["abd", "hd", "rvd", "dsc"]].mean().reset_index()
    summary.to_csv(out / "loss_ablation.csv", index=False, float_format="%.4f")
    logger.info("loss ablation written to %s", out / "loss_ablation.csv")
    return summary


def compare_strategies(spec: ExperimentSpec, output_dir, strategies: Sequence[str] = STRATEGIES,
                       reference: str = "adapt_bowda", seeds: Sequence[int] = (0,), workers: int = 1,
                       progress: bool = False) -> pd.DataFrame:
    """
    Run several strategies on shared validation cases and test each
    against ``reference`` with a paired t-test on per-case DSC.

    Writes comparison.csv: strategy, mean/std DSC, t, p, significant and
    the five-number summary of the per-case DSC.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    strategies = list(strategies)
    if reference not in strategies:
        strategies.append(reference)

    pooled: Dict[str, pd.Series] = {}
    source_ckpts: Dict[Tuple[int, bool], Path] = {}
    for strategy in strategies:
        reports = []
        for seed in seeds:
            run_spec = _seeded(spec, strategy, seed)
            key = (seed, strategy in RESAMPLED)
            report = run_strategy(run_spec, out / f"seed{seed}" / strategy, workers, progress,
                                  source_checkpoint=source_ckpts.get(key) if strategy in FROM_SOURCE else None)
            if report.source_checkpoint is not None:
                source_ckpts[key] = report.source_checkpoint
            reports.append(report)
        pooled[strategy] = _pooled_dsc(reports)

    ref = pooled[reference]
    rows = []
    for strategy in strategies:
        values = pooled[strategy]
        row = {"strategy": strategy, "mean_dsc": float(values.mean()),
               "std_dsc": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
               "t": float("nan"), "p": float("nan"), "significant": False}
        if strategy != reference:
            shared = [c for c in ref.index if c in values.index]
            try:
                test = paired_ttest(ref.loc[shared], values.loc[shared])
                row.update(t=test.t, p=test.p, significant=test.significant)
            except (DegenerateVarianceError, ValueError) as e:
                logger.warning(f"t-test {reference} vs {strategy} skipped: {e}")
        row.update(five_number_summary(values.to_numpy()))
        rows.append(row)

    frame = pd.DataFrame(rows)
    frame.to_csv(out / "comparison.csv", index=False, float_format="%.6g")
    logger.info("strategy comparison written to %s", out / "comparison.csv")
    return frame


def run_architecture_ablation(spec: ExperimentSpec, output_dir, presets: Sequence[str] = tuple(SNET_PRESETS),
                              workers: int = 1, progress: bool = False) -> pd.DataFrame:
    """
    target_only training per SNet connection preset; writes arch_ablation.csv.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for preset in presets:
        run_spec = spec.with_strategy("target_only", snet__preset=preset)
        report = run_strategy(run_spec, out / preset, workers, progress)
        dense, residual, long_conn = SNET_PRESETS[preset]
        rows.append({"preset": preset, "dense": dense, "residual": residual, "long_connections": long_conn,
                     **_whole_means(report.analyzer)})
    frame = pd.DataFrame(rows)
    frame.to_csv(out / "arch_ablation.csv", index=False, float_format="%.4f")
    return frame
