"""
Command-line entry point.

Usage:
    # Synthetic data
    python scripts/run_bowda.py gen-phantom --domain source --count 30 --val-fraction 0.2 --out data/source

    # Full strategy run from a spec, with overrides
    python scripts/run_bowda.py run-strategy --spec configs/experiments/desk_bowda.json \\
        --set epochs.adversarial=5 --seed 1 --out results/bowda

    # Training phases separately
    python scripts/run_bowda.py train-source --spec exp.json --out results/src
    python scripts/run_bowda.py train-adapt --spec exp.json --source-ckpt results/src/snet_s_best.ckpt --out results/adapt

    # Inference and evaluation
    python scripts/run_bowda.py infer --spec exp.json --ckpt results/adapt/snet_t_best.ckpt --image case.mhd --out pred
    python scripts/run_bowda.py evaluate --ref ref.mhd --seg pred/case_mask.mhd
    python scripts/run_bowda.py evaluate --compare a/metrics.csv b/metrics.csv --out cmp

    # Checks and analyses
    python scripts/run_bowda.py gradcheck --all --tol 1e-4
    python scripts/run_bowda.py histogram --domain-compare --count 20 --out hist
    python scripts/run_bowda.py ablate --kind loss --spec exp.json --seeds 0 1 2 --out ablation

Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
from pydantic import ValidationError

from utils.config_validator import (
    STRATEGIES,
    DomainSpec,
    ExperimentSpec,
    apply_overrides,
    default_domains_path,
    format_validation_error,
    load_domain_presets,
    load_experiment_spec,
)
from utils.threads import ordered_map, resolve_threads
from . import __version__
from .boundary import boundary_gradient_histogram, compare_domain_boundaries
from .data_structures import Mask
from .dataset import load_manifest_cases, prepare_data
from .errors import BowdaError, ConfigMismatchError, SpecValidationError
from .metrics import SegmentationAnalyzer, evaluate_case, write_ttest_csv
from .phantom import gen_dataset, gen_phantom, preset
from .strategies import compare_strategies, run_architecture_ablation, run_loss_ablation, run_strategy
from .tensornet.checkpoint import load_checkpoint
from .tensornet.gradcheck import run_suite
from .tensornet.snet import SNet
from .trainer import TrainingEngine, infer_volume, network_digest
from .volume import read_metaimage, write_metaimage

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


class BowdaArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ══════════════════════════════════════════════════════════════════
# Parser
# ══════════════════════════════════════════════════════════════════

def _common(parser: argparse.ArgumentParser, spec: bool = False, spec_required: bool = True) -> None:
    if spec:
        cfg = parser.add_argument_group("Experiment")
        cfg.add_argument('--spec', required=spec_required, metavar='PATH',
                         help='ExperimentSpec JSON document')
        cfg.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                         help='Override a spec field, e.g. --set sgd.lr=0.001 (repeatable)')
    run = parser.add_argument_group("Run")
    run.add_argument('--out', default='results', metavar='DIR',
                     help='Output directory; nothing is written outside it (default: results)')
    run.add_argument('--seed', type=int, default=None,
                     help='Master seed (overrides the spec/preset seed)')
    run.add_argument('--threads', type=int, default=None, metavar='N',
                     help='Worker threads (default: BOWDA_THREADS or CPU count)')
    verbosity = run.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', action='store_true', help='Debug logging')
    verbosity.add_argument('--quiet', action='store_true', help='Warnings only, no progress bars')


def build_parser() -> argparse.ArgumentParser:
    parser = BowdaArgumentParser(
        prog="bowda",
        description="Boundary-weighted domain-adaptive segmentation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    # ── Data ─────────────────────────────────────────────────────
    p = sub.add_parser("gen-phantom", help="Write a synthetic dataset and manifest")
    p.add_argument('--domain', default='target', help='Preset name from the domains config (default: target)')
    p.add_argument('--domains-config', default=None, metavar='PATH', help='Domain presets JSON')
    p.add_argument('--count', type=int, default=18, help='Number of pairs (default: 18)')
    p.add_argument('--val-fraction', type=float, default=0.0, help='Fraction written as validation split')
    p.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                   help='Override a DomainSpec field, e.g. --set blur_sigma=1.0')
    _common(p)

    # ── Training ─────────────────────────────────────────────────
    p = sub.add_parser("train-source", help="Train SNet-s on the source domain")
    _common(p, spec=True)
    p.add_argument('--resume', metavar='CKPT', help='Resume from an epoch checkpoint')

    p = sub.add_parser("train-adapt", help="Adversarial adaptation of SNet-t")
    _common(p, spec=True)
    p.add_argument('--source-ckpt', metavar='CKPT', help='Trained SNet-s (trained first when omitted)')
    p.add_argument('--resume', metavar='CKPT', help='Resume the adversarial phase from a checkpoint')

    p = sub.add_parser("run-strategy", help="Run one training strategy end to end")
    _common(p, spec=True)
    p.add_argument('--strategy', choices=STRATEGIES, help='Override the spec strategy')

    # ── Inference and evaluation ─────────────────────────────────
    p = sub.add_parser("infer", help="Sliding-window inference on one volume")
    _common(p, spec=True)
    p.add_argument('--ckpt', required=True, metavar='CKPT', help='SNet checkpoint')
    p.add_argument('--image', required=True, metavar='PATH', help='MetaImage volume')
    p.add_argument('--threshold', type=float, default=None, help='Mask threshold (default: spec loss.threshold)')

    p = sub.add_parser("evaluate", help="Segmentation metrics or paired comparison")
    p.add_argument('--ref', action='append', default=[], metavar='PATH', help='Reference mask (repeatable)')
    p.add_argument('--seg', action='append', default=[], metavar='PATH', help='Segmentation mask (repeatable)')
    p.add_argument('--compare', nargs=2, metavar=('A_CSV', 'B_CSV'),
                   help='Paired t-test on per-case DSC of two metrics.csv files')
    p.add_argument('--metric', default='dsc', choices=['dsc', 'rvd', 'abd', 'hd'])
    p.add_argument('--region', default='whole', choices=['whole', 'apex', 'base'])
    _common(p)

    # ── Analysis ─────────────────────────────────────────────────
    p = sub.add_parser("gradcheck", help="Finite-difference gradient checks")
    p.add_argument('--all', action='store_true', help='Include DRB, networks and losses (default: primitives)')
    p.add_argument('--tol', type=float, default=1e-4, help='Max relative error (default: 1e-4)')
    p.add_argument('--seeds', type=int, default=20, help='Number of random seeds (default: 20)')
    p.add_argument('--max-coords', type=int, default=3, help='Coordinates per parameter group (default: 3)')
    _common(p)

    p = sub.add_parser("histogram", help="Gradient magnitude at boundary voxels")
    p.add_argument('--image', metavar='PATH', help='Image volume')
    p.add_argument('--mask', metavar='PATH', help='Label of the image')
    p.add_argument('--domain-compare', action='store_true', help='Compare source and target domains')
    p.add_argument('--source-manifest', metavar='PATH', help='Source manifest (default: source preset)')
    p.add_argument('--target-manifest', metavar='PATH', help='Target manifest (default: target preset)')
    p.add_argument('--count', type=int, default=20, help='Phantoms per preset domain (default: 20)')
    p.add_argument('--bins', type=int, default=50, help='Histogram bins (default: 50)')
    _common(p)

    p = sub.add_parser("ablate", help="Loss, architecture or strategy comparison")
    _common(p, spec=True)
    p.add_argument('--kind', required=True, choices=['loss', 'arch', 'strategies'])
    p.add_argument('--seeds', type=int, nargs='+', default=None, help='Seeds (default: the spec seed)')
    p.add_argument('--strategies', nargs='+', choices=STRATEGIES, default=list(STRATEGIES))
    p.add_argument('--reference', default='adapt_bowda', choices=STRATEGIES)

    return parser


# ══════════════════════════════════════════════════════════════════
# Helpers
# ══════════════════════════════════════════════════════════════════

def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s [%(levelname)s] %(message)s", force=True)


def _load_spec(args) -> ExperimentSpec:
    if not Path(args.spec).is_file():
        raise SpecValidationError(f"spec file not found: {args.spec}")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "strategy", None):
        overrides.append(f"strategy={args.strategy}")
    try:
        return load_experiment_spec(args.spec, overrides)
    except ValidationError as e:
        raise SpecValidationError(f"{args.spec}: {format_validation_error(e)}")
    except ValueError as e:
        raise SpecValidationError(f"{args.spec}: {e}")


def _load_domain(args) -> DomainSpec:
    path = args.domains_config or default_domains_path()
    try:
        presets = load_domain_presets(str(path))
        if args.domain not in presets:
            raise SpecValidationError(f"unknown domain '{args.domain}', available: {sorted(presets)}")
        data = presets[args.domain].model_dump()
        apply_overrides(data, args.overrides)
        if args.seed is not None:
            data["seed"] = args.seed
        return DomainSpec.model_validate(data)
    except ValidationError as e:
        raise SpecValidationError(f"domain '{args.domain}': {format_validation_error(e)}")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_frame(frame: pd.DataFrame) -> None:
    print(frame.to_string(index=False))


# ══════════════════════════════════════════════════════════════════
# Commands
# ══════════════════════════════════════════════════════════════════

def cmd_gen_phantom(args, workers: int) -> int:
    spec = _load_domain(args)
    if args.count < 1:
        raise SpecValidationError(f"--count must be >= 1, got {args.count}")
    if not 0.0 <= args.val_fraction <= 1.0:
        raise SpecValidationError(f"--val-fraction must be in [0, 1], got {args.val_fraction}")
    manifest = gen_dataset(spec, args.count, _out(args), args.val_fraction, workers, progress=not args.quiet)
    print(f"{manifest['count']} {spec.name} pairs ({manifest['split']['train']} train / "
          f"{manifest['split']['val']} val) -> {args.out}")
    return EXIT_OK


def cmd_train_source(args, workers: int) -> int:
    spec = _load_spec(args)
    data = prepare_data(spec, workers=workers)
    if data.source is None:
        raise SpecValidationError("train-source needs a source dataset")
    engine = TrainingEngine(spec, _out(args), workers, progress=not args.quiet)
    result = engine.train_source(data.source, resume_from=args.resume)
    engine.write_log()
    print(f"SNet-s: {result.best_path} (best epoch {result.state.best_epoch})")
    return EXIT_OK


def cmd_train_adapt(args, workers: int) -> int:
    spec = _load_spec(args)
    data = prepare_data(spec, workers=workers)
    if data.source is None:
        raise SpecValidationError("train-adapt needs a source dataset")
    engine = TrainingEngine(spec, _out(args), workers, progress=not args.quiet)
    source_ckpt = args.source_ckpt or engine.train_source(data.source).best_path
    snet_s = engine.load_snet(source_ckpt)
    snet_t = engine.init_target_from_source(source_ckpt)
    result = engine.train_adversarial(snet_s, snet_t, data.source, data.target, resume_from=args.resume)
    engine.write_log()
    print(f"SNet-t: {result.best_path} (best epoch {result.state.best_epoch}, "
          f"val DSC {result.state.best_dsc:.2f})")
    return EXIT_OK


def cmd_run_strategy(args, workers: int) -> int:
    spec = _load_spec(args)
    report = run_strategy(spec, _out(args), workers, progress=not args.quiet)
    report.analyzer.print_report()
    print(f"\nmetrics: {report.output_dir / 'metrics.csv'}")
    return EXIT_OK


def cmd_infer(args, workers: int) -> int:
    spec = _load_spec(args)
    net = SNet(spec.snet)
    load_checkpoint(args.ckpt).restore(net, "snet", digest=network_digest(spec))
    image = read_metaimage(args.image, as_mask=False)
    prob = infer_volume(net, image, spec, workers)
    threshold = spec.loss.threshold if args.threshold is None else args.threshold
    mask = Mask.from_probabilities(prob, threshold)
    out = _out(args)
    stem = Path(args.image).stem
    write_metaimage(prob, out / f"{stem}_prob.mhd")
    write_metaimage(mask, out / f"{stem}_mask.mhd")
    print(f"{stem}: {mask.count} foreground voxels -> {out}")
    return EXIT_OK


def cmd_evaluate(args, workers: int) -> int:
    if args.compare:
        a = SegmentationAnalyzer.from_csv(args.compare[0])
        b = SegmentationAnalyzer.from_csv(args.compare[1])
        result = a.compare(b, args.metric, args.region)
        print(f"paired t-test on {args.region} {args.metric}: t = {result.t:.6f}, p = {result.p:.6g}, "
              f"significant = {result.significant}")
        write_ttest_csv(_out(args) / "ttest.csv", {f"{args.compare[0]} vs {args.compare[1]}": result})
        return EXIT_OK

    if not args.ref or len(args.ref) != len(args.seg):
        raise SpecValidationError("evaluate needs matching --ref and --seg pairs (or --compare)")
    rows = []
    for ref_path, seg_path in zip(args.ref, args.seg):
        ref = read_metaimage(ref_path, as_mask=True)
        seg = read_metaimage(seg_path, as_mask=True)
        rows.extend(evaluate_case(seg, ref, Path(ref_path).stem))
    analyzer = SegmentationAnalyzer(rows)
    _print_frame(analyzer.frame)
    analyzer.to_csv(_out(args) / "metrics.csv")
    return EXIT_OK


def cmd_gradcheck(args, workers: int) -> int:
    if args.seeds < 1 or args.max_coords < 1:
        raise SpecValidationError("--seeds and --max-coords must be >= 1")
    table = run_suite(range(args.seeds), args.tol, args.max_coords, progress=not args.quiet, full=args.all)
    _print_frame(table)
    table.to_csv(_out(args) / "gradcheck.csv", index=False, float_format="%.3e")
    passed = bool(table["passed"].all())
    print(f"\n{'PASS' if passed else 'FAIL'}: {int(table['passed'].sum())}/{len(table)} ops below {args.tol:g}")
    return EXIT_OK if passed else EXIT_RUNTIME


def _domain_cases(manifest: Optional[str], preset_name: str, count: int, seed: Optional[int], workers: int):
    if manifest:
        _, train, val = load_manifest_cases(manifest, workers)
        cases = [(c.image, c.mask) for c in train + val]
    else:
        spec = preset(preset_name)
        if seed is not None:
            spec = spec.model_copy(update={"seed": seed})
        cases = ordered_map(lambda i: gen_phantom(spec, i), range(count), workers)
    return [v for v, _ in cases], [m for _, m in cases]


def cmd_histogram(args, workers: int) -> int:
    if args.domain_compare:
        images_s, masks_s = _domain_cases(args.source_manifest, "source", args.count, args.seed, workers)
        images_t, masks_t = _domain_cases(args.target_manifest, "target", args.count, args.seed, workers)
        hist_s, hist_t = compare_domain_boundaries(images_s, masks_s, images_t, masks_t, args.bins)
        out = _out(args)
        hist_s.to_csv(out / "source_histogram.csv")
        hist_t.to_csv(out / "target_histogram.csv")
        print(f"mean boundary gradient magnitude: source {hist_s.mean_magnitude:.4f} "
              f"({hist_s.n_points} points), target {hist_t.mean_magnitude:.4f} ({hist_t.n_points} points)")
        return EXIT_OK

    if not (args.image and args.mask):
        raise SpecValidationError("histogram needs --image and --mask (or --domain-compare)")
    hist = boundary_gradient_histogram(read_metaimage(args.image, as_mask=False),
                                       read_metaimage(args.mask, as_mask=True), args.bins)
    hist.to_csv(_out(args) / "histogram.csv")
    print(f"{hist.n_points} boundary points, mean gradient magnitude {hist.mean_magnitude:.4f}")
    return EXIT_OK


def cmd_ablate(args, workers: int) -> int:
    spec = _load_spec(args)
    seeds = args.seeds if args.seeds else [spec.seed]
    out = _out(args)
    progress = not args.quiet
    if args.kind == "loss":
        frame = run_loss_ablation(spec, out, seeds, workers, progress)
    elif args.kind == "arch":
        frame = run_architecture_ablation(spec, out, workers=workers, progress=progress)
    else:
        frame = compare_strategies(spec, out, args.strategies, args.reference, seeds, workers, progress)
    _print_frame(frame)
    return EXIT_OK


COMMANDS = {
    "gen-phantom": cmd_gen_phantom,
    "train-source": cmd_train_source,
    "train-adapt": cmd_train_adapt,
    "run-strategy": cmd_run_strategy,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "histogram": cmd_histogram,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _configure_logging(args)

    try:
        workers = resolve_threads(args.threads)
    except ValueError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_INVALID

    try:
        return COMMANDS[args.command](args, workers)
    except (SpecValidationError, ConfigMismatchError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (BowdaError, OSError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        logger.debug("runtime failure", exc_info=True)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
