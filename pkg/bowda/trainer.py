"""
Training engine: supervised phases, the adversarial adaptation phase,
checkpointing, resume and validation.

Randomness is never carried between steps. Every step derives fresh
generators from (master seed, phase, stream, epoch, step), so a run
resumed from any epoch checkpoint replays the uninterrupted run exactly,
and the adversarial phase draws its target batches and dropout masks
from the same streams as supervised target training.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from utils.config_validator import ExperimentSpec, config_digest
from utils.threads import ordered_map
from .boundary import boundary_weight_map, distance_array
from .data_structures import LossValue, Mask, TrainState, Volume
from .dataset import Case, DomainData
from .errors import ConfigMismatchError, NonFiniteError
from .losses import adversarial_generator_loss, bwtl_discriminator, segmentation_loss, total_loss
from .metrics import SegmentationAnalyzer
from .optim import SGD
from .pipeline import Batch, sample_batch, sliding_window_infer
from .tensornet.checkpoint import load_checkpoint, module_blobs, save_checkpoint, write_model_summary
from .tensornet.discriminator import Discriminator
from .tensornet.snet import SNet, check_divisible
from .tensornet.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

PHASES = {"source": 0, "target": 1}
STREAMS = {"batch": 0, "dropout": 1, "source_batch": 2}
INIT_STREAMS = {"snet": 100, "discriminator": 101}

LOG_FLOAT_FORMAT = "%.9g"


def step_rng(seed: int, phase: str, stream: str, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, PHASES[phase], STREAMS[stream], epoch, step])


def init_rng(seed: int, what: str) -> np.random.Generator:
    return np.random.default_rng([seed, INIT_STREAMS[what]])


def network_digest(spec: ExperimentSpec) -> str:
    """Digest of everything that fixes the SNet parameter layout."""
    return config_digest(spec.snet)


def steps_per_epoch(spec: ExperimentSpec, n_cases: int) -> int:
    if spec.epochs.steps_per_epoch is not None:
        return spec.epochs.steps_per_epoch
    return max(1, math.ceil(n_cases / spec.sgd.batch_size))


# ══════════════════════════════════════════════════════════════════
# Batch targets
# ══════════════════════════════════════════════════════════════════

def _sample_distance(label: np.ndarray, spacing) -> np.ndarray:
    fg = label > 0.5
    if fg.any() and not fg.all():
        return distance_array(fg, spacing)
    return np.zeros(label.shape, dtype=np.float64)


def batch_distance_maps(batch: Batch, workers: int = 1) -> np.ndarray:
    """Distance maps per sample using each crop's own spacing."""
    maps = ordered_map(lambda i: _sample_distance(batch.labels[i, 0], batch.spacings[i]),
                       range(len(batch.spacings)), workers)
    return np.stack(maps)[:, None]


def batch_weight_maps(batch: Batch, workers: int = 1) -> np.ndarray:
    """Boundary weight maps per sample, computed from the crop labels."""
    maps = ordered_map(
        lambda i: boundary_weight_map(Mask(batch.labels[i, 0].astype(np.uint8), batch.spacings[i])).values,
        range(len(batch.spacings)), workers,
    )
    return np.stack(maps)[:, None].astype(np.float64)


def _check_finite(loss: LossValue, where: str) -> None:
    if not np.isfinite(loss.value):
        bad = [k for k, v in loss.components.items() if not np.isfinite(v)]
        raise NonFiniteError(f"{where}: non-finite loss {loss.value} (components {bad})",
                             name=bad[0] if bad else None)


# ══════════════════════════════════════════════════════════════════
# Inference
# ══════════════════════════════════════════════════════════════════

def infer_volume(net: SNet, vol: Volume, spec: ExperimentSpec, workers: int = 1) -> Volume:
    """Sliding-window probability map; the network stays in evaluation mode."""
    check_divisible(spec.window.dims)
    dtype = net.head.weight.dtype
    net.eval()

    def predict(window: np.ndarray) -> np.ndarray:
        prob, _ = net.forward(Tensor(np.asarray(window, dtype=dtype)[None, None]))
        return prob.data[0, 0]

    return sliding_window_infer(predict, vol, spec.window, workers)


def evaluate_net(net: SNet, cases: Sequence[Case], spec: ExperimentSpec, workers: int = 1,
                 name: str = "") -> SegmentationAnalyzer:
    """Metrics of thresholded sliding-window predictions against the case labels."""
    triples = []
    for case in cases:
        prob = infer_volume(net, case.image, spec, workers)
        triples.append((case.case_id, Mask.from_probabilities(prob, spec.loss.threshold), case.mask))
    return SegmentationAnalyzer.from_cases(triples, workers, name=name)


# ══════════════════════════════════════════════════════════════════
# Engine
# ══════════════════════════════════════════════════════════════════

@dataclass
class TrainResult:
    net: SNet
    last_path: Path
    best_path: Path
    state: TrainState
    log: pd.DataFrame = field(default_factory=pd.DataFrame)


class TrainingEngine:
    """
    Runs the training phases of one experiment inside ``output_dir``.

    Messages go to the module logger, to ``self.logs`` and to the optional
    ``log_callback``; they carry no timestamps so the persisted run.log
    is reproducible.
    """

    def __init__(self, spec: ExperimentSpec, output_dir, workers: int = 1,
                 log_callback: Optional[Callable[[str], None]] = None, progress: bool = True):
        self.spec = spec
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.workers = workers
        self.log_callback = log_callback
        self.progress = progress
        self.logs: List[str] = []
        self.digest = network_digest(spec)

    def log(self, message: str) -> None:
        self.logs.append(message)
        logger.info(message)
        if self.log_callback:
            try:
                self.log_callback(message)
            except Exception as e:
                logger.warning(f"log callback failed: {e}")

    def write_log(self, name: str = "run.log") -> Path:
        path = self.output_dir / name
        path.write_text("\n".join(self.logs) + "\n", encoding="utf-8")
        return path

    # ── Networks ──

    def build_snet(self) -> SNet:
        return SNet(self.spec.snet, rng=init_rng(self.spec.seed, "snet"))

    def build_discriminator(self) -> Discriminator:
        return Discriminator(self.spec.discriminator, self.spec.snet.feature_channels,
                             rng=init_rng(self.spec.seed, "discriminator"))

    def load_snet(self, path, prefix: str = "snet") -> SNet:
        """SNet restored from a checkpoint written for the same architecture."""
        ckpt = load_checkpoint(path)
        net = self.build_snet()
        ckpt.restore(net, prefix, digest=self.digest)
        return net

    def init_target_from_source(self, source_checkpoint) -> SNet:
        """SNet-t as a parameter-exact copy of the trained SNet-s."""
        net = self.load_snet(source_checkpoint)
        self.log(f"SNet-t initialised from {Path(source_checkpoint).name}")
        return net

    # ── Checkpoints ──

    def _save(self, path: Path, phase: str, state: TrainState, nets: Dict[str, object],
              optimizers: Dict[str, SGD]) -> None:
        blobs = {}
        for prefix, net in nets.items():
            blobs.update(module_blobs(net, prefix))
        for prefix, opt in optimizers.items():
            blobs.update((f"opt/{prefix}/{k}", v) for k, v in opt.state_dict().items())
        meta = {"phase": phase, "strategy": self.spec.strategy, "state": state.meta()}
        save_checkpoint(path, self.digest, blobs, meta)

    def _resume(self, path, phase: str, nets: Dict[str, object], optimizers: Dict[str, SGD]) -> TrainState:
        ckpt = load_checkpoint(path)
        if ckpt.digest != self.digest:
            raise ConfigMismatchError(f"{path}: checkpoint was written for another network configuration")
        if ckpt.meta.get("phase") != phase:
            raise ConfigMismatchError(f"{path}: checkpoint is from phase '{ckpt.meta.get('phase')}', not '{phase}'")
        for prefix, net in nets.items():
            ckpt.restore(net, prefix)
        for prefix, opt in optimizers.items():
            opt.load_state_dict(ckpt.section(f"opt/{prefix}"))
        first = next(iter(optimizers))
        state = TrainState.from_meta(ckpt.meta["state"], optimizers[first].state_dict())
        self.log(f"resumed {phase} from {Path(path).name} at epoch {state.epoch}")
        return state

    # ── Shared epoch bookkeeping ──

    def _log_path(self, tag: str) -> Path:
        return self.output_dir / f"{tag}_log.csv"

    def _start_log(self, tag: str, state: TrainState) -> None:
        """Fresh runs start an empty step log; resumed runs drop rows past the checkpoint."""
        path = self._log_path(tag)
        if not path.exists():
            return
        if state.epoch == 0 or path.stat().st_size == 0:
            path.unlink()
            return
        frame = pd.read_csv(path)
        frame[frame["epoch"] < state.epoch].to_csv(path, index=False, float_format=LOG_FLOAT_FORMAT)

    def _append_rows(self, tag: str, rows: List[Dict]) -> None:
        if not rows:
            return
        path = self._log_path(tag)
        pd.DataFrame(rows).to_csv(path, mode="a", header=not path.exists(), index=False,
                                  float_format=LOG_FLOAT_FORMAT)

    def _finish(self, tag: str, phase: str, state: TrainState, nets: Dict[str, object],
                optimizers: Dict[str, SGD]) -> TrainResult:
        last, best = self.output_dir / f"{tag}.ckpt", self.output_dir / f"{tag}_best.ckpt"
        if not state.history:
            self._save(last, phase, state, nets, optimizers)
            self._save(best, phase, state, nets, optimizers)
        path = self._log_path(tag)
        log = pd.read_csv(path) if path.exists() else pd.DataFrame()
        return TrainResult(self.load_snet(best), last, best, state, log)

    def _end_epoch(self, phase: str, tag: str, state: TrainState, epoch: int, rows: List[Dict],
                   net: SNet, val: Sequence[Case], nets: Dict[str, object], optimizers: Dict[str, SGD]) -> None:
        losses = [row["loss"] for row in rows]
        loss_mean = float(np.mean(losses)) if losses else float("nan")
        val_dsc = float("nan")
        if val:
            val_dsc = float(np.mean(evaluate_net(net, val, self.spec, self.workers).values("dsc")))
        state.epoch = epoch + 1
        state.history.append({"epoch": epoch, "loss_mean": loss_mean, "val_dsc": val_dsc})
        improved = not val or val_dsc > state.best_dsc
        if improved:
            state.best_dsc = val_dsc if val else state.best_dsc
            state.best_epoch = epoch
        self.log(f"[{tag}] epoch {epoch}: loss {loss_mean:.6f}"
                 + (f", val DSC {val_dsc:.2f}" if val else "")
                 + (" (best)" if improved else ""))
        self._save(self.output_dir / f"{tag}.ckpt", phase, state, nets, optimizers)
        if improved:
            self._save(self.output_dir / f"{tag}_best.ckpt", phase, state, nets, optimizers)
        self._append_rows(tag, rows)

    def _seg_loss(self, kind: str, prob: np.ndarray, batch: Batch) -> LossValue:
        dmap = batch_distance_maps(batch, self.workers) if kind == "bwsl" else None
        return segmentation_loss(kind, prob, batch.labels, self.spec.loss, dmap=dmap)

    # ══════════════════════════════════════════════════════════════
    # Supervised phases
    # ══════════════════════════════════════════════════════════════

    def train_supervised(self, net: SNet, train: Sequence[Tuple[Volume, Mask]], val: Sequence[Case],
                         phase: str, tag: str, epochs: int, loss_kind: str,
                         resume_from=None) -> TrainResult:
        """
        Plain supervised training on random augmented crops.

        Writes ``{tag}.ckpt`` after every epoch, ``{tag}_best.ckpt`` on a
        validation improvement and ``{tag}_log.csv`` with one row per step.
        """
        spec = self.spec
        opt = SGD(net.named_parameters(), spec.sgd)
        nets, optimizers = {"snet": net}, {"snet": opt}
        state = TrainState(seed=spec.seed)
        if resume_from is not None:
            state = self._resume(resume_from, phase, nets, optimizers)
        n_steps = steps_per_epoch(spec, len(train))
        self.log(f"[{tag}] {loss_kind} training: {len(train)} cases, {epochs} epochs x {n_steps} steps")
        write_model_summary(self.output_dir / "model_summary.txt", {"SNet": net})

        self._start_log(tag, state)
        for epoch in tqdm(range(state.epoch, epochs), desc=tag, disable=not self.progress):
            rows = []
            for step in range(n_steps):
                batch = sample_batch(train, spec.crop, spec.sgd.batch_size,
                                     step_rng(spec.seed, phase, "batch", epoch, step))
                net.train().set_rng(step_rng(spec.seed, phase, "dropout", epoch, step))
                opt.zero_grad()
                with Tape() as tape:
                    prob, _ = net(Tensor(batch.images))
                loss = self._seg_loss(loss_kind, prob.data, batch)
                _check_finite(loss, f"{tag} epoch {epoch} step {step}")
                tape.backward({prob: loss.grads["pred"]})
                lr = opt.step(epoch)
                state.step, state.global_step = step + 1, state.global_step + 1
                rows.append({"step": state.global_step, "epoch": epoch, "loss": loss.value,
                             **loss.components, "lr": lr})
            net.set_rng(None)
            self._end_epoch(phase, tag, state, epoch, rows, net, val, nets, optimizers)
        return self._finish(tag, phase, state, nets, optimizers)

    def train_source(self, source: DomainData, resume_from=None) -> TrainResult:
        """SNet-s: cross entropy on the source domain."""
        return self.train_supervised(self.build_snet(), source.train_pairs(), source.val, "source",
                                     "snet_s", self.spec.epochs.source, "ce", resume_from)

    def train_target(self, net: SNet, train: Sequence[Tuple[Volume, Mask]], target: DomainData,
                     loss_kind: Optional[str] = None, resume_from=None) -> TrainResult:
        """Supervised training scored on the target validation cases."""
        return self.train_supervised(net, train, target.val, "target", "snet_t", self.spec.epochs.target,
                                     loss_kind or self.spec.supervised_loss, resume_from)

    # ══════════════════════════════════════════════════════════════
    # Adversarial phase
    # ══════════════════════════════════════════════════════════════

    def train_adversarial(self, snet_s: SNet, snet_t: SNet, source: DomainData, target: DomainData,
                          resume_from=None) -> TrainResult:
        """
        Adapt SNet-t to the target domain against a discriminator on
        up-path features. SNet-s stays frozen in evaluation mode.

        Per step: SNet-t minimizes its segmentation loss plus
        ``adv_weight`` times the fooling term (D held fixed, batch norm on its
        running statistics), then D takes one step on the detached features
        of both domains scored as a single batch.
        """
        spec = self.spec
        adv = spec.adversarial
        snet_s.freeze().eval().set_rng(None)
        disc = self.build_discriminator()
        opt_t = SGD(snet_t.named_parameters(), spec.sgd)
        opt_d = SGD(disc.named_parameters(), spec.sgd)
        nets = {"snet": snet_t, "disc": disc}
        optimizers = {"snet": opt_t, "disc": opt_d}
        state = TrainState(seed=spec.seed)
        if resume_from is not None:
            state = self._resume(resume_from, "target", nets, optimizers)

        weighted = adv.disc_loss == "bwtl"
        n_steps = steps_per_epoch(spec, len(target.train))
        self.log(f"[adversarial] seg {adv.seg_loss}, disc {adv.disc_loss}, weight {adv.adv_weight}: "
                 f"{spec.epochs.adversarial} epochs x {n_steps} steps")
        write_model_summary(self.output_dir / "model_summary.txt", {"SNet": snet_t, "Discriminator": disc})

        self._start_log("snet_t", state)
        for epoch in tqdm(range(state.epoch, spec.epochs.adversarial), desc="adversarial",
                          disable=not self.progress):
            rows = []
            for step in range(n_steps):
                tgt = sample_batch(target.train_pairs(), spec.crop, spec.sgd.batch_size,
                                   step_rng(spec.seed, "target", "batch", epoch, step))
                src = sample_batch(source.train_pairs(), spec.crop, spec.sgd.batch_size,
                                   step_rng(spec.seed, "target", "source_batch", epoch, step))
                w_t = batch_weight_maps(tgt, self.workers) if weighted else None
                w_s = batch_weight_maps(src, self.workers) if weighted else None

                # generator step, D fixed with frozen batch-norm statistics
                snet_t.train().set_rng(step_rng(spec.seed, "target", "dropout", epoch, step))
                disc.eval()
                opt_t.zero_grad()
                with Tape() as tape:
                    prob_t, feats_t = snet_t(Tensor(tgt.images))
                    d_gen = disc(feats_t) if adv.adv_weight > 0 else None
                seg = self._seg_loss(adv.seg_loss, prob_t.data, tgt)
                seeds = {prob_t: seg.grads["pred"]}
                gen = seg
                if d_gen is not None:
                    fool = adversarial_generator_loss(d_gen.data, w_t, spec.loss)
                    gen = total_loss(seg, fool, adv.adv_weight)
                    seeds[d_gen] = adv.adv_weight * fool.grads["d_tgt"]
                _check_finite(gen, f"generator epoch {epoch} step {step}")
                tape.backward(seeds)
                lr = opt_t.step(epoch)

                # discriminator step on detached features, both domains in one batch
                _, feats_s = snet_s(Tensor(src.images))
                disc.train()
                opt_d.zero_grad()
                with Tape() as tape_d:
                    d_s, d_t = disc.forward_domains(feats_s, [f.detach() for f in feats_t])
                del feats_s, feats_t
                disc_loss = bwtl_discriminator(d_s.data, d_t.data, w_s, w_t, spec.loss)
                _check_finite(disc_loss, f"discriminator epoch {epoch} step {step}")
                tape_d.backward({d_s: disc_loss.grads["d_src"], d_t: disc_loss.grads["d_tgt"]})
                opt_d.step(epoch)

                state.step, state.global_step = step + 1, state.global_step + 1
                rows.append({"step": state.global_step, "epoch": epoch, "loss": gen.value,
                             **gen.components, "disc_loss": disc_loss.value, **disc_loss.components,
                             "lr": lr})
            snet_t.set_rng(None)
            self._end_epoch("target", "snet_t", state, epoch, rows, snet_t, target.val, nets, optimizers)
        return self._finish("snet_t", "target", state, nets, optimizers)
