#!/usr/bin/env python3
"""
Training for the relight + segmentation pipeline
Pixel cross-entropy, poly-decayed momentum SGD, optional output-space adversarial
adaptation, evaluation, checkpoints, the training loop and the relight ablation
"""

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from config import (AdaptConfig, ExperimentConfig, TrainConfig, apply_overrides, config_hash,
                    dump_experiment_config, parse_experiment_config)
from data import (IGNORE_INDEX, EpochSampler, SegmentationDataset, index_dataset,
                  layout_template)
from errors import CheckpointError, ShapeError
from hrseg import SegNet, build_hrseg
from logging_system import (log_checkpoint_saved, log_eval_result, log_performance, log_train_step,
                            seg_logger)
from metrics import (ConfusionMatrix, MetricsReport, build_report, predict_labels, report_to_record,
                     update_confusion)
from netcore import deterministic_algorithms, seeded
from relight import RelightNet, build_relight, relight_forward

CHECKPOINT_FORMAT = 'rhrseg-ckpt/1'
SOURCE_LABEL = 0.0
TARGET_LABEL = 1.0
DISC_BETAS = (0.9, 0.99)
LEAKY_SLOPE = 0.2


# ===== MODELS =====

class RHRSegNet(nn.Module):
    """Relighting followed by segmentation; relight is bypassed when disabled"""

    def __init__(self, relight: RelightNet, seg: SegNet, relight_enabled: bool = True):
        super().__init__()
        self.relight = relight
        self.seg = seg
        self.relight_enabled = relight_enabled

    @property
    def num_classes(self) -> int:
        return self.seg.num_classes

    def relit(self, images: torch.Tensor) -> torch.Tensor:
        if not self.relight_enabled:
            return images
        return relight_forward(self.relight, images)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.seg(self.relit(images))


def build_pipeline(cfg: ExperimentConfig) -> RHRSegNet:
    seed = cfg.train.seed
    return RHRSegNet(build_relight(cfg.relight, seed),
                     build_hrseg(cfg.seg, seed + 1),
                     relight_enabled=cfg.train.relight_enabled)


class Discriminator(nn.Module):
    """Fully convolutional domain classifier over softmax maps"""

    def __init__(self, num_classes: int, channels: int = 64):
        super().__init__()
        widths = [num_classes, channels, 2 * channels, 4 * channels, 8 * channels]
        layers: List[nn.Module] = []
        for c_in, c_out in zip(widths, widths[1:]):
            layers += [nn.Conv2d(c_in, c_out, kernel_size=4, stride=2, padding=1),
                       nn.LeakyReLU(LEAKY_SLOPE)]
        layers.append(nn.Conv2d(widths[-1], 1, kernel_size=4, stride=2, padding=1))
        self.main = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)

    def forward(self, probabilities: torch.Tensor) -> torch.Tensor:
        return self.main(probabilities)


def build_discriminator(num_classes: int, cfg: AdaptConfig, seed: int) -> Discriminator:
    with seeded(seed):
        return Discriminator(num_classes, cfg.disc_channels)


# ===== LOSS AND SCHEDULE =====

def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    """Mean pixel cross-entropy over non-ignore pixels.

    Returns the loss and a flag set when every pixel is ignored, in which case the
    loss is an exact zero still attached to the graph.
    """
    if logits.dim() != 4 or labels.dim() != 3 or logits.shape[0] != labels.shape[0] \
            or logits.shape[-2:] != labels.shape[-2:]:
        raise ShapeError(f"logits {tuple(logits.shape)} do not align with labels {tuple(labels.shape)}")

    labels = labels.long()
    valid = int((labels != IGNORE_INDEX).sum())
    if valid == 0:
        return logits.sum() * 0.0, True
    total = F.cross_entropy(logits, labels, ignore_index=IGNORE_INDEX, reduction='sum')
    return total / valid, False


def poly_decay(base: float, iteration: int, max_iterations: int, power: float) -> float:
    if max_iterations <= 0:
        return base
    return base * (1.0 - min(iteration, max_iterations) / max_iterations) ** power


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    return poly_decay(cfg.base_lr, iteration, cfg.max_iterations, cfg.poly_power)


# ===== OPTIMISATION =====

def decays(param: torch.Tensor) -> bool:
    """Weight decay applies to conv kernels only; BN scale/shift and biases are exempt"""
    return param.dim() > 1


@torch.no_grad()
def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[Optional[torch.Tensor]],
             momentum_buffers: List[Optional[torch.Tensor]], lr: float,
             cfg: TrainConfig, decay_mask: Optional[Sequence[bool]] = None):
    """In-place momentum SGD; parameters without a gradient are left untouched"""
    if decay_mask is None:
        decay_mask = [decays(p) for p in params]
    if not len(params) == len(grads) == len(momentum_buffers) == len(decay_mask):
        raise ShapeError("params, grads, buffers and decay mask must have equal lengths")

    for k, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(f"gradient {tuple(grad.shape)} does not match parameter {tuple(param.shape)}")
        step = grad.clone()
        if decay_mask[k] and cfg.weight_decay:
            step.add_(param, alpha=cfg.weight_decay)
        buffer = momentum_buffers[k]
        if buffer is None:
            buffer = torch.zeros_like(param)
        buffer.mul_(cfg.momentum).add_(step)
        momentum_buffers[k] = buffer
        param.sub_(lr * buffer)
    return params, momentum_buffers


class MomentumSGD:
    """Named parameter set with momentum buffers, driven by sgd_step"""

    def __init__(self, module: nn.Module, cfg: TrainConfig):
        self.cfg = cfg
        self.names: List[str] = []
        self.params: List[nn.Parameter] = []
        for name, param in module.named_parameters():
            self.names.append(name)
            self.params.append(param)
        self.decay_mask = [decays(p) for p in self.params]
        self.buffers: List[Optional[torch.Tensor]] = [None] * len(self.params)

    def zero_grad(self):
        for param in self.params:
            param.grad = None

    def step(self, lr: float):
        sgd_step(self.params, [p.grad for p in self.params], self.buffers, lr, self.cfg, self.decay_mask)

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return {n: b.clone() for n, b in zip(self.names, self.buffers) if b is not None}

    def load_state_dict(self, buffers: Dict[str, torch.Tensor]):
        unknown = set(buffers) - set(self.names)
        if unknown:
            raise CheckpointError(f"momentum buffers for unknown parameters: {sorted(unknown)[:5]}")
        self.buffers = [buffers[n].clone() if n in buffers else None for n in self.names]


# ===== TRAINING STEP =====

@dataclass
class TrainState:
    pipeline: RHRSegNet
    optimizer: MomentumSGD
    discriminator: Optional[Discriminator] = None
    disc_optimizer: Optional[torch.optim.Adam] = None
    iteration: int = 0
    best_miou: Optional[float] = None
    loss_sums: Dict[str, float] = field(default_factory=dict)

    def running_means(self) -> Dict[str, float]:
        if not self.iteration:
            return {}
        return {k: v / self.iteration for k, v in self.loss_sums.items()}


def init_train_state(cfg: ExperimentConfig) -> TrainState:
    pipeline = build_pipeline(cfg)
    state = TrainState(pipeline=pipeline, optimizer=MomentumSGD(pipeline, cfg.train))
    adaptation = cfg.train.adaptation
    if adaptation is not None:
        state.discriminator = build_discriminator(cfg.seg.num_classes, adaptation, cfg.train.seed + 2)
        state.disc_optimizer = torch.optim.Adam(state.discriminator.parameters(),
                                                lr=adaptation.disc_lr, betas=DISC_BETAS)
    return state


def _domain_bce(scores: torch.Tensor, label: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(scores, torch.full_like(scores, label))


def generator_losses(state: TrainState, src_batch: Dict[str, torch.Tensor],
                     tgt_batch: Optional[Dict[str, torch.Tensor]],
                     cfg: TrainConfig) -> Dict[str, Any]:
    """Forward both domains, backpropagate CE (+ weighted adversarial term) into the pipeline.

    The discriminator is frozen for this pass so it accumulates no gradient.
    """
    pipeline, discriminator = state.pipeline, state.discriminator
    pipeline.train()
    if discriminator is not None:
        discriminator.requires_grad_(False)

    src_logits = pipeline(src_batch['image'])
    loss_ce, all_ignored = cross_entropy_loss(src_logits, src_batch['label'])
    total = loss_ce

    tgt_logits = None
    loss_adv = torch.zeros(())
    if cfg.adaptation is not None and discriminator is not None and tgt_batch is not None:
        tgt_logits = pipeline(tgt_batch['image'])
        loss_adv = _domain_bce(discriminator(F.softmax(tgt_logits, dim=1)), SOURCE_LABEL)
        total = total + cfg.adaptation.adv_weight * loss_adv

    total.backward()
    if discriminator is not None:
        discriminator.requires_grad_(True)
    return {
        'src_logits': src_logits.detach(),
        'tgt_logits': None if tgt_logits is None else tgt_logits.detach(),
        'loss_ce': float(loss_ce.detach()),
        'loss_adv': float(loss_adv.detach()),
        'ce_all_ignored': all_ignored,
    }


def discriminator_loss(discriminator: Discriminator, src_logits: torch.Tensor,
                       tgt_logits: torch.Tensor) -> torch.Tensor:
    """Two-domain classification on detached segmentation outputs"""
    src_scores = discriminator(F.softmax(src_logits.detach(), dim=1))
    tgt_scores = discriminator(F.softmax(tgt_logits.detach(), dim=1))
    return 0.5 * (_domain_bce(src_scores, SOURCE_LABEL) + _domain_bce(tgt_scores, TARGET_LABEL))


def train_step(state: TrainState, src_batch: Dict[str, torch.Tensor],
               tgt_batch: Optional[Dict[str, torch.Tensor]], cfg: TrainConfig,
               run_id: Optional[str] = None) -> Tuple[TrainState, Dict[str, Any]]:
    lr = poly_lr(state.iteration, cfg)
    state.optimizer.zero_grad()
    outputs = generator_losses(state, src_batch, tgt_batch, cfg)
    state.optimizer.step(lr)

    loss_disc = 0.0
    if outputs['tgt_logits'] is not None:
        disc_lr = poly_decay(cfg.adaptation.disc_lr, state.iteration, cfg.max_iterations, cfg.poly_power)
        for group in state.disc_optimizer.param_groups:
            group['lr'] = disc_lr
        state.disc_optimizer.zero_grad(set_to_none=True)
        d_loss = discriminator_loss(state.discriminator, outputs['src_logits'], outputs['tgt_logits'])
        d_loss.backward()
        state.disc_optimizer.step()
        loss_disc = float(d_loss.detach())

    state.iteration += 1
    record = {
        'type': 'step',
        'iteration': state.iteration,
        'lr': lr,
        'loss_ce': outputs['loss_ce'],
        'loss_adv': outputs['loss_adv'],
        'loss_disc': loss_disc,
        'ce_all_ignored': outputs['ce_all_ignored'],
    }
    for key in ('loss_ce', 'loss_adv', 'loss_disc'):
        state.loss_sums[key] = state.loss_sums.get(key, 0.0) + record[key]
    if outputs['ce_all_ignored']:
        seg_logger.logger.warning(
            f"Every source pixel ignored at iteration {state.iteration}",
            extra={'run_id': run_id, 'event': 'ce_all_ignored'}
        )
    log_train_step(run_id, record)
    return state, record


# ===== EVALUATION =====

@torch.no_grad()
def evaluate(pipeline: RHRSegNet, dataset: Dataset, batch_size: int = 1,
             workers: int = 0) -> Tuple[ConfusionMatrix, MetricsReport]:
    was_training = pipeline.training
    pipeline.eval()
    conf = ConfusionMatrix(pipeline.num_classes)
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=workers)
    try:
        for batch in loader:
            pred = predict_labels(pipeline(batch['image']))
            update_confusion(conf, pred, batch['label'])
    finally:
        pipeline.train(was_training)
    return conf, build_report(conf)


# ===== CHECKPOINTS =====

def save_checkpoint(path: Path, state: TrainState, cfg: ExperimentConfig,
                    run_id: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'format_version': CHECKPOINT_FORMAT,
        'iteration': state.iteration,
        'config': cfg.model_dump(mode='json'),
        'relight': state.pipeline.relight.state_dict(),
        'seg': state.pipeline.seg.state_dict(),
        'discriminator': None if state.discriminator is None else state.discriminator.state_dict(),
        'sgd_buffers': state.optimizer.state_dict(),
        'disc_optimizer': None if state.disc_optimizer is None else state.disc_optimizer.state_dict(),
        'best_miou': state.best_miou,
    }
    torch.save(payload, path)
    log_checkpoint_saved(run_id, str(path), state.iteration)
    return path


@dataclass
class LoadedCheckpoint:
    config: ExperimentConfig
    state: TrainState

    @property
    def pipeline(self) -> RHRSegNet:
        return self.state.pipeline


def load_checkpoint(path: Path) -> LoadedCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get('format_version') != CHECKPOINT_FORMAT:
        found = payload.get('format_version') if isinstance(payload, dict) else None
        raise CheckpointError(f"{path} has format {found!r}, expected {CHECKPOINT_FORMAT!r}")

    cfg = parse_experiment_config(payload['config'])
    state = init_train_state(cfg)
    try:
        state.pipeline.relight.load_state_dict(payload['relight'])
        state.pipeline.seg.load_state_dict(payload['seg'])
        state.optimizer.load_state_dict(payload['sgd_buffers'])
        if state.discriminator is not None and payload.get('discriminator') is not None:
            state.discriminator.load_state_dict(payload['discriminator'])
            state.disc_optimizer.load_state_dict(payload['disc_optimizer'])
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint {path} does not match its config: {e}") from e
    state.iteration = int(payload['iteration'])
    state.best_miou = payload.get('best_miou')
    state.pipeline.eval()
    return LoadedCheckpoint(config=cfg, state=state)


# ===== RUNS =====

class TrainingLog:
    """Newline-delimited JSON records"""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text('')

    def write(self, record: Dict[str, Any]):
        with self.path.open('a') as handle:
            handle.write(json.dumps(record, sort_keys=True) + '\n')


def read_training_log(path: Path) -> List[Dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def make_run_dir(run_root: Path, cfg: ExperimentConfig) -> Path:
    stamp = datetime.now().strftime('%Y%m%d-%H%M%S')
    run_dir = Path(run_root) / f"{stamp}-{config_hash(cfg)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def batch_stream(dataset: SegmentationDataset, batch_size: int, seed: int, workers: int,
                 order: Any) -> Iterator[Dict[str, torch.Tensor]]:
    """Endless batches; each epoch's order depends only on (seed, epoch)"""
    sampler = EpochSampler(len(dataset), seed)
    drop_last = len(dataset) >= batch_size
    for epoch in itertools.count():
        dataset.set_epoch(epoch)
        sampler.set_epoch(epoch)
        loader = DataLoader(dataset, batch_size=batch_size, sampler=sampler,
                            num_workers=workers, drop_last=drop_last)
        for batch in loader:
            order.update(np.asarray(batch['index'], dtype=np.int64).tobytes())
            yield batch


@dataclass
class FitResult:
    run_dir: Path
    final_checkpoint: Path
    best_checkpoint: Optional[Path]
    log_path: Path
    history: List[Tuple[int, float]]
    final_miou: Optional[float]
    order_hash: str


def _datasets(cfg: ExperimentConfig):
    tcfg = cfg.train
    source = tcfg.source
    taxonomy = layout_template(source.layout).taxonomy
    train_set = SegmentationDataset(index_dataset(source.root, source.layout, source.train_split),
                                    taxonomy, tcfg.aug, train=True, seed=tcfg.seed)
    val_set = SegmentationDataset(index_dataset(source.root, source.layout, source.val_split),
                                  taxonomy, tcfg.aug, train=False, eval_crop=tcfg.eval_crop)
    target_set = None
    if tcfg.adaptation is not None:
        target = tcfg.target
        target_set = SegmentationDataset(
            index_dataset(target.root, target.layout, target.train_split, domain_tag='target'),
            layout_template(target.layout).taxonomy, tcfg.aug, train=True, seed=tcfg.seed + 1)
    return train_set, val_set, target_set


@log_performance('fit')
def fit(cfg: ExperimentConfig, run_dir: Path, overrides: Sequence[str] = (),
        workers: Optional[int] = None) -> FitResult:
    """Train to max_iterations, evaluating every eval_interval and at the end"""
    with deterministic_algorithms():
        return _fit(cfg, run_dir, overrides, workers)


def _fit(cfg: ExperimentConfig, run_dir: Path, overrides: Sequence[str],
         workers: Optional[int]) -> FitResult:
    tcfg = cfg.train
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    run_id = run_dir.name
    workers = tcfg.workers if workers is None else workers
    seg_logger.set_run_context(run_id, {'seed': tcfg.seed, 'config_hash': config_hash(cfg)})

    (run_dir / 'config.yaml').write_text(dump_experiment_config(cfg))
    train_set, val_set, target_set = _datasets(cfg)

    torch.manual_seed(tcfg.seed)
    state = init_train_state(cfg)

    log = TrainingLog(run_dir / 'train_log.jsonl')
    log.write({'type': 'header', 'config': cfg.model_dump(mode='json'),
               'overrides': list(overrides), 'seed': tcfg.seed})

    order = hashlib.sha256()
    source_batches = batch_stream(train_set, tcfg.batch_size, tcfg.seed, workers, order)
    target_batches = None
    if target_set is not None:
        target_batches = batch_stream(target_set, tcfg.batch_size, tcfg.seed + 1, workers, hashlib.sha256())

    best_path = run_dir / 'checkpoint_best.pt'
    history: List[Tuple[int, float]] = []
    report: Optional[MetricsReport] = None

    def run_eval():
        nonlocal report
        _, report = evaluate(state.pipeline, val_set, tcfg.eval_batch_size, workers)
        history.append((state.iteration, report.miou))
        log.write({'type': 'eval', 'iteration': state.iteration,
                   'miou': report.miou, 'pixel_accuracy': report.pixel_accuracy})
        log_eval_result(run_id, state.iteration, report.miou, report.pixel_accuracy)
        if state.best_miou is None or report.miou > state.best_miou:
            state.best_miou = report.miou
            save_checkpoint(best_path, state, cfg, run_id)

    while state.iteration < tcfg.max_iterations:
        tgt_batch = next(target_batches) if target_batches is not None else None
        state, record = train_step(state, next(source_batches), tgt_batch, tcfg, run_id)
        log.write(record)
        if state.iteration % tcfg.eval_interval == 0:
            run_eval()

    if not history or history[-1][0] != state.iteration:
        run_eval()

    final_path = save_checkpoint(run_dir / 'checkpoint_final.pt', state, cfg, run_id)
    order_hash = order.hexdigest()
    log.write({'type': 'summary', 'iteration': state.iteration, 'order_hash': order_hash,
               'final_miou': report.miou, 'best_miou': state.best_miou,
               'running_losses': state.running_means()})
    (run_dir / 'metrics.json').write_text(json.dumps(report_to_record(report), indent=2))

    return FitResult(run_dir=run_dir, final_checkpoint=final_path,
                     best_checkpoint=best_path if best_path.exists() else None,
                     log_path=log.path, history=history, final_miou=report.miou,
                     order_hash=order_hash)


# ===== ABLATION =====

ABLATION_ARMS = (('with_relight', True), ('without_relight', False))


@log_performance('ablation_run')
def ablation_run(cfg: ExperimentConfig, run_dir: Path, overrides: Sequence[str] = (),
                 workers: Optional[int] = None) -> Dict[str, Any]:
    """Paired training runs differing only in relight_enabled"""
    run_dir = Path(run_dir)
    runs: Dict[str, Dict[str, Any]] = {}
    for key, enabled in ABLATION_ARMS:
        arm_overrides = list(overrides) + [f"relight_enabled={str(enabled).lower()}"]
        arm_cfg = apply_overrides(cfg, [arm_overrides[-1]])
        result = fit(arm_cfg, run_dir / key, arm_overrides, workers)
        runs[key] = {
            'run_dir': str(result.run_dir),
            'log': str(result.log_path),
            'seed': arm_cfg.train.seed,
            'order_hash': result.order_hash,
            'trajectory': [{'iteration': i, 'miou': m} for i, m in result.history],
            'final_miou': result.final_miou,
        }

    report = {
        'runs': runs,
        'delta': runs['with_relight']['final_miou'] - runs['without_relight']['final_miou'],
        'orders_identical': runs['with_relight']['order_hash'] == runs['without_relight']['order_hash'],
    }
    (run_dir / 'ablation_report.json').write_text(json.dumps(report, indent=2, sort_keys=True))
    seg_logger.log_run_event(run_dir.name, 'ablation_complete',
                             {'delta': report['delta'], 'orders_identical': report['orders_identical']})
    return report


__all__ = [
    'RHRSegNet', 'build_pipeline', 'Discriminator', 'build_discriminator',
    'cross_entropy_loss', 'poly_decay', 'poly_lr', 'sgd_step', 'MomentumSGD',
    'TrainState', 'init_train_state', 'generator_losses', 'discriminator_loss', 'train_step',
    'evaluate', 'save_checkpoint', 'load_checkpoint', 'LoadedCheckpoint',
    'TrainingLog', 'read_training_log', 'make_run_dir', 'FitResult', 'fit', 'ablation_run',
]
