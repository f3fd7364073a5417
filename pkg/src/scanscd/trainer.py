"""SGD/Nesterov training loop with polynomial learning-rate decay, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .data import ScdDataset, augment, collate
from .errors import CheckpointError, ConfigError, NumericError
from .metrics import (ConfusionMatrix, MetricsReport, TransitionMatrix, accumulate_confusion,
                      average_reports, confusion_counts, empty_transitions, metrics_report,
                      transition_analysis)
from .model import SCanNet, save_checkpoint
from .objectives import compose_prediction, total_loss

log = logging.getLogger(__name__)


def lr_schedule(iteration: int, total_iterations: int, lr0: float = 0.1, power: float = 1.5) -> float:
    if not 0 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    return lr0 * (1.0 - iteration / total_iterations) ** power


def steps_per_epoch(num_samples: int, batch_size: int) -> int:
    steps = num_samples // batch_size
    if steps == 0:
        raise ConfigError(f"dataset of {num_samples} samples is smaller than batch_size={batch_size}")
    return steps


class Trainer:
    """Owns the optimiser, the data-order RNG and the iteration counter."""

    def __init__(self, model: SCanNet, cfg: TrainConfig, total_iterations: int):
        self.model = model
        self.cfg = cfg
        self.total_iterations = total_iterations
        self.optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum,
                                         nesterov=True, weight_decay=cfg.weight_decay)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.iteration = 0
        self.epoch = 0
        self.best_score: float | None = None

    def current_lr(self) -> float:
        return lr_schedule(self.iteration, self.total_iterations, self.cfg.lr0, self.cfg.lr_power)

    def loss(self, batch):
        out = self.model(batch["image1"], batch["image2"])
        cfg = self.cfg
        return total_loss(out, batch["label1"], batch["label2"], self.model.cfg.pseudo_threshold,
                          lambda_chg=cfg.lambda_chg, lambda_psd=cfg.lambda_psd,
                          lambda_sc=cfg.lambda_sc, sc_swap_cases=cfg.sc_swap_cases,
                          pseudo_source=cfg.pseudo_source, full_binary_ce=cfg.full_binary_ce)

    def train_step(self, batch, lr: float | None = None) -> dict[str, float]:
        """One forward/backward/update; returns the loss breakdown plus ``lr``."""
        if self.iteration >= self.total_iterations:
            raise ConfigError("training schedule exhausted")
        lr = self.current_lr() if lr is None else lr
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        loss, breakdown = self.loss(batch)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip:
            norm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
            breakdown["grad_norm"] = float(norm)
        self.optimizer.step()
        self.iteration += 1
        return {"iter": self.iteration, "lr": lr, **breakdown}

    def epoch_batches(self, dataset: ScdDataset):
        order = torch.randperm(len(dataset), generator=self.generator).tolist()
        bs = self.cfg.batch_size
        for b in range(steps_per_epoch(len(dataset), bs)):
            samples = [dataset[i] for i in order[b * bs:(b + 1) * bs]]
            if self.cfg.augment:
                samples = [augment(s, self.generator) for s in samples]
            yield collate(samples)

    def state_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "epoch": self.epoch,
            "total_iterations": self.total_iterations,
            "best_score": self.best_score,
            "optimizer": self.optimizer.state_dict(),
            "rng": self.generator.get_state(),
            "train_config": self.cfg.to_flat(),
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("total_iterations") != self.total_iterations:
            raise CheckpointError("checkpoint schedule length differs from the current run")
        self.iteration = state["iteration"]
        self.epoch = state["epoch"]
        self.best_score = state["best_score"]
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["rng"])


@dataclass
class EvalResult:
    report: MetricsReport
    transitions: TransitionMatrix
    confusion: ConfusionMatrix


def evaluate_maps(pairs: Sequence[tuple], truths: Sequence[tuple], num_classes: int,
                  pool_epochs: bool = True) -> EvalResult:
    """Score predicted ``(pred1, pred2)`` maps against ``(gt1, gt2)`` maps."""
    if len(pairs) == 0:
        raise NumericError("empty split: nothing to evaluate")
    pooled = ConfusionMatrix.empty(num_classes)
    per_epoch = [np.zeros_like(pooled.counts), np.zeros_like(pooled.counts)]
    tm = empty_transitions(num_classes)
    for (p1, p2), (g1, g2) in zip(pairs, truths, strict=True):
        pooled = accumulate_confusion(p1, p2, g1, g2, pooled)
        if not pool_epochs:
            per_epoch[0] += confusion_counts(p1, g1, num_classes)
            per_epoch[1] += confusion_counts(p2, g2, num_classes)
        tm = tm + transition_analysis(p1, p2, num_classes)
    if pool_epochs:
        report = metrics_report(pooled)
    else:
        report = average_reports([metrics_report(c) for c in per_epoch])
    return EvalResult(report, tm, pooled)


@torch.no_grad()
def predict(model: SCanNet, dataset: ScdDataset, threshold: float = 0.5,
            batch_size: int = 8) -> list[tuple[np.ndarray, np.ndarray]]:
    was_training = model.training
    model.eval()
    preds = []
    try:
        for start in range(0, len(dataset), batch_size):
            batch = collate([dataset[i] for i in range(start, min(start + batch_size, len(dataset)))])
            out = model(batch["image1"], batch["image2"])
            p1, p2 = compose_prediction(out.prob1, out.prob2, out.change, threshold)
            preds += [(a.numpy().astype(np.uint8), b.numpy().astype(np.uint8))
                      for a, b in zip(p1, p2)]
    finally:
        model.train(was_training)
    return preds


def evaluate(model: SCanNet, dataset: ScdDataset, threshold: float = 0.5,
             pool_epochs: bool = True, batch_size: int = 8) -> EvalResult:
    if len(dataset) == 0:
        raise NumericError("empty split: nothing to evaluate")
    preds = predict(model, dataset, threshold, batch_size)
    truths = [(s.label1, s.label2) for s in dataset]
    return evaluate_maps(preds, truths, dataset.num_classes, pool_epochs)


def _fmt(record: dict) -> str:
    parts = []
    for k, v in record.items():
        parts.append(f"{k}={v:.8g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def fit(model: SCanNet, train_set: ScdDataset, val_set: ScdDataset | None, cfg: TrainConfig,
        out_dir: str | Path, resume: dict | None = None, stop_after_epoch: int | None = None,
        on_step: Callable[[dict], None] | None = None) -> Trainer:
    """Run the full schedule, writing logs and checkpoints under ``out_dir``.

    ``train.log`` gets one line per optimiser step, ``metrics.log`` one line
    per evaluation; ``last.ckpt`` is refreshed every epoch and ``best.ckpt``
    whenever the evaluation F_scd improves.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    total = cfg.epochs * steps_per_epoch(len(train_set), cfg.batch_size)
    trainer = Trainer(model, cfg, total)
    if resume is not None:
        trainer.load_state_dict(resume)
    eval_set = val_set if val_set is not None and len(val_set) else train_set
    train_log = out_dir / "train.log"
    metrics_log = out_dir / "metrics.log"
    if resume is None:
        train_log.write_text("")
        metrics_log.write_text("")

    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    while trainer.epoch < last_epoch:
        epoch = trainer.epoch + 1
        lines = []
        for batch in trainer.epoch_batches(train_set):
            record = {"epoch": epoch, **trainer.train_step(batch)}
            lines.append(_fmt(record))
            if on_step:
                on_step(record)
        with train_log.open("a") as fh:
            fh.write("\n".join(lines) + "\n")
        trainer.epoch = epoch

        is_last = epoch == cfg.epochs
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or is_last):
            result = evaluate(model, eval_set, cfg.change_threshold, cfg.pool_epochs)
            values = result.report.values()
            with metrics_log.open("a") as fh:
                fh.write(_fmt({"epoch": epoch, "iter": trainer.iteration, **values}) + "\n")
            log.info("epoch %d: F_scd=%.4f mIoU=%.4f SeK=%.4f", epoch, values["f_scd"],
                     values["miou"], values["sek"])
            if trainer.best_score is None or values["f_scd"] > trainer.best_score:
                trainer.best_score = values["f_scd"]
                save_checkpoint(out_dir / "best.ckpt", model, extra={"epoch": epoch, **values})
        save_checkpoint(out_dir / "last.ckpt", model, trainer.state_dict())
    if not (out_dir / "best.ckpt").exists():
        save_checkpoint(out_dir / "best.ckpt", model, extra={"epoch": trainer.epoch})
    return trainer

