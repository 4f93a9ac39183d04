"""
Training loop.

A `Trainer` owns one model, its optimiser states and its position in the
data (epoch and batch index).  Each epoch is shuffled by its own generator,
``substream(seed, "shuffle", epoch)``, so a trainer rebuilt from a
checkpoint continues with exactly the batches an uninterrupted run would
have seen.
"""

from __future__ import annotations

import logging
import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .config import substream
from .data_model import MiniBatch
from .errors import ConfigError, DivergenceError, NonFiniteGradientError
from .interaction import order_key
from .metrics import ScoredSet, alpha_histogram, auc, logloss
from .network import FactorizationModel, predict
from .optim import AdamState, GrdaState, train_step
from .report import EpochRecord, RunReport

logger = logging.getLogger(__name__)


def evaluate(model: FactorizationModel, data: MiniBatch, batch_size: int = 2000) -> Dict[str, float]:
    """Test log loss and AUC (AUC is omitted when *data* holds a single class)."""
    scored = ScoredSet(predict(model, data, batch_size), data.labels)
    out = {"logloss": logloss(scored)}
    try:
        out["auc"] = auc(scored)
    except ValueError:
        logger.warning("AUC undefined on a single-class evaluation set")
    return out


def open_counts(model: FactorizationModel) -> Dict[str, Tuple[int, int]]:
    """Open (or nonzero-α) interactions and the total per order."""
    alpha = model.alpha() or {}
    out = {}
    for order in model.config.orders:
        if model.gates is not None and order in model.gates.gates:
            g = model.gates.gates[order]
            out[order_key(order)] = (int(g.sum()), int(g.size))
        elif order in alpha:
            out[order_key(order)] = (int(np.count_nonzero(alpha[order])), int(alpha[order].size))
    return out


def kept_fractions(model: FactorizationModel) -> Dict[str, float]:
    return {k: (o / n if n else 0.0) for k, (o, n) in open_counts(model).items()}


class Trainer:
    def __init__(
        self,
        model: FactorizationModel,
        adam: AdamState,
        grda: Optional[GrdaState] = None,
        batch_size: int = 2000,
        seed: int = 0,
        stage: str = "train",
        eval_data: Optional[MiniBatch] = None,
    ):
        if batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
        self.model = model
        self.adam = adam
        self.grda = grda
        self.batch_size = batch_size
        self.seed = seed
        self.stage = stage
        self.eval_data = eval_data
        self.epoch = 0
        self.batch_index = 0
        self.steps = 0
        self.seconds = 0.0
        self.records: List[EpochRecord] = []
        self.on_epoch_end: Optional[Callable[["Trainer"], None]] = None
        self._loss_sum = 0.0
        self._loss_rows = 0
        self._epoch_seconds = 0.0

    # -- position -----------------------------------------------------------

    def position(self) -> Dict[str, object]:
        return {
            "stage": self.stage,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "steps": self.steps,
            "seconds": self.seconds,
            "loss_sum": self._loss_sum,
            "loss_rows": self._loss_rows,
            "epoch_seconds": self._epoch_seconds,
            "records": [vars(r) for r in self.records],
        }

    def restore_position(self, pos: Dict[str, object]) -> None:
        self.stage = str(pos["stage"])
        self.seed = int(pos["seed"])
        self.batch_size = int(pos["batch_size"])
        self.epoch = int(pos["epoch"])
        self.batch_index = int(pos["batch_index"])
        self.steps = int(pos["steps"])
        self.seconds = float(pos["seconds"])
        self._loss_sum = float(pos["loss_sum"])
        self._loss_rows = int(pos["loss_rows"])
        self._epoch_seconds = float(pos["epoch_seconds"])
        self.records = [EpochRecord(**r) for r in pos.get("records", [])]

    # -- loop ---------------------------------------------------------------

    def run(self, train: MiniBatch, epochs: Optional[int] = None, max_steps: Optional[int] = None) -> int:
        """Train until *epochs* full epochs are done or *max_steps* more steps ran."""
        if epochs is None and max_steps is None:
            raise ConfigError("Trainer.run needs epochs or max_steps")
        steps = 0
        while epochs is None or self.epoch < epochs:
            rng = substream(self.seed, "shuffle", self.epoch)
            for batch in train.iter_batches(self.batch_size, rng, start=self.batch_index):
                if max_steps is not None and steps >= max_steps:
                    return steps
                self._step(batch)
                steps += 1
            self._finish_epoch()
        return steps

    def fit(self, train: MiniBatch, epochs: int) -> List[EpochRecord]:
        self.run(train, epochs=epochs)
        return self.records

    def _step(self, batch: MiniBatch) -> None:
        started = time.perf_counter()
        try:
            value, _ = train_step(self.model, batch, self.adam, self.grda)
        except NonFiniteGradientError as exc:
            raise DivergenceError(f"{self.stage}: {exc} at step {self.steps}", self.report()) from exc
        if not np.isfinite(value):
            raise DivergenceError(f"{self.stage}: non-finite loss at step {self.steps}", self.report())
        self._loss_sum += value * batch.size
        self._loss_rows += batch.size
        self.batch_index += 1
        self.steps += 1
        elapsed = time.perf_counter() - started
        self._epoch_seconds += elapsed
        self.seconds += elapsed
        if self.grda is not None and logger.isEnabledFor(logging.DEBUG):
            logger.debug(
                "%s step %d: loss %.5f, threshold %.3g, kept %s",
                self.stage, self.steps, value, self.grda.threshold(), kept_fractions(self.model),
            )

    def _finish_epoch(self) -> None:
        record = EpochRecord(
            epoch=self.epoch,
            train_loss=self._loss_sum / self._loss_rows if self._loss_rows else float("nan"),
            kept=kept_fractions(self.model),
            seconds=self._epoch_seconds,
        )
        if self.eval_data is not None:
            scores = evaluate(self.model, self.eval_data, self.batch_size)
            record.eval_loss = scores["logloss"]
            record.eval_auc = scores.get("auc")
        self.records.append(record)
        logger.info(
            "%s epoch %d: train loss %.5f, eval auc %s, eval logloss %s, kept %s",
            self.stage, self.epoch, record.train_loss,
            "-" if record.eval_auc is None else f"{record.eval_auc:.5f}",
            "-" if record.eval_loss is None else f"{record.eval_loss:.5f}",
            {k: f"{v * 100:.1f}%" for k, v in record.kept.items()} or "-",
        )
        self.epoch += 1
        self.batch_index = 0
        self._loss_sum = 0.0
        self._loss_rows = 0
        self._epoch_seconds = 0.0
        if self.on_epoch_end is not None:
            self.on_epoch_end(self)

    # -- reporting ----------------------------------------------------------

    def report(self) -> RunReport:
        rep = RunReport(stage=self.stage, epochs=list(self.records))
        rep.wall_clock[self.stage] = self.seconds
        alpha = self.model.alpha()
        if alpha is not None:
            rep.alpha_histogram = alpha_histogram(np.concatenate(list(alpha.values())))
        rep.open_counts = open_counts(self.model)
        rep.kept = kept_fractions(self.model)
        return rep
