"""Three-stage curriculum: coordinates from one frame, then two frames with
velocity, then three frames with acceleration. Each stage starts from the
previous stage's weights.

Learning rate: ``initial * 0.1**(epoch // 10) * 1e3**(epoch // 40)``; the
alternative reading (reset to the initial rate every 40 epochs) is available
with ``schedule="reset"``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .evaluation import predict_dataset
from .network import Model, NetworkConfig, transfer_weights
from .scene import Dataset, assemble_batch, images_to_input, normalize_targets
from .tensor import AdamConfig, adam_step, backward, mse_loss

log = logging.getLogger(__name__)

STAGE_LR = {1: 1e-3, 2: 1e-6, 3: 1e-6}
VAL_SEED = 7919


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 120
    batch_size: int = 32
    initial_lr: float | None = None     # None -> 1e-3 for stage 1, 1e-6 afterwards
    decay: float = 0.1
    decay_every: int = 10
    boost: float = 1e3
    decays_per_boost: int = 4
    schedule: str = "cycle"             # "cycle" | "reset"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_out: str | None = None
    pooling: str = "avg"
    activation: str = "prelu"

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.schedule not in ("cycle", "reset"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def lr0(self) -> float:
        return STAGE_LR[self.stage] if self.initial_lr is None else self.initial_lr

    def fingerprint(self) -> str:
        keys = asdict(self)
        keys.pop("checkpoint_out")
        return hashlib.sha256(json.dumps(keys, sort_keys=True).encode()).hexdigest()[:16]


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    decays = epoch // config.decay_every
    cycle = config.decay_every * config.decays_per_boost
    if config.schedule == "reset":
        return config.lr0 * config.decay ** ((epoch % cycle) // config.decay_every)
    return config.lr0 * config.decay ** decays * config.boost ** (epoch // cycle)


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    train_loss: float
    coord_loss: float
    val_loss: float | None = None
    val_std: float | None = None


@dataclass
class MetricsLog:
    steps: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.steps and rec.step <= self.steps[-1].step:
            raise ValueError(f"step {rec.step} does not follow {self.steps[-1].step}")
        self.steps.append(rec)

    def epoch_losses(self) -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for r in self.steps:
            out.setdefault(r.epoch, []).append(r.train_loss)
        return {e: float(np.mean(v)) for e, v in out.items()}

    def validation(self) -> list[StepRecord]:
        return [r for r in self.steps if r.val_loss is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "epoch", "lr", "train_loss", "val_loss", "val_std"])
        for r in self.steps:
            w.writerow([r.step, r.epoch, repr(r.lr), repr(r.train_loss),
                        "" if r.val_loss is None else repr(r.val_loss),
                        "" if r.val_std is None else repr(r.val_std)])
        return buf.getvalue()

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "epoch", "lr", "loss"])
        for r in self.steps:
            w.writerow([r.step, r.epoch, repr(r.lr), repr(r.train_loss)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLog":
        out = cls()
        for row in csv.DictReader(io.StringIO(text)):
            loss = float(row.get("train_loss", row.get("loss")))
            val = row.get("val_loss") or None
            std = row.get("val_std") or None
            out.append(StepRecord(int(row["step"]), int(row["epoch"]), float(row["lr"]), loss, math.nan,
                                  None if val is None else float(val), None if std is None else float(std)))
        return out


def validate(model: Model, dataset: Dataset, frames: int, seed: int = VAL_SEED) -> tuple[float, float]:
    """Normalized MSE and pooled coordinate error std (world units)."""
    pred, truth, _ = predict_dataset(model.predict, dataset, frames, seed)
    loss = float(np.mean(normalize_targets(pred - truth) ** 2))
    coord = (pred - truth)[:, : 3 * frames]
    return loss, float(coord.std())


def _coordinate_loss(out: np.ndarray, target: np.ndarray, frames: int) -> float:
    d = out[:, : 3 * frames] - target[:, : 3 * frames]
    return float(np.mean(d * d))


def _prepare(cfg: TrainConfig, dataset: Dataset, init: Checkpoint | None) -> tuple[Model, int]:
    frames = cfg.stage
    if init is None:
        if cfg.stage != 1:
            raise ValueError(f"stage {cfg.stage} needs initial weights from stage {cfg.stage - 1}")
        config = NetworkConfig.for_image_size(dataset.image_size, frames=1,
                                              pooling=cfg.pooling, activation=cfg.activation)
        return Model(config, seed=cfg.seed), 0
    if init.config.image_size != dataset.image_size:
        raise ValueError(f"checkpoint is for {init.config.image_size}px images, "
                         f"dataset has {dataset.image_size}px")
    if init.config.frames == frames:
        return Model(init.config, init.store), init.epoch
    if init.config.frames > frames:
        raise ValueError(f"cannot start stage {cfg.stage} from a {init.config.frames}-frame checkpoint")
    config = replace(init.config, frames=frames)
    return Model(config, transfer_weights(init.store, init.config, config, seed=cfg.seed)), 0


def train_stage(cfg: TrainConfig, train_set: Dataset, val_set: Dataset | None = None,
                init: Checkpoint | None = None) -> tuple[Model, MetricsLog]:
    """Train one curriculum stage.

    ``init`` is the previous stage's checkpoint (weights are transferred and
    the optimizer starts fresh) or a checkpoint of this same stage (training
    resumes at its epoch with its optimizer state).
    """
    model, start = _prepare(cfg, train_set, init)
    frames = cfg.stage
    store = model.store
    n = len(train_set)
    if n == 0:
        raise ValueError("training set is empty")
    per_epoch = math.ceil(n / cfg.batch_size)
    metrics = MetricsLog()

    def checkpoint(epoch):
        return Checkpoint(model.config, store, epoch,
                          {"stage": cfg.stage, "train_fingerprint": cfg.fingerprint()})

    for epoch in range(start, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, cfg.stage, epoch])
        lr = lr_at(epoch, cfg)
        adam = AdamConfig(lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        for b in range(per_epoch):
            idx = np.arange(b * cfg.batch_size, min((b + 1) * cfg.batch_size, n))
            images, truth = assemble_batch(train_set, idx, rng, frames)
            target = normalize_targets(truth).astype(model.dtype)
            out = model.forward(images_to_input(images, model.dtype), train=True)
            loss = mse_loss(out, target)
            value = float(loss.data)
            if not math.isfinite(value):
                if cfg.checkpoint_out:
                    save_checkpoint(f"{cfg.checkpoint_out}.nan", checkpoint(epoch))
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            backward(loss, store)
            adam_step(store, adam)
            metrics.append(StepRecord(epoch * per_epoch + b + 1, epoch, lr, value,
                                      _coordinate_loss(out.data, target, frames)))
        if val_set is not None and len(val_set):
            vl, vs = validate(model, val_set, frames)
            metrics.steps[-1].val_loss, metrics.steps[-1].val_std = vl, vs
            log.info("stage %d epoch %d lr %.1e train %.5f val %.5f coord std %.4f",
                     cfg.stage, epoch, lr, metrics.epoch_losses()[epoch], vl, vs)
        if cfg.checkpoint_out:
            save_checkpoint(cfg.checkpoint_out, checkpoint(epoch + 1))
    if cfg.checkpoint_out:
        save_checkpoint(cfg.checkpoint_out, checkpoint(max(cfg.epochs, start)))
    return model, metrics


def run_curriculum(configs: list[TrainConfig], train_set: Dataset, val_set: Dataset | None = None
                   ) -> tuple[Model, list[MetricsLog]]:
    """Stage 1, transfer, stage 2, transfer, stage 3."""
    if [c.stage for c in configs] != [1, 2, 3][: len(configs)]:
        raise ValueError("curriculum configs must be for stages 1, 2, 3 in order")
    logs = []
    init = None
    model = None
    for cfg in configs:
        model, metrics = train_stage(cfg, train_set, val_set, init)
        logs.append(metrics)
        init = Checkpoint(model.config, model.store, cfg.epochs, {"stage": cfg.stage})
        if cfg.checkpoint_out:
            init = load_checkpoint(cfg.checkpoint_out)
    return model, logs
