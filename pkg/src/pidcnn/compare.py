"""Convergence comparisons between architecture variants.

Every arm starts from the same initial weights and sees the same batch
stream (batch order and random frame draws are keyed on the training seed),
so curves differ only through the variant under test.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .checkpoint import Checkpoint, store_digest
from .network import NetworkConfig, init_weights
from .scene import Dataset
from .training import MetricsLog, TrainConfig, train_stage


@dataclass
class Comparison:
    variable: str                   # "pooling" or "activation"
    logs: dict[str, MetricsLog]
    init_digests: dict[str, str]

    def curve_csvs(self) -> dict[str, str]:
        """One ``step,epoch,lr,loss`` CSV per arm."""
        return {arm: log.curve_csv() for arm, log in self.logs.items()}

    def summary_csv(self) -> str:
        lines = [f"{self.variable},steps,first_loss,final_epoch_loss"]
        for arm, log in self.logs.items():
            losses = log.epoch_losses()
            last = losses[max(losses)] if losses else float("nan")
            first = log.steps[0].train_loss if log.steps else float("nan")
            lines.append(f"{arm},{len(log.steps)},{first!r},{last!r}")
        return "\n".join(lines) + "\n"


def _compare(variable: str, arms: tuple[str, ...], train_set: Dataset, epochs: int, seed: int,
             batch_size: int, base: NetworkConfig | None) -> Comparison:
    base = base or NetworkConfig.for_image_size(train_set.image_size, frames=1)
    if base.frames != 1:
        raise ValueError("comparisons train stage 1, which needs a 1-frame config")
    start = init_weights(base, seed=seed)
    logs, digests = {}, {}
    for arm in arms:
        config = replace(base, **{variable: arm})
        store = start.copy()
        digests[arm] = store_digest(store)
        cfg = TrainConfig(stage=1, epochs=epochs, batch_size=batch_size, seed=seed, **{variable: arm})
        _, logs[arm] = train_stage(cfg, train_set, init=Checkpoint(config, store, 0))
    return Comparison(variable, logs, digests)


def compare_pooling(train_set: Dataset, epochs: int = 1, seed: int = 0, batch_size: int = 32,
                    base: NetworkConfig | None = None) -> Comparison:
    """Average versus max pooling in every block."""
    return _compare("pooling", ("avg", "max"), train_set, epochs, seed, batch_size, base)


def compare_nonlinearity(train_set: Dataset, epochs: int = 1, seed: int = 0, batch_size: int = 32,
                         base: NetworkConfig | None = None) -> Comparison:
    """PReLU versus ReLU. The ReLU arm carries unused alpha tensors so both arms share one init."""
    return _compare("activation", ("prelu", "relu"), train_set, epochs, seed, batch_size, base)
