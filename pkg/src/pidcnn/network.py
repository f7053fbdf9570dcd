"""The tracking network: seven building blocks with concatenate-and-pool feature reuse,
then per-frame state vectors feeding a coordinate head and residual
velocity/acceleration heads.

Block k (input C channels)::

    y   = PReLU(BN(conv(PReLU(BN(conv(x))))))       # C -> C channels
    out = avg_pool2(concat_channels(y, x))           # 2C channels, H/2, W/2

Heads, with s_t the flattened per-frame state::

    p_t = FC1(s_t)
    v_t = (p_{t+1} - p_t) + FC2(s_{t+1} - s_t)
    a   = (v_2 - v_1)     + FC3(s_3 - 2 s_2 + s_1)

Output ordering is [p..., v..., a], matching ``scene.ground_truth``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as tc
from .scene import denormalize_targets, images_to_input
from .tensor import ParameterStore, RunningStats, ShapeError, Value

PRELU_INIT = 0.25


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 256
    n_blocks: int = 7
    in_channels: int = 2
    frames: int = 3
    pooling: str = "avg"        # "avg" | "max"
    activation: str = "prelu"   # "prelu" | "relu"

    def __post_init__(self):
        if self.image_size != 2 ** (self.n_blocks + 1):
            raise ValueError(
                f"image_size must be 2**(n_blocks+1) = {2 ** (self.n_blocks + 1)}, got {self.image_size}")
        if not 1 <= self.frames <= 3:
            raise ValueError(f"frames must be 1, 2 or 3, got {self.frames}")
        if self.pooling not in ("avg", "max"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.activation not in ("prelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def for_image_size(cls, image_size: int, **kw) -> "NetworkConfig":
        n = int(round(math.log2(image_size))) - 1
        return cls(image_size=image_size, n_blocks=n, **kw)

    def block_channels(self, k: int) -> int:
        """Input (= conv) channel count of block k, 1-based."""
        return self.in_channels * 2 ** (k - 1)

    @property
    def final_channels(self) -> int:
        return self.in_channels * 2 ** self.n_blocks

    @property
    def state_dim(self) -> int:
        return self.final_channels * 4

    def as_dict(self) -> dict:
        return asdict(self)


def layer_count(config: NetworkConfig) -> int:
    """Convolutional plus fully connected layers."""
    return 2 * config.n_blocks + 1 + (config.frames >= 2) + (config.frames == 3)


def _head_names(frames: int) -> list[str]:
    return ["fc1", "fc2", "fc3"][:frames]


def init_weights(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for k in range(1, config.n_blocks + 1):
        c = config.block_channels(k)
        std = math.sqrt(2.0 / (c * 9 * (1 + PRELU_INIT ** 2)))
        for j in (1, 2):
            pre = f"block{k}"
            store.add(f"{pre}.conv{j}.weight", (rng.standard_normal((c, c, 1, 3, 3)) * std).astype(dtype))
            store.add(f"{pre}.conv{j}.bias", np.zeros(c, dtype))
            store.add(f"{pre}.bn{j}.gamma", np.ones(c, dtype))
            store.add(f"{pre}.bn{j}.beta", np.zeros(c, dtype))
            store.add(f"{pre}.act{j}.alpha", np.full(c, PRELU_INIT, dtype))
            store.buffers[f"{pre}.bn{j}"] = RunningStats.initial(c, dtype)
    d = config.state_dim
    for name in _head_names(config.frames):
        _add_head(store, name, d, rng, dtype)
    return store


def _add_head(store: ParameterStore, name: str, d: int, rng, dtype) -> None:
    if name == "fc1":
        w = rng.standard_normal((d, 3)) * math.sqrt(1.0 / d)
    else:
        # residual heads start inert so velocity = pure coordinate difference
        w = np.zeros((d, 3))
    store.add(f"{name}.weight", w.astype(dtype))
    store.add(f"{name}.bias", np.zeros(3, dtype))


def _activate(x: Value, store: ParameterStore, name: str, config: NetworkConfig) -> Value:
    if config.activation == "relu":
        return tc.relu(x)
    return tc.prelu(x, store[name])


def block_forward(x: Value, store: ParameterStore, k: int, config: NetworkConfig,
                  train: bool = True) -> Value:
    if x.shape[3] % 2 or x.shape[4] % 2:
        raise ShapeError(f"block{k}: spatial extents must be even, got {x.shape}")
    pre = f"block{k}"
    y = x
    for j in (1, 2):
        y = tc.conv_ct33(y, store[f"{pre}.conv{j}.weight"], store[f"{pre}.conv{j}.bias"])
        y = tc.batch_norm(y, store[f"{pre}.bn{j}.gamma"], store[f"{pre}.bn{j}.beta"],
                          store.buffers[f"{pre}.bn{j}"], train=train)
        y = _activate(y, store, f"{pre}.act{j}.alpha", config)
    pool = tc.avg_pool2 if config.pooling == "avg" else tc.max_pool2
    return pool(tc.concat_channels(y, x))


def backbone_forward(x: Value, store: ParameterStore, config: NetworkConfig,
                     train: bool = True) -> Value:
    s = config.image_size
    if x.data.ndim != 5 or x.shape[1] != config.in_channels or x.shape[3:] != (s, s):
        raise ShapeError(
            f"backbone expects [N,{config.in_channels},T,{s},{s}], got {x.shape}")
    for k in range(1, config.n_blocks + 1):
        x = block_forward(x, store, k, config, train)
    return x


def split_states(f: Value) -> list[Value]:
    """One flattened [N, C*4] state per time index (channel-major, then spatial)."""
    n, c, t, h, w = f.shape
    if (h, w) != (2, 2):
        raise ShapeError(f"split_states expects 2x2 spatial extent, got {h}x{w}")
    return [tc.reshape(tc.time_slice(f, i), (n, c * h * w)) for i in range(t)]


def _fc(store, name, x):
    return tc.fully_connected(x, store[f"{name}.weight"], store[f"{name}.bias"])


def head_forward(states: list[Value], store: ParameterStore, residual: bool = True) -> Value:
    t = len(states)
    if not 1 <= t <= 3:
        raise ValueError(f"head expects 1 to 3 states, got {t}")
    ps = [_fc(store, "fc1", s) for s in states]
    out = list(ps)
    res = []
    for i in range(t - 1):
        v = ps[i + 1] - ps[i]
        if residual:
            res.append(_fc(store, "fc2", states[i + 1] - states[i]))
            v = v + res[-1]
        out.append(v)
    if t == 3:
        # v_2 - v_1 regrouped so that zero residuals leave p3 - 2p2 + p1 untouched
        a = ps[2] - ps[1] * 2.0 + ps[0]
        if residual:
            s2 = states[2] - states[1] * 2.0 + states[0]
            a = a + (res[1] - res[0]) + _fc(store, "fc3", s2)
        out.append(a)
    return tc.concat(out, axis=1)


def head_forward_no_residual(states: list[Value], store: ParameterStore) -> Value:
    return head_forward(states, store, residual=False)


def count_parameters(store: ParameterStore) -> int:
    """Trainable element count; batch-norm running statistics are excluded."""
    return sum(int(p.data.size) for p in store.values())


def transfer_weights(src: ParameterStore, src_config: NetworkConfig, dst_config: NetworkConfig,
                     seed: int = 0) -> ParameterStore:
    """Copy weights to a config that differs only in frame count; add zero residual heads."""
    if replace(src_config, frames=dst_config.frames) != dst_config:
        raise ValueError(f"configs differ beyond frame count: {src_config} vs {dst_config}")
    fresh = init_weights(dst_config, seed=seed, dtype=next(iter(src.values())).dtype)
    out = ParameterStore()
    for name, p in fresh.items():
        data = src[name].data.copy() if name in src else p.data
        out.add(name, data)
    for name, rs in fresh.buffers.items():
        old = src.buffers.get(name)
        out.buffers[name] = RunningStats(old.mean.copy(), old.var.copy()) if old is not None else rs
    return out


class Model:
    """A configuration plus its weights."""

    def __init__(self, config: NetworkConfig, store: ParameterStore | None = None, seed: int = 0):
        self.config = config
        self.store = store if store is not None else init_weights(config, seed)

    def forward(self, x, train: bool = True, residual: bool = True) -> Value:
        if not isinstance(x, Value):
            x = Value(np.asarray(x, dtype=self.dtype))
        f = backbone_forward(x, self.store, self.config, train)
        return head_forward(split_states(f), self.store, residual)

    def predict(self, images: np.ndarray, residual: bool = True, batch_size: int = 32) -> np.ndarray:
        """World-unit outputs for uint8 images [N, 2, T, H, W], eval mode."""
        out = []
        for lo in range(0, len(images), batch_size):
            x = images_to_input(images[lo:lo + batch_size], self.dtype)
            out.append(self.forward(x, train=False, residual=residual).data)
        return denormalize_targets(np.concatenate(out, axis=0))

    @property
    def dtype(self):
        return next(iter(self.store.values())).dtype

    def parameter_count(self) -> int:
        return count_parameters(self.store)
