"""Compact residual 1-D convolutional network for spectrum classification.

The architecture is a strided stem convolution, a few stages of residual
blocks that halve the length and widen the channels, global average pooling
into a feature vector, and a bias-free linear layer producing one logit per
output class. Keeping the last layer bias-free makes the logits a pure linear
image of the feature vector, which matters for strategies that regulate the
feature magnitude directly.

Weights live in a flat name -> Tensor dict so the optimizer and the
checkpoint format can stay generic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ParseError, ShapeMismatchError

MODEL_FILE_MAGIC = b"OSNC"
MODEL_FILE_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters; everything needed to rebuild a model."""

    input_bins: int
    output_count: int
    stem_channels: int = 16
    stem_kernel: int = 7
    stem_stride: int = 2
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    block_kernel: int = 3

    def __post_init__(self):
        if self.output_count < 2:
            raise ConfigError(f"need at least 2 output classes, got {self.output_count}")
        if not self.stage_channels:
            raise ConfigError("need at least one stage")
        if self.blocks_per_stage < 1:
            raise ConfigError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if self.stem_kernel % 2 == 0 or self.block_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd so padding preserves alignment")
        if any(c < 1 for c in self.stage_channels) or self.stem_channels < 1:
            raise ConfigError("channel counts must be positive")
        total = self.total_stride
        if self.input_bins < total:
            raise ConfigError(
                f"input of {self.input_bins} bins is shorter than the total stride {total}")

    @property
    def total_stride(self) -> int:
        return self.stem_stride * 2 ** (len(self.stage_channels) - 1)

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    @property
    def parameter_count(self) -> int:
        """Closed-form count of trainable scalars (checked against the built model)."""
        k = self.block_kernel
        count = self.stem_channels * self.stem_kernel + 2 * self.stem_channels
        in_ch = self.stem_channels
        for stage_idx, ch in enumerate(self.stage_channels):
            for block_idx in range(self.blocks_per_stage):
                stride = 2 if stage_idx > 0 and block_idx == 0 else 1
                count += ch * in_ch * k + 2 * ch          # conv1 + bn1
                count += ch * ch * k + 2 * ch             # conv2 + bn2
                if stride != 1 or in_ch != ch:
                    count += ch * in_ch + 2 * ch          # projection conv + bn
                in_ch = ch
        count += self.feature_dim * self.output_count     # classifier, no bias
        return count


def resnet_mini(input_bins: int, output_count: int) -> NetworkConfig:
    """Default compact network: 3 stages of 2 blocks, 64-d features."""
    return NetworkConfig(input_bins=input_bins, output_count=output_count)


def resnet26_like(input_bins: int, output_count: int) -> NetworkConfig:
    """Deeper variant: 4 stages of 3 blocks, 128-d features."""
    return NetworkConfig(
        input_bins=input_bins, output_count=output_count,
        stage_channels=(16, 32, 64, 128), blocks_per_stage=3)


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Model:
    """The network itself: parameter dict, batch-norm buffers, and forward pass."""

    def __init__(self, config: NetworkConfig, seed: int | np.random.Generator = 0):
        self.config = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: dict[str, ad.Tensor] = {}
        self.bn_states: dict[str, ad.BatchNormState] = {}
        self._build(rng)
        actual = sum(p.size for p in self.params.values())
        assert actual == config.parameter_count, (actual, config.parameter_count)

    def _add_conv(self, name: str, out_ch: int, in_ch: int, k: int, rng) -> None:
        self.params[name + ".w"] = ad.Tensor(
            _kaiming(rng, (out_ch, in_ch, k), in_ch * k), requires_grad=True)

    def _add_bn(self, name: str, channels: int) -> None:
        self.params[name + ".gamma"] = ad.Tensor(np.ones(channels), requires_grad=True)
        self.params[name + ".beta"] = ad.Tensor(np.zeros(channels), requires_grad=True)
        self.bn_states[name] = ad.BatchNormState.initial(channels)

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        self._add_conv("stem.conv", cfg.stem_channels, 1, cfg.stem_kernel, rng)
        self._add_bn("stem.bn", cfg.stem_channels)
        in_ch = cfg.stem_channels
        for stage_idx, ch in enumerate(cfg.stage_channels):
            for block_idx in range(cfg.blocks_per_stage):
                prefix = f"stage{stage_idx}.block{block_idx}"
                stride = 2 if stage_idx > 0 and block_idx == 0 else 1
                self._add_conv(prefix + ".conv1", ch, in_ch, cfg.block_kernel, rng)
                self._add_bn(prefix + ".bn1", ch)
                self._add_conv(prefix + ".conv2", ch, ch, cfg.block_kernel, rng)
                self._add_bn(prefix + ".bn2", ch)
                if stride != 1 or in_ch != ch:
                    self._add_conv(prefix + ".proj", ch, in_ch, 1, rng)
                    self._add_bn(prefix + ".proj_bn", ch)
                in_ch = ch
        self.params["head.w"] = ad.Tensor(
            _kaiming(rng, (cfg.feature_dim, cfg.output_count), cfg.feature_dim),
            requires_grad=True)

    # -- forward ----------------------------------------------------------

    def _block(self, x: ad.Tensor, prefix: str, stride: int, training: bool) -> ad.Tensor:
        p, k = self.params, self.config.block_kernel
        pad = k // 2
        y = ad.conv1d(x, p[prefix + ".conv1.w"], stride=stride, padding=pad)
        y = ad.batch_norm(y, p[prefix + ".bn1.gamma"], p[prefix + ".bn1.beta"],
                          self.bn_states[prefix + ".bn1"], training)
        y = ad.relu(y)
        y = ad.conv1d(y, p[prefix + ".conv2.w"], stride=1, padding=pad)
        y = ad.batch_norm(y, p[prefix + ".bn2.gamma"], p[prefix + ".bn2.beta"],
                          self.bn_states[prefix + ".bn2"], training)
        if prefix + ".proj.w" in p:
            shortcut = ad.conv1d(x, p[prefix + ".proj.w"], stride=stride, padding=0)
            shortcut = ad.batch_norm(shortcut, p[prefix + ".proj_bn.gamma"],
                                     p[prefix + ".proj_bn.beta"],
                                     self.bn_states[prefix + ".proj_bn"], training)
        else:
            shortcut = x
        return ad.relu(ad.add(y, shortcut))

    def forward(self, x, training: bool = False) -> tuple[ad.Tensor, ad.Tensor]:
        """Map (N, L) inputs to ((N, output_count) logits, (N, feature_dim) features)."""
        cfg = self.config
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(np.asarray(x, dtype=np.float64))
        if x.data.ndim != 2 or x.shape[1] != cfg.input_bins:
            raise ShapeMismatchError(
                f"forward: expected (N, {cfg.input_bins}) input, got shape {x.shape}")
        h = _insert_channel_axis(x) if x.requires_grad else ad.Tensor(x.data[:, None, :])
        p = self.params
        h = ad.conv1d(h, p["stem.conv.w"], stride=cfg.stem_stride, padding=cfg.stem_kernel // 2)
        h = ad.batch_norm(h, p["stem.bn.gamma"], p["stem.bn.beta"],
                          self.bn_states["stem.bn"], training)
        h = ad.relu(h)
        for stage_idx in range(len(cfg.stage_channels)):
            for block_idx in range(cfg.blocks_per_stage):
                stride = 2 if stage_idx > 0 and block_idx == 0 else 1
                h = self._block(h, f"stage{stage_idx}.block{block_idx}", stride, training)
        features = ad.global_average_pool(h)
        logits = ad.matmul(features, p["head.w"])
        return logits, features

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- persistence -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: t.data for name, t in self.params.items()}
        for name, st in self.bn_states.items():
            arrays[name + ".running_mean"] = st.running_mean
            arrays[name + ".running_var"] = st.running_var
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ParseError(f"checkpoint key mismatch: missing {missing}, unexpected {extra}")
        for name, t in self.params.items():
            if arrays[name].shape != t.shape:
                raise ShapeMismatchError(
                    f"checkpoint tensor {name!r} has shape {arrays[name].shape}, model wants {t.shape}")
            t.data = np.array(arrays[name])
        for name, st in self.bn_states.items():
            st.running_mean = np.array(arrays[name + ".running_mean"])
            st.running_var = np.array(arrays[name + ".running_var"])

    def save(self, path) -> None:
        header = json.dumps(asdict(self.config)).encode()
        with open(path, "wb") as fh:
            fh.write(MODEL_FILE_MAGIC)
            fh.write(struct.pack("<HI", MODEL_FILE_VERSION, len(header)))
            fh.write(header)
            ad.write_tensors(fh, self.state_arrays())

    @classmethod
    def load(cls, path) -> "Model":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MODEL_FILE_MAGIC:
                raise ParseError(f"{path}: not a model checkpoint (bad magic {magic!r})")
            version, header_len = struct.unpack("<HI", fh.read(6))
            if version != MODEL_FILE_VERSION:
                raise ParseError(f"{path}: unsupported checkpoint version {version}")
            raw = json.loads(fh.read(header_len).decode())
            raw["stage_channels"] = tuple(raw["stage_channels"])
            config = NetworkConfig(**raw)
            arrays = ad.read_tensors(fh)
        model = cls(config, seed=0)
        model.load_state_arrays(arrays)
        return model


def _insert_channel_axis(x: ad.Tensor) -> ad.Tensor:
    """(N, L) -> (N, 1, L) with gradient flow, for differentiable inputs."""
    def backward():
        ad._accumulate(x, out.grad[:, 0, :])

    out = ad._make(x.data[:, None, :], (x,), backward)
    return out
