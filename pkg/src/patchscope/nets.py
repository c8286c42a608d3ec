"""LaDeDa and Tiny-LaDeDa: construction, forward pass and cost model.

LaDeDa is a ResNet-50 layout (bottleneck blocks 3/4/6/3) where almost every
3x3 convolution is replaced by a 1x1 one, in the style of BagNet.  All
convolutions are unpadded, so every cell of the output score map sees
exactly one ``q x q`` window of the input.  The only 3x3 kernels are the
stem's second convolution, the first block of layer1 and, for ``q=9``, the
first block of layer2.  Strides of 2 sit on layer1's 3x3, layer2's first
3x3 (or its 1x1 stand-in for ``q=5``) and layer3's first block, for a total
stride of 8: a 224x224 crop becomes a 27x27 map of patch logits.

Tiny-LaDeDa is four unpadded convolutions (1x1, 3x3, 1x1, 3x3; 8 channels,
ReLU after each), global average pooling and an 8->1 affine head; its
receptive field is 5x5.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import container
from . import tensor as T
from .errors import ConfigError
from .tensor import ConvSpec, Tensor

SUPPORTED_Q = (5, 9)
FULL_CHANNELS = (64, 256, 512, 1024, 2048)
EXPANSION = 4


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``channels`` is the stem width followed by the output width of each
    residual layer (bottleneck width = output / 4).  For Tiny it is the
    width of each of the four convolutions.
    """

    kind: str = "ladeda"
    patch_size: int = 9
    pooling: str = "average"
    channels: tuple[int, ...] = FULL_CHANNELS
    blocks: tuple[int, ...] = (3, 4, 6, 3)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    representation: str = "raw"

    def __post_init__(self):
        if self.kind not in ("ladeda", "tiny"):
            raise ConfigError(f"model kind must be 'ladeda' or 'tiny', got {self.kind!r}")
        if self.pooling not in ("average", "max"):
            raise ConfigError(f"pooling must be 'average' or 'max', got {self.pooling!r}")
        if self.representation not in ("raw", "gradient"):
            raise ConfigError(f"representation must be 'raw' or 'gradient', got {self.representation!r}")
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel widths must be positive")
        if self.kind == "ladeda":
            if self.patch_size not in SUPPORTED_Q:
                raise ConfigError(f"unsupported patch size q={self.patch_size}; supported: {SUPPORTED_Q}")
            if len(self.channels) != 5 or len(self.blocks) != 4 or len(self.strides) != 4:
                raise ConfigError("ladeda needs 5 channel widths, 4 block counts and 4 strides")
            if any(b < 1 for b in self.blocks) or any(s < 1 for s in self.strides):
                raise ConfigError("block counts and strides must be positive")
            if any(c % EXPANSION for c in self.channels[1:]):
                raise ConfigError(f"layer widths must be multiples of {EXPANSION}")
        else:
            if self.patch_size != 5:
                raise ConfigError("tiny has a fixed 5x5 receptive field")
            if len(self.channels) != 4:
                raise ConfigError("tiny needs 4 channel widths")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kw: dict = {}
        names = {f.name: f for f in dataclasses.fields(cls)}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep or key not in names:
                raise ConfigError(f"bad model config line {raw!r}")
            val = val.strip()
            if key in ("channels", "blocks", "strides"):
                kw[key] = tuple(int(x) for x in val.split(",") if x)
            elif key == "patch_size":
                kw[key] = int(val)
            else:
                kw[key] = val
        return cls(**kw)


def ladeda_config(q: int = 9, width_divisor: int = 1, pooling: str = "average", representation: str = "raw") -> ModelConfig:
    """Full-size LaDeDa, or a uniformly narrowed copy for desk-scale runs."""
    if width_divisor < 1 or any(c % (width_divisor * (EXPANSION if i else 1)) for i, c in enumerate(FULL_CHANNELS)):
        raise ConfigError(f"width divisor {width_divisor} does not divide the channel plan")
    chans = tuple(c // width_divisor for c in FULL_CHANNELS)
    return ModelConfig(kind="ladeda", patch_size=q, pooling=pooling, channels=chans, representation=representation)


def tiny_config(pooling: str = "average", representation: str = "raw") -> ModelConfig:
    return ModelConfig(
        kind="tiny", patch_size=5, pooling=pooling, channels=(8, 8, 8, 8), blocks=(), strides=(1, 1, 1, 1),
        representation=representation,
    )


# ---------------------------------------------------------------------------
# layer plan


@dataclass(frozen=True)
class Conv:
    name: str
    spec: ConvSpec
    bias: bool = False
    bn: bool = True


@dataclass(frozen=True)
class Block:
    name: str
    conv1: Conv
    conv2: Conv
    conv3: Conv
    downsample: Conv | None

    @property
    def crop(self) -> int:
        return (self.conv2.spec.kernel - 1) // 2


@dataclass(frozen=True)
class Plan:
    stem: tuple[Conv, ...]
    blocks: tuple[Block, ...] = ()
    feature_channels: int = 0
    head_pre_pool: bool = True

    def main_path(self) -> Iterator[Conv]:
        yield from self.stem
        for b in self.blocks:
            yield b.conv1
            yield b.conv2
            yield b.conv3

    def all_convs(self) -> Iterator[Conv]:
        yield from self.stem
        for b in self.blocks:
            yield b.conv1
            yield b.conv2
            yield b.conv3
            if b.downsample is not None:
                yield b.downsample


def _kernel3_blocks(q: int) -> set[tuple[int, int]]:
    # (layer index, block index) pairs that carry a 3x3 kernel
    return {(0, 0), (1, 0)} if q == 9 else {(0, 0)}


def layer_plan(config: ModelConfig) -> Plan:
    if config.kind == "tiny":
        c = config.channels
        kernels = (1, 3, 1, 3)
        convs = []
        cin = 3
        for i, (k, cout) in enumerate(zip(kernels, c)):
            convs.append(Conv(f"conv{i + 1}", ConvSpec(cin, cout, k, 1, "valid"), bias=True, bn=False))
            cin = cout
        return Plan(stem=tuple(convs), feature_channels=cin, head_pre_pool=False)

    stem_w = config.channels[0]
    stem = (
        Conv("stem.conv1", ConvSpec(3, stem_w, 1)),
        Conv("stem.conv2", ConvSpec(stem_w, stem_w, 3)),
    )
    k3 = _kernel3_blocks(config.patch_size)
    blocks = []
    cin = stem_w
    for li, (cout, nblocks, stride) in enumerate(zip(config.channels[1:], config.blocks, config.strides)):
        mid = cout // EXPANSION
        for bi in range(nblocks):
            k = 3 if (li, bi) in k3 else 1
            s = stride if bi == 0 else 1
            name = f"layer{li + 1}.{bi}"
            ds = None
            if bi == 0 and (s != 1 or cin != cout):
                ds = Conv(f"{name}.downsample", ConvSpec(cin, cout, 1, s))
            blocks.append(
                Block(
                    name,
                    Conv(f"{name}.conv1", ConvSpec(cin, mid, 1)),
                    Conv(f"{name}.conv2", ConvSpec(mid, mid, k, s)),
                    Conv(f"{name}.conv3", ConvSpec(mid, cout, 1)),
                    ds,
                )
            )
            cin = cout
    return Plan(stem=stem, blocks=tuple(blocks), feature_channels=cin, head_pre_pool=True)


# ---------------------------------------------------------------------------
# static analysis


@dataclass(frozen=True)
class Geometry:
    receptive_field: int
    stride: int
    offset: int


def geometry(config: ModelConfig) -> Geometry:
    """Receptive field, total stride and window offset of score-map cell 0."""
    r, j, off = 1, 1, 0
    for conv in layer_plan(config).main_path():
        s = conv.spec
        off -= s.pad * j
        r += (s.kernel - 1) * j
        j *= s.stride
    return Geometry(r, j, off)


def receptive_field(config: ModelConfig) -> int:
    return geometry(config).receptive_field


def receptive_field_of(specs) -> tuple[int, int]:
    """Recurrence over an arbitrary chain of ConvSpecs -> (field, jump)."""
    r, j = 1, 1
    for s in specs:
        r += (s.kernel - 1) * j
        j *= s.stride
    return r, j


def count_params(config: ModelConfig) -> int:
    """Trainable parameters (conv/affine weights and biases, BN scale and shift)."""
    plan = layer_plan(config)
    total = 0
    for conv in plan.all_convs():
        s = conv.spec
        total += s.out_channels * s.in_channels * s.kernel**2
        if conv.bias:
            total += s.out_channels
        if conv.bn:
            total += 2 * s.out_channels
    return total + plan.feature_channels + 1


def _walk_shapes(config: ModelConfig, hw: tuple[int, int]):
    """Yield (conv, input_hw, output_hw) for every convolution, in execution order."""
    plan = layer_plan(config)
    h, w = hw
    for conv in plan.stem:
        ho, wo = conv.spec.output_hw(h, w)
        yield conv, (h, w), (ho, wo)
        h, w = ho, wo
    for b in plan.blocks:
        yield b.conv1, (h, w), b.conv1.spec.output_hw(h, w)
        h2, w2 = b.conv2.spec.output_hw(h, w)
        yield b.conv2, (h, w), (h2, w2)
        yield b.conv3, (h2, w2), (h2, w2)
        if b.downsample is not None:
            ch, cw = h - 2 * b.crop, w - 2 * b.crop
            yield b.downsample, (ch, cw), b.downsample.spec.output_hw(ch, cw)
        h, w = h2, w2


def output_hw(config: ModelConfig, hw: tuple[int, int]) -> tuple[int, int]:
    h, w = hw
    plan = layer_plan(config)
    for conv in plan.main_path():
        h, w = conv.spec.output_hw(h, w)
    return h, w


def count_flops(config: ModelConfig, input_hw: tuple[int, int] = (224, 224), mac_factor: int = 1) -> int:
    """Multiply-accumulates over every conv position plus the affine head.

    ``mac_factor=1`` counts one MAC as one FLOP; pass 2 for the
    multiply-plus-add convention.
    """
    total = 0
    for conv, _, (ho, wo) in _walk_shapes(config, input_hw):
        s = conv.spec
        total += ho * wo * s.in_channels * s.out_channels * s.kernel**2
    plan = layer_plan(config)
    fh, fw = output_hw(config, input_hw)
    positions = fh * fw if plan.head_pre_pool else 1
    total += positions * plan.feature_channels
    return total * mac_factor


FLOP_CONVENTION = "FLOPs = multiply-accumulates (1 MAC = 1 FLOP) over conv positions and the affine head"


# ---------------------------------------------------------------------------
# weights


@dataclass
class ModelWeights:
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def expected(self, config: ModelConfig) -> tuple[dict[str, tuple], dict[str, tuple]]:
        return expected_shapes(config)

    def check(self, config: ModelConfig) -> None:
        pshapes, bshapes = expected_shapes(config)
        for table, have, kind in ((pshapes, self.params, "parameter"), (bshapes, self.buffers, "buffer")):
            missing = sorted(set(table) - set(have))
            extra = sorted(set(have) - set(table))
            if missing or extra:
                raise ConfigError(f"{kind}s do not match config: missing={missing[:5]} unexpected={extra[:5]}")
            for name, shape in table.items():
                got = have[name].shape
                if tuple(got) != tuple(shape):
                    raise ConfigError(f"{kind} {name}: shape {got} != expected {shape}")

    def numel(self) -> int:
        return sum(p.size for p in self.params.values())


def expected_shapes(config: ModelConfig) -> tuple[dict[str, tuple], dict[str, tuple]]:
    plan = layer_plan(config)
    params: dict[str, tuple] = {}
    buffers: dict[str, tuple] = {}
    for conv in plan.all_convs():
        s = conv.spec
        params[f"{conv.name}.weight"] = s.weight_shape
        if conv.bias:
            params[f"{conv.name}.bias"] = (s.out_channels,)
        if conv.bn:
            params[f"{conv.name}.bn.gamma"] = (s.out_channels,)
            params[f"{conv.name}.bn.beta"] = (s.out_channels,)
            buffers[f"{conv.name}.bn.running_mean"] = (s.out_channels,)
            buffers[f"{conv.name}.bn.running_var"] = (s.out_channels,)
    head = "head" if config.kind == "ladeda" else "fc"
    params[f"{head}.weight"] = (1, plan.feature_channels)
    params[f"{head}.bias"] = (1,)
    return params, buffers


def init_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """He-normal (fan-in) weights, zero biases, BN scale 1 / shift 0."""
    rng = np.random.default_rng(seed)
    pshapes, bshapes = expected_shapes(config)
    params = {}
    for name, shape in pshapes.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    buffers = {
        name: (np.ones(shape) if name.endswith("running_var") else np.zeros(shape)).astype(T.default_dtype())
        for name, shape in bshapes.items()
    }
    return ModelWeights(params, buffers)


# ---------------------------------------------------------------------------
# the model


class Model:
    """A built network: config + weights + forward pass."""

    def __init__(self, config: ModelConfig, weights: ModelWeights):
        weights.check(config)
        self.config = config
        self.weights = weights
        self.plan = layer_plan(config)
        self.geometry = geometry(config)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.weights.params

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self.weights.buffers

    @property
    def head_name(self) -> str:
        return "head" if self.config.kind == "ladeda" else "fc"

    def parameters(self) -> list[Tensor]:
        return list(self.weights.params.values())

    def zero_grad(self) -> None:
        for p in self.weights.params.values():
            p.grad = None

    def _conv(self, conv: Conv, x: Tensor, training: bool, act: bool) -> Tensor:
        p = self.weights.params
        y = T.conv2d(x, p[f"{conv.name}.weight"], p.get(f"{conv.name}.bias"), conv.spec)
        if conv.bn:
            b = self.weights.buffers
            y = T.batch_norm(
                y, p[f"{conv.name}.bn.gamma"], p[f"{conv.name}.bn.beta"],
                b[f"{conv.name}.bn.running_mean"], b[f"{conv.name}.bn.running_var"], training,
            )
        return T.relu(y) if act else y

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        """[B,3,H,W] -> [B,C,H',W'] per-position features."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ConfigError(f"expected a [B,3,H,W] batch, got {x.shape}")
        q = self.geometry.receptive_field
        if x.shape[2] < q or x.shape[3] < q:
            raise ConfigError(f"input {x.shape[2]}x{x.shape[3]} smaller than the {q}x{q} receptive field")
        for conv in self.plan.stem:
            x = self._conv(conv, x, training, act=True)
        for b in self.plan.blocks:
            out = self._conv(b.conv1, x, training, act=True)
            out = self._conv(b.conv2, out, training, act=True)
            out = self._conv(b.conv3, out, training, act=False)
            res = x
            if b.crop:
                _, _, h, w = x.shape
                res = T.crop2d(x, b.crop, b.crop, h - 2 * b.crop, w - 2 * b.crop)
            if b.downsample is not None:
                res = self._conv(b.downsample, res, training, act=False)
            x = T.relu(out + res)
        return x

    def _head_as_conv(self) -> tuple[Tensor, Tensor, ConvSpec]:
        w = self.weights.params[f"{self.head_name}.weight"]
        c = self.plan.feature_channels
        return T.reshape(w, (1, c, 1, 1)), self.weights.params[f"{self.head_name}.bias"], ConvSpec(c, 1, 1)

    def score_map(self, x: Tensor, training: bool = False) -> Tensor:
        """[B,3,H,W] -> [B,1,H',W'] patch logits (affine head applied per position)."""
        w, b, spec = self._head_as_conv()
        return T.conv2d(self.features(x, training), w, b, spec)

    def forward(self, x: Tensor, training: bool = False, pooling: str | None = None) -> Tensor:
        """Image-level logits [B]."""
        pooling = pooling or self.config.pooling
        B = x.shape[0]
        if self.config.kind == "tiny" and pooling == "average":
            # pool the features first, then the affine head (commutes with the per-position order)
            feats = T.global_avg_pool(self.features(x, training))
            p = self.weights.params
            return T.reshape(T.linear(feats, p["fc.weight"], p["fc.bias"]), (B,))
        smap = self.score_map(x, training)
        pooled = T.global_avg_pool(smap) if pooling == "average" else T.global_max_pool(smap)
        return T.reshape(pooled, (B,))

    __call__ = forward

    def copy_weights(self) -> ModelWeights:
        return ModelWeights(
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.weights.params.items()},
            {k: v.copy() for k, v in self.weights.buffers.items()},
        )

    def load_weights(self, weights: ModelWeights) -> None:
        weights.check(self.config)
        self.weights = weights

    def astype(self, precision: str) -> "Model":
        dt = {"float32": np.float32, "float64": np.float64}[precision]
        params = {k: Tensor.wrap(v.data.astype(dt), True, k) for k, v in self.weights.params.items()}
        return Model(self.config, ModelWeights(params, {k: v.astype(dt) for k, v in self.weights.buffers.items()}))

    def records(self) -> dict[str, np.ndarray | str]:
        out: dict[str, np.ndarray | str] = {"__config__": self.config.to_text()}
        out.update({k: v.data for k, v in self.weights.params.items()})
        out.update(self.weights.buffers)
        return out

    def save(self, path: str | Path) -> None:
        container.save(path, self.records())


def load_model(path: str | Path) -> Model:
    recs = container.load(path)
    if "__config__" not in recs:
        raise ConfigError(f"{path}: model file has no config header")
    config = ModelConfig.from_text(container.record_text(recs.pop("__config__")))
    pshapes, bshapes = expected_shapes(config)
    params = {}
    buffers = {}
    for name, arr in recs.items():
        if name in pshapes:
            params[name] = Tensor.wrap(arr, True, name)
        else:
            buffers[name] = arr
    return Model(config, ModelWeights(params, buffers))


def build_ladeda(config: ModelConfig | None = None, seed: int = 0) -> Model:
    config = config or ladeda_config()
    if config.kind != "ladeda":
        raise ConfigError("build_ladeda needs a ladeda config")
    return Model(config, init_weights(config, seed))


def build_tiny(config: ModelConfig | None = None, seed: int = 0) -> Model:
    config = config or tiny_config()
    if config.kind != "tiny":
        raise ConfigError("build_tiny needs a tiny config")
    return Model(config, init_weights(config, seed))


def build(config: ModelConfig, seed: int = 0) -> Model:
    return build_ladeda(config, seed) if config.kind == "ladeda" else build_tiny(config, seed)
