"""Forward-only energy-flow video autoencoder.

The encoder consumes the level-1 wavelet subband stack of the input video and
injects the level-2/level-3 stacks into the backbone right after each
downsampling stage (channel-remapped to ``c_flow`` channels and concatenated).
The decoder mirrors this: it taps ``c_flow`` channels off the backbone before
each upsampling stage, predicts the level-3 and level-2 subband sets, and
recombines them additively into the low-pass chain::

    s2_hhh = idwt2d(w3_hat) + outflow2_hhh
    s1_hhh = idwt3d(w2_hat) + outflow1_hhh

so low-frequency content travels to and from the latent along a short linear
path. The final video is the inverse 3D transform of the predicted level-1
set.

Every temporal operation in the graph is causal, so both encode and decode
run either directly or in temporal chunks with identical results; see
:mod:`wfcodec.causal` for the caching machinery.

Inputs require time = 4k + 1 (a first frame plus groups of four), height and
width divisible by 8. The latent then has shape
(latent_channels, (t - 1) / 4 + 1, h / 8, w / 8).
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .causal import (
    CacheState,
    ChunkPlan,
    ConvSpec,
    _conv3d_core,
    _frame_layernorm_core,
    _groupnorm_core,
    _stream_conv_core,
    _temporal_pad,
    _upsample_core,
    _UpsampleStream,
    silu,
)
from .errors import FormatError, ParameterError, ShapeError, WeightError
from .tensor import Rng, VideoTensor
from .wavelet import (
    KEYS_2D,
    KEYS_3D,
    Dwt3dStream,
    Idwt3dStream,
    SubbandSet2D,
    SubbandSet3D,
    _analyze_axis,
    _synthesize_axis,
    build_pyramid,
    idwt3d,
)

PRESET_BASE_CHANNELS = {"wfvae-s": 128, "wfvae-m": 160, "wfvae-l": 192}

LATENT_CHANNEL_CHOICES = (4, 8, 16, 32)

NORM_FRAME_LAYERNORM = "frame_layernorm"
NORM_GROUPNORM = "groupnorm"


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the forward graph.

    Stage widths grow by one base-channel width per downsampling layer:
    (bc, 2*bc, 3*bc). ``norm`` selects per-frame layer normalization
    (stream-safe, the default) or whole-clip group normalization (the
    documented negative control for chunked inference).
    """

    base_channels: int = 128
    c_flow: int = 128
    latent_channels: int = 4
    input_channels: int = 3
    blocks_per_stage: int = 2
    activation: str = "silu"
    norm: str = NORM_FRAME_LAYERNORM
    groupnorm_groups: int = 8
    eps: float = 1e-5

    def __post_init__(self):
        if self.base_channels < 1 or self.c_flow < 1 or self.input_channels < 1:
            raise ParameterError("channel counts must be >= 1")
        if self.latent_channels not in LATENT_CHANNEL_CHOICES:
            raise ParameterError(
                f"latent_channels must be one of {LATENT_CHANNEL_CHOICES}"
            )
        if self.blocks_per_stage < 1:
            raise ParameterError("blocks_per_stage must be >= 1")
        if self.activation != "silu":
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.norm not in (NORM_FRAME_LAYERNORM, NORM_GROUPNORM):
            raise ParameterError(f"unknown norm kind {self.norm!r}")
        if self.c_flow > 2 * self.base_channels:
            raise ParameterError(
                "c_flow cannot exceed twice base_channels (decoder tap width)"
            )
        if self.eps <= 0:
            raise ParameterError("eps must be > 0")
        if self.norm == NORM_GROUPNORM:
            for width in self._normed_widths():
                if width % self.groupnorm_groups:
                    raise ParameterError(
                        f"groupnorm_groups ({self.groupnorm_groups}) must divide "
                        f"every normalized width, including {width}"
                    )

    @property
    def stage_widths(self) -> tuple[int, int, int]:
        bc = self.base_channels
        return (bc, 2 * bc, 3 * bc)

    def _normed_widths(self):
        w0, w1, w2 = self.stage_widths
        return sorted({w0, w1, w2, w1 + self.c_flow, w2 + self.c_flow})

    def latent_time(self, t: int) -> int:
        return (t - 1) // 4 + 1


def preset_config(name: str, latent_channels: int = 4, **overrides) -> ModelConfig:
    """Named configuration; presets differ only in base width."""
    if name not in PRESET_BASE_CHANNELS:
        raise ParameterError(
            f"unknown preset {name!r}; choose from {sorted(PRESET_BASE_CHANNELS)}"
        )
    return ModelConfig(
        base_channels=PRESET_BASE_CHANNELS[name],
        latent_channels=latent_channels,
        **overrides,
    )


# ---------------------------------------------------------------------------
# Weight container and its file format.
#
# Weight file ("WFWT", extension .wfwt), little-endian:
#   magic "WFWT", version u32=1, entry count u32, then per entry (sorted by
#   name): name length u16, UTF-8 name, ndim u32, dims u32[ndim], f32 payload.
# ---------------------------------------------------------------------------

_WEIGHT_MAGIC = b"WFWT"
_WEIGHT_VERSION = 1


class WeightStore:
    """Named float32 tensors (rank 1..5) for every graph parameter."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        if tensors:
            for name, arr in tensors.items():
                self.put(name, arr)

    def put(self, name: str, arr) -> None:
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
        if not 1 <= arr.ndim <= 5:
            raise ParameterError(f"{name}: rank must be 1..5, got {arr.ndim}")
        self._tensors[name] = arr

    def get(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise WeightError(f"missing parameter {name!r}") from None

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        return ((name, self._tensors[name]) for name in self.names())

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def _serialized(self):
        yield _WEIGHT_MAGIC
        yield struct.pack("<II", _WEIGHT_VERSION, len(self._tensors))
        for name, arr in self.items():
            encoded = name.encode("utf-8")
            yield struct.pack("<H", len(encoded))
            yield encoded
            yield struct.pack("<I", arr.ndim)
            yield struct.pack(f"<{arr.ndim}I", *arr.shape)
            yield arr.tobytes()

    def digest(self) -> str:
        hasher = hashlib.sha256()
        for blob in self._serialized():
            hasher.update(blob)
        return hasher.hexdigest()

    def save(self, path) -> None:
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "wb") as fh:
            for blob in self._serialized():
                fh.write(blob)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "WeightStore":
        with open(path, "rb") as fh:
            raw = fh.read()
        view = memoryview(raw)
        if len(raw) < 12 or view[:4] != _WEIGHT_MAGIC:
            raise FormatError(f"{path}: not a weight file")
        version, count = struct.unpack_from("<II", raw, 4)
        if version != _WEIGHT_VERSION:
            raise FormatError(f"{path}: unsupported weight version {version}")
        offset = 12
        store = cls()
        for _ in range(count):
            try:
                (name_len,) = struct.unpack_from("<H", raw, offset)
                offset += 2
                name = bytes(view[offset : offset + name_len]).decode("utf-8")
                offset += name_len
                (ndim,) = struct.unpack_from("<I", raw, offset)
                offset += 4
                if not 1 <= ndim <= 5:
                    raise FormatError(f"{path}: bad rank {ndim} for {name!r}")
                dims = struct.unpack_from(f"<{ndim}I", raw, offset)
                offset += 4 * ndim
                size = int(np.prod(dims, dtype=np.int64))
                end = offset + 4 * size
                if end > len(raw):
                    raise FormatError(f"{path}: truncated payload for {name!r}")
                arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
                offset = end
            except struct.error as exc:
                raise FormatError(f"{path}: truncated entry table") from exc
            store.put(name, arr.reshape(dims))
        if offset != len(raw):
            raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
        return store

    def validate(self, config: ModelConfig) -> None:
        """Check that exactly the parameters of ``config`` are present."""
        expected = dict(parameter_manifest(config))
        for name, shape in expected.items():
            if name not in self._tensors:
                raise WeightError(f"missing parameter {name!r}")
            actual = self._tensors[name].shape
            if tuple(actual) != tuple(shape):
                raise WeightError(
                    f"parameter {name!r} has shape {actual}, config expects {shape}"
                )
        extras = set(self._tensors) - set(expected)
        if extras:
            raise WeightError(f"unexpected parameters: {sorted(extras)[:4]}")


# ---------------------------------------------------------------------------
# Graph definition shared by the manifest, direct execution, and streaming.
# ---------------------------------------------------------------------------


def _conv_spec(cin: int, cout: int, kernel=(3, 3, 3), stride=(1, 1, 1)) -> ConvSpec:
    ph, pw = (kernel[1] - 1) // 2, (kernel[2] - 1) // 2
    return ConvSpec(cin, cout, tuple(kernel), tuple(stride), (ph, pw))


@dataclass(frozen=True)
class _BlockDef:
    prefix: str
    cin: int
    cout: int

    @property
    def has_skip(self) -> bool:
        return self.cin != self.cout

    @property
    def conv1(self) -> ConvSpec:
        return _conv_spec(self.cin, self.cout)

    @property
    def conv2(self) -> ConvSpec:
        return _conv_spec(self.cout, self.cout)

    @property
    def skip(self) -> ConvSpec:
        return _conv_spec(self.cin, self.cout, kernel=(1, 1, 1))


def _stage(prefix: str, cin: int, cout: int, blocks: int) -> tuple[_BlockDef, ...]:
    defs = [_BlockDef(f"{prefix}.block0", cin, cout)]
    defs += [_BlockDef(f"{prefix}.block{i}", cout, cout) for i in range(1, blocks)]
    return tuple(defs)


@dataclass(frozen=True)
class _GraphDef:
    stem: ConvSpec
    stage1: tuple[_BlockDef, ...]
    down1: ConvSpec
    inflow2: ConvSpec
    stage2: tuple[_BlockDef, ...]
    down2: ConvSpec
    inflow3: ConvSpec
    stage3: tuple[_BlockDef, ...]
    head_norm: int
    head_conv: ConvSpec
    dec_stem: ConvSpec
    dstage3: tuple[_BlockDef, ...]
    outflow3: ConvSpec
    up2: ConvSpec
    dstage2: tuple[_BlockDef, ...]
    outflow2: ConvSpec
    up1: ConvSpec
    dstage1: tuple[_BlockDef, ...]
    out_norm: int
    out_conv: ConvSpec


def _build_graph(config: ModelConfig) -> _GraphDef:
    w0, w1, w2 = config.stage_widths
    blocks = config.blocks_per_stage
    l1_stack = 8 * config.input_channels
    l2_stack = 8 * config.input_channels
    l3_stack = 4 * config.input_channels
    cf = config.c_flow
    return _GraphDef(
        stem=_conv_spec(l1_stack, w0),
        stage1=_stage("enc.stage1", w0, w0, blocks),
        down1=_conv_spec(w0, w1, stride=(2, 2, 2)),
        inflow2=_conv_spec(l2_stack, cf, kernel=(1, 1, 1)),
        stage2=_stage("enc.stage2", w1 + cf, w1, blocks),
        down2=_conv_spec(w1, w2, stride=(1, 2, 2)),
        inflow3=_conv_spec(l3_stack, cf, kernel=(1, 1, 1)),
        stage3=_stage("enc.stage3", w2 + cf, w2, blocks),
        head_norm=w2,
        head_conv=_conv_spec(w2, 2 * config.latent_channels),
        dec_stem=_conv_spec(config.latent_channels, w2),
        dstage3=_stage("dec.stage3", w2, w2, blocks),
        outflow3=_conv_spec(cf, l3_stack, kernel=(1, 1, 1)),
        up2=_conv_spec(w2, w1),
        dstage2=_stage("dec.stage2", w1, w1, blocks),
        outflow2=_conv_spec(cf, l2_stack, kernel=(1, 1, 1)),
        up1=_conv_spec(w1, w0),
        dstage1=_stage("dec.stage1", w0, w0, blocks),
        out_norm=w0,
        out_conv=_conv_spec(w0, l1_stack),
    )


def _block_params(block: _BlockDef):
    yield f"{block.prefix}.norm1.gain", (block.cin,)
    yield f"{block.prefix}.norm1.bias", (block.cin,)
    yield f"{block.prefix}.conv1.weight", block.conv1.weight_shape()
    yield f"{block.prefix}.conv1.bias", (block.cout,)
    yield f"{block.prefix}.norm2.gain", (block.cout,)
    yield f"{block.prefix}.norm2.bias", (block.cout,)
    yield f"{block.prefix}.conv2.weight", block.conv2.weight_shape()
    yield f"{block.prefix}.conv2.bias", (block.cout,)
    if block.has_skip:
        yield f"{block.prefix}.skip.weight", block.skip.weight_shape()
        yield f"{block.prefix}.skip.bias", (block.cout,)


def parameter_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every graph parameter with its shape, in deterministic graph order."""
    graph = _build_graph(config)
    entries: list[tuple[str, tuple[int, ...]]] = []

    def conv(name: str, spec: ConvSpec):
        entries.append((f"{name}.weight", spec.weight_shape()))
        entries.append((f"{name}.bias", (spec.out_channels,)))

    def norm(name: str, channels: int):
        entries.append((f"{name}.gain", (channels,)))
        entries.append((f"{name}.bias", (channels,)))

    conv("enc.stem", graph.stem)
    for block in graph.stage1:
        entries.extend(_block_params(block))
    conv("enc.down1", graph.down1)
    conv("enc.inflow2", graph.inflow2)
    for block in graph.stage2:
        entries.extend(_block_params(block))
    conv("enc.down2", graph.down2)
    conv("enc.inflow3", graph.inflow3)
    for block in graph.stage3:
        entries.extend(_block_params(block))
    norm("enc.head.norm", graph.head_norm)
    conv("enc.head.conv", graph.head_conv)
    conv("dec.stem", graph.dec_stem)
    for block in graph.dstage3:
        entries.extend(_block_params(block))
    conv("dec.outflow3", graph.outflow3)
    conv("dec.up2", graph.up2)
    for block in graph.dstage2:
        entries.extend(_block_params(block))
    conv("dec.outflow2", graph.outflow2)
    conv("dec.up1", graph.up1)
    for block in graph.dstage1:
        entries.extend(_block_params(block))
    norm("dec.out.norm", graph.out_norm)
    conv("dec.out.conv", graph.out_conv)
    return entries


def init_weights(config: ModelConfig, rng: Rng) -> WeightStore:
    """Deterministic seeded initialization.

    Convolution weights are normal with std 1/sqrt(fan_in); all biases start
    at zero and all normalization gains at one.
    """
    store = WeightStore()
    for name, shape in parameter_manifest(config):
        if name.endswith(".gain"):
            store.put(name, np.ones(shape, dtype=np.float32))
        elif name.endswith(".bias"):
            store.put(name, np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[1:], dtype=np.int64))
            store.put(name, rng.normal(shape, std=1.0 / math.sqrt(fan_in)))
    return store


# ---------------------------------------------------------------------------
# Latent container.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianLatent:
    """Per-element posterior mean and log-variance."""

    mean: VideoTensor
    logvar: VideoTensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError(
                f"mean/logvar shapes differ: {self.mean.shape} vs "
                f"{self.logvar.shape}"
            )

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.mean.shape


def sample_latent(latent: GaussianLatent, rng: Rng) -> VideoTensor:
    """Reparameterized draw z = mean + exp(logvar / 2) * eps."""
    eps = rng.normal(latent.shape)
    z = latent.mean.data + np.exp(latent.logvar.data * np.float32(0.5)) * eps
    return VideoTensor(z)


@dataclass(frozen=True)
class EncodeResult:
    latent: GaussianLatent
    w2: SubbandSet3D
    w3: SubbandSet2D


@dataclass(frozen=True)
class DecodeResult:
    video: VideoTensor
    w2_hat: SubbandSet3D
    w3_hat: SubbandSet2D


@dataclass(frozen=True)
class ForwardResult:
    reconstruction: VideoTensor
    latent: GaussianLatent
    w2_hat: SubbandSet3D
    w3_hat: SubbandSet2D
    w2: SubbandSet3D
    w3: SubbandSet2D


# ---------------------------------------------------------------------------
# Execution helpers shared by direct and streaming paths.
# ---------------------------------------------------------------------------


class _Params:
    def __init__(self, config: ModelConfig, weights: WeightStore):
        self.config = config
        self.weights = weights

    def conv(self, name: str):
        return self.weights.get(f"{name}.weight"), self.weights.get(f"{name}.bias")

    def norm(self, name: str):
        return self.weights.get(f"{name}.gain"), self.weights.get(f"{name}.bias")

    def normalize(self, frames: np.ndarray, name: str) -> np.ndarray:
        gain, bias = self.norm(name)
        if self.config.norm == NORM_FRAME_LAYERNORM:
            return _frame_layernorm_core(frames, gain, bias, self.config.eps)
        return _groupnorm_core(
            frames, self.config.groupnorm_groups, gain, bias, self.config.eps
        )


def _conv_direct(frames: np.ndarray, spec: ConvSpec, weight, bias) -> np.ndarray:
    return _conv3d_core(_temporal_pad(frames, spec), weight, bias, spec)


def _conv_frames(frames: np.ndarray, spec: ConvSpec, weight, bias) -> np.ndarray:
    """kernel-1 temporal convs are per-frame; no padding, no state."""
    return _conv3d_core(frames, weight, bias, spec)


def _block_direct(frames: np.ndarray, block: _BlockDef, params: _Params) -> np.ndarray:
    h = params.normalize(frames, f"{block.prefix}.norm1")
    h = silu(h)
    h = _conv_direct(h, block.conv1, *params.conv(f"{block.prefix}.conv1"))
    h = params.normalize(h, f"{block.prefix}.norm2")
    h = silu(h)
    h = _conv_direct(h, block.conv2, *params.conv(f"{block.prefix}.conv2"))
    if block.has_skip:
        skip = _conv_frames(frames, block.skip, *params.conv(f"{block.prefix}.skip"))
    else:
        skip = frames
    return skip + h


def _dwt2d_bands(frames: np.ndarray) -> dict[str, np.ndarray]:
    a_h, d_h = _analyze_axis(frames, axis=2)
    bands = {}
    for hkey, harr in (("h", a_h), ("g", d_h)):
        a_w, d_w = _analyze_axis(harr, axis=3)
        bands[hkey + "h"] = a_w
        bands[hkey + "g"] = d_w
    return bands


def _idwt2d_bands(bands: dict[str, np.ndarray]) -> np.ndarray:
    rows = {
        hkey: _synthesize_axis(bands[hkey + "h"], bands[hkey + "g"], axis=3)
        for hkey in "hg"
    }
    return _synthesize_axis(rows["h"], rows["g"], axis=2)


def _split_bands(stack: np.ndarray, keys) -> dict[str, np.ndarray]:
    c = stack.shape[0] // len(keys)
    return {key: stack[i * c : (i + 1) * c] for i, key in enumerate(keys)}


def _validate_encode_input(v: VideoTensor, config: ModelConfig):
    if v.channels != config.input_channels:
        raise ShapeError(
            f"input has {v.channels} channels, config expects "
            f"{config.input_channels}"
        )
    if v.height % 8 or v.width % 8:
        raise ShapeError(
            f"height and width must be divisible by 8, got "
            f"({v.height}, {v.width})"
        )
    if v.time % 4 != 1:
        raise ShapeError(f"time must be 4k+1, got {v.time}")


# ---------------------------------------------------------------------------
# Direct paths.
# ---------------------------------------------------------------------------


def _encode_direct(v: VideoTensor, config: ModelConfig, params: _Params):
    graph = _build_graph(config)
    pyramid = build_pyramid(v)
    x = pyramid.level1.stack()
    x = _conv_direct(x, graph.stem, *params.conv("enc.stem"))
    for block in graph.stage1:
        x = _block_direct(x, block, params)
    x = _conv_direct(x, graph.down1, *params.conv("enc.down1"))
    f2 = silu(
        _conv_frames(pyramid.level2.stack(), graph.inflow2, *params.conv("enc.inflow2"))
    )
    x = np.concatenate([x, f2], axis=0)
    for block in graph.stage2:
        x = _block_direct(x, block, params)
    x = _conv_direct(x, graph.down2, *params.conv("enc.down2"))
    f3 = silu(
        _conv_frames(pyramid.level3.stack(), graph.inflow3, *params.conv("enc.inflow3"))
    )
    x = np.concatenate([x, f3], axis=0)
    for block in graph.stage3:
        x = _block_direct(x, block, params)
    x = params.normalize(x, "enc.head.norm")
    x = silu(x)
    x = _conv_direct(x, graph.head_conv, *params.conv("enc.head.conv"))
    chn = config.latent_channels
    latent = GaussianLatent(VideoTensor(x[:chn]), VideoTensor(x[chn:]))
    return EncodeResult(latent, pyramid.level2, pyramid.level3)


def _decode_direct(
    z: VideoTensor, config: ModelConfig, params: _Params, original_t: int
):
    graph = _build_graph(config)
    cf = config.c_flow
    x = _conv_direct(z.data, graph.dec_stem, *params.conv("dec.stem"))
    for block in graph.dstage3:
        x = _block_direct(x, block, params)
    w3_stack = _conv_frames(
        silu(x[:cf]), graph.outflow3, *params.conv("dec.outflow3")
    )
    w3_bands = _split_bands(w3_stack, KEYS_2D)
    x = _upsample_core(x, (1, 2, 2), first_chunk=True)
    x = _conv_direct(x, graph.up2, *params.conv("dec.up2"))
    for block in graph.dstage2:
        x = _block_direct(x, block, params)
    w2_stack = _conv_frames(
        silu(x[:cf]), graph.outflow2, *params.conv("dec.outflow2")
    )
    w2_bands = _split_bands(w2_stack, KEYS_3D)
    w2_bands["hhh"] = w2_bands["hhh"] + _idwt2d_bands(w3_bands)
    x = _upsample_core(x, (2, 2, 2), first_chunk=True)
    x = _conv_direct(x, graph.up1, *params.conv("dec.up1"))
    for block in graph.dstage1:
        x = _block_direct(x, block, params)
    x = params.normalize(x, "dec.out.norm")
    x = silu(x)
    x = _conv_direct(x, graph.out_conv, *params.conv("dec.out.conv"))
    w1_bands = _split_bands(x, KEYS_3D)
    t1 = x.shape[1]
    w2_hat = SubbandSet3D({k: VideoTensor(w2_bands[k]) for k in KEYS_3D})
    w3_hat = SubbandSet2D({k: VideoTensor(w3_bands[k]) for k in KEYS_2D})
    contrib = idwt3d(w2_hat, original_t=t1)
    w1_bands["hhh"] = w1_bands["hhh"] + contrib.data
    w1_set = SubbandSet3D({k: VideoTensor(w1_bands[k]) for k in KEYS_3D})
    video = idwt3d(w1_set, original_t=original_t)
    return DecodeResult(video, w2_hat, w3_hat)


# ---------------------------------------------------------------------------
# Streaming paths.
# ---------------------------------------------------------------------------


class _StreamConv:
    def __init__(self, spec: ConvSpec, weight, bias):
        self.spec = spec
        self.weight = weight
        self.bias = bias
        self.state = CacheState()

    def feed(self, frames: np.ndarray) -> np.ndarray:
        out, self.state = _stream_conv_core(
            self.state, frames, self.spec, self.weight, self.bias
        )
        return out


class _StreamBlock:
    def __init__(self, block: _BlockDef, params: _Params):
        self.block = block
        self.params = params
        self.conv1 = _StreamConv(block.conv1, *params.conv(f"{block.prefix}.conv1"))
        self.conv2 = _StreamConv(block.conv2, *params.conv(f"{block.prefix}.conv2"))
        self.skip_params = (
            params.conv(f"{block.prefix}.skip") if block.has_skip else None
        )

    def feed(self, frames: np.ndarray) -> np.ndarray:
        block, params = self.block, self.params
        h = params.normalize(frames, f"{block.prefix}.norm1")
        h = silu(h)
        h = self.conv1.feed(h)
        h = params.normalize(h, f"{block.prefix}.norm2")
        h = silu(h)
        h = self.conv2.feed(h)
        if self.skip_params is not None:
            skip = _conv_frames(frames, block.skip, *self.skip_params)
        else:
            skip = frames
        return skip + h


class _EncoderStream:
    """Chunk-by-chunk encoder; emissions align across branches at every rate."""

    def __init__(self, config: ModelConfig, params: _Params):
        graph = _build_graph(config)
        self.config = config
        self.params = params
        self.graph = graph
        self.wave1 = Dwt3dStream(pad_first=True)
        self.wave2 = Dwt3dStream(pad_first=True)
        self.stem = _StreamConv(graph.stem, *params.conv("enc.stem"))
        self.stage1 = [_StreamBlock(b, params) for b in graph.stage1]
        self.down1 = _StreamConv(graph.down1, *params.conv("enc.down1"))
        self.stage2 = [_StreamBlock(b, params) for b in graph.stage2]
        self.down2 = _StreamConv(graph.down2, *params.conv("enc.down2"))
        self.stage3 = [_StreamBlock(b, params) for b in graph.stage3]
        self.head = _StreamConv(graph.head_conv, *params.conv("enc.head.conv"))

    def feed(self, frames: np.ndarray):
        params, graph = self.params, self.graph
        w1 = self.wave1.feed(frames)
        w2 = self.wave2.feed(w1["hhh"])
        w3 = _dwt2d_bands(w2["hhh"])
        x = np.concatenate([w1[k] for k in KEYS_3D], axis=0)
        x = self.stem.feed(x)
        for block in self.stage1:
            x = block.feed(x)
        x = self.down1.feed(x)
        f2 = silu(
            _conv_frames(
                np.concatenate([w2[k] for k in KEYS_3D], axis=0),
                graph.inflow2,
                *params.conv("enc.inflow2"),
            )
        )
        if x.shape[1] != f2.shape[1]:
            raise ShapeError(
                f"backbone/wavelet rate mismatch at level 2: "
                f"{x.shape[1]} vs {f2.shape[1]} frames"
            )
        x = np.concatenate([x, f2], axis=0)
        for block in self.stage2:
            x = block.feed(x)
        x = self.down2.feed(x)
        f3 = silu(
            _conv_frames(
                np.concatenate([w3[k] for k in KEYS_2D], axis=0),
                graph.inflow3,
                *params.conv("enc.inflow3"),
            )
        )
        if x.shape[1] != f3.shape[1]:
            raise ShapeError(
                f"backbone/wavelet rate mismatch at level 3: "
                f"{x.shape[1]} vs {f3.shape[1]} frames"
            )
        x = np.concatenate([x, f3], axis=0)
        for block in self.stage3:
            x = block.feed(x)
        x = params.normalize(x, "enc.head.norm")
        x = silu(x)
        x = self.head.feed(x)
        chn = self.config.latent_channels
        return x[:chn], x[chn:], w2, w3


class _DecoderStream:
    def __init__(self, config: ModelConfig, params: _Params):
        graph = _build_graph(config)
        self.config = config
        self.params = params
        self.graph = graph
        self.stem = _StreamConv(graph.dec_stem, *params.conv("dec.stem"))
        self.dstage3 = [_StreamBlock(b, params) for b in graph.dstage3]
        self.up2_resample = _UpsampleStream((1, 2, 2))
        self.up2 = _StreamConv(graph.up2, *params.conv("dec.up2"))
        self.dstage2 = [_StreamBlock(b, params) for b in graph.dstage2]
        self.up1_resample = _UpsampleStream((2, 2, 2))
        self.up1 = _StreamConv(graph.up1, *params.conv("dec.up1"))
        self.dstage1 = [_StreamBlock(b, params) for b in graph.dstage1]
        self.out = _StreamConv(graph.out_conv, *params.conv("dec.out.conv"))
        self.idwt_w2 = Idwt3dStream(drop_first=True)
        self.idwt_final = Idwt3dStream(drop_first=True)

    def feed(self, z_frames: np.ndarray):
        params, graph = self.params, self.graph
        cf = self.config.c_flow
        x = self.stem.feed(z_frames)
        for block in self.dstage3:
            x = block.feed(x)
        w3_stack = _conv_frames(
            silu(x[:cf]), graph.outflow3, *params.conv("dec.outflow3")
        )
        w3_bands = _split_bands(w3_stack, KEYS_2D)
        x = self.up2_resample.feed(x)
        x = self.up2.feed(x)
        for block in self.dstage2:
            x = block.feed(x)
        w2_stack = _conv_frames(
            silu(x[:cf]), graph.outflow2, *params.conv("dec.outflow2")
        )
        w2_bands = _split_bands(w2_stack, KEYS_3D)
        w2_bands["hhh"] = w2_bands["hhh"] + _idwt2d_bands(w3_bands)
        contrib = self.idwt_w2.feed(w2_bands)
        x = self.up1_resample.feed(x)
        x = self.up1.feed(x)
        for block in self.dstage1:
            x = block.feed(x)
        x = params.normalize(x, "dec.out.norm")
        x = silu(x)
        x = self.out.feed(x)
        w1_bands = _split_bands(x, KEYS_3D)
        if w1_bands["hhh"].shape[1] != contrib.shape[1]:
            raise ShapeError(
                f"backbone/wavelet rate mismatch at level 1: "
                f"{w1_bands['hhh'].shape[1]} vs {contrib.shape[1]} frames"
            )
        w1_bands["hhh"] = w1_bands["hhh"] + contrib
        video = self.idwt_final.feed(w1_bands)
        return video, w2_bands, w3_bands


def _concat_bands(chunks: list[dict[str, np.ndarray]], keys) -> dict[str, np.ndarray]:
    return {
        key: np.concatenate([chunk[key] for chunk in chunks], axis=1) for key in keys
    }


# ---------------------------------------------------------------------------
# Public entry points.
# ---------------------------------------------------------------------------


def encode(
    v: VideoTensor,
    config: ModelConfig,
    weights: WeightStore,
    mode: ChunkPlan | None = None,
) -> EncodeResult:
    """Encode a video into a Gaussian latent plus its level-2/3 subband echo."""
    mode = mode or ChunkPlan.direct()
    _validate_encode_input(v, config)
    weights.validate(config)
    params = _Params(config, weights)
    if not mode.is_streaming:
        result = _encode_direct(v, config, params)
    else:
        stream = _EncoderStream(config, params)
        mean_parts, logvar_parts, w2_parts, w3_parts = [], [], [], []
        start = 0
        for size in mode.split(v.time):
            mean_c, logvar_c, w2_c, w3_c = stream.feed(
                v.data[:, start : start + size]
            )
            start += size
            mean_parts.append(mean_c)
            logvar_parts.append(logvar_c)
            w2_parts.append(w2_c)
            w3_parts.append(w3_c)
        latent = GaussianLatent(
            VideoTensor(np.concatenate(mean_parts, axis=1)),
            VideoTensor(np.concatenate(logvar_parts, axis=1)),
        )
        w2 = SubbandSet3D(_concat_bands(w2_parts, KEYS_3D))
        w3 = SubbandSet2D(_concat_bands(w3_parts, KEYS_2D))
        result = EncodeResult(latent, w2, w3)
    expected_t = config.latent_time(v.time)
    if result.latent.shape[1] != expected_t:
        raise ShapeError(
            f"latent has {result.latent.shape[1]} frames, expected {expected_t}"
        )
    return result


def encode_streamed_chunks(
    v: VideoTensor, config: ModelConfig, weights: WeightStore, mode: ChunkPlan
) -> tuple[EncodeResult, list[int]]:
    """Streamed encode that also reports the latent chunk sizes it emitted.

    Useful for chaining a streamed decode with matching chunk boundaries.
    """
    if not mode.is_streaming:
        raise ParameterError("encode_streamed_chunks requires a streaming plan")
    _validate_encode_input(v, config)
    weights.validate(config)
    params = _Params(config, weights)
    stream = _EncoderStream(config, params)
    mean_parts, logvar_parts, w2_parts, w3_parts, sizes = [], [], [], [], []
    start = 0
    for size in mode.split(v.time):
        mean_c, logvar_c, w2_c, w3_c = stream.feed(v.data[:, start : start + size])
        start += size
        sizes.append(mean_c.shape[1])
        mean_parts.append(mean_c)
        logvar_parts.append(logvar_c)
        w2_parts.append(w2_c)
        w3_parts.append(w3_c)
    latent = GaussianLatent(
        VideoTensor(np.concatenate(mean_parts, axis=1)),
        VideoTensor(np.concatenate(logvar_parts, axis=1)),
    )
    result = EncodeResult(
        latent,
        SubbandSet3D(_concat_bands(w2_parts, KEYS_3D)),
        SubbandSet2D(_concat_bands(w3_parts, KEYS_2D)),
    )
    return result, sizes


def decode(
    z: VideoTensor,
    config: ModelConfig,
    weights: WeightStore,
    original_t: int,
    mode: ChunkPlan | None = None,
) -> DecodeResult:
    """Decode a latent back to video; also returns the predicted subband sets."""
    mode = mode or ChunkPlan.direct()
    if original_t < 1 or original_t % 4 != 1:
        raise ShapeError(f"original_t must be 4k+1, got {original_t}")
    if z.channels != config.latent_channels:
        raise ShapeError(
            f"latent has {z.channels} channels, config expects "
            f"{config.latent_channels}"
        )
    expected_t = config.latent_time(original_t)
    if z.time != expected_t:
        raise ShapeError(
            f"latent has {z.time} frames, {original_t} video frames need "
            f"{expected_t}"
        )
    weights.validate(config)
    params = _Params(config, weights)
    if not mode.is_streaming:
        return _decode_direct(z, config, params, original_t)
    stream = _DecoderStream(config, params)
    video_parts, w2_parts, w3_parts = [], [], []
    start = 0
    for size in mode.split(z.time):
        video_c, w2_c, w3_c = stream.feed(z.data[:, start : start + size])
        start += size
        video_parts.append(video_c)
        w2_parts.append(w2_c)
        w3_parts.append(w3_c)
    video = VideoTensor(np.concatenate(video_parts, axis=1))
    if video.time != original_t:
        raise ShapeError(
            f"streamed decode produced {video.time} frames, expected {original_t}"
        )
    return DecodeResult(
        video,
        SubbandSet3D(_concat_bands(w2_parts, KEYS_3D)),
        SubbandSet2D(_concat_bands(w3_parts, KEYS_2D)),
    )


def decode_streamed_sizes(
    z: VideoTensor,
    config: ModelConfig,
    weights: WeightStore,
    original_t: int,
    sizes: list[int],
) -> DecodeResult:
    """Streamed decode over explicit latent chunk sizes (zeros allowed)."""
    if sum(sizes) != z.time or any(s < 0 for s in sizes):
        raise ParameterError(
            f"chunk sizes {sizes} do not partition {z.time} latent frames"
        )
    weights.validate(config)
    params = _Params(config, weights)
    stream = _DecoderStream(config, params)
    video_parts, w2_parts, w3_parts = [], [], []
    start = 0
    for size in sizes:
        video_c, w2_c, w3_c = stream.feed(z.data[:, start : start + size])
        start += size
        video_parts.append(video_c)
        w2_parts.append(w2_c)
        w3_parts.append(w3_c)
    video = VideoTensor(np.concatenate(video_parts, axis=1))
    if video.time != original_t:
        raise ShapeError(
            f"streamed decode produced {video.time} frames, expected {original_t}"
        )
    return DecodeResult(
        video,
        SubbandSet3D(_concat_bands(w2_parts, KEYS_3D)),
        SubbandSet2D(_concat_bands(w3_parts, KEYS_2D)),
    )


def forward(
    v: VideoTensor,
    config: ModelConfig,
    weights: WeightStore,
    rng: Rng,
    mode: ChunkPlan | None = None,
) -> ForwardResult:
    """encode -> sample -> decode, returning everything the losses need.

    The latent is sampled once from the fully assembled posterior, so the
    result is identical in direct and streamed modes given the same rng seed.
    """
    enc = encode(v, config, weights, mode)
    z = sample_latent(enc.latent, rng)
    dec = decode(z, config, weights, v.time, mode)
    return ForwardResult(
        reconstruction=dec.video,
        latent=enc.latent,
        w2_hat=dec.w2_hat,
        w3_hat=dec.w3_hat,
        w2=enc.w2,
        w3=enc.w3,
    )
