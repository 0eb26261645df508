"""Causal 3D convolution and the tail-frame cache for lossless chunked inference.

A causal convolution pads the time axis only at the front, by ``k_t - 1``
frames, so output frame 0 depends on input frame 0 alone (plus padding).
Because every sliding window then looks strictly backwards, a stream can be
processed in arbitrary temporal chunks: each step caches the tail frames that
future windows still need, and the concatenated chunk outputs equal the
whole-clip result exactly.

The closed-form cache size for canonical chunking (first frame alone, then
blocks of ``t_chunk``) is::

    cache_len(k_t, s_t, t_chunk, m) = k_t + m*t_chunk - s_t * (m*t_chunk // s_t + 1)

:func:`cache_len_by_simulation` computes the same quantity by literally
walking the sliding windows and is used as an independent cross-check. Both
can be negative when ``k_t <= s_t``: stride then out-runs the kernel and the
next window starts beyond the frames seen so far, so nothing is cached and
the gap is skipped in the incoming chunk.

Normalization kinds differ in stream safety. Per-frame layer normalization
uses no cross-time statistics and streams losslessly. Whole-clip group
normalization does not: its statistics change with the chunk boundaries, and
it is provided purely as the documented negative control.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .errors import ParameterError, ShapeError, StateError
from .tensor import VideoTensor

PAD_REPLICATE = "replicate"
PAD_ZEROS = "zeros"


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one causal 3D convolution.

    Temporal padding is always ``kernel[0] - 1`` frames at the front;
    ``pad_mode`` selects their content (replicate first frame, or zeros).
    Spatial padding is symmetric and zero-filled.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    spatial_pad: tuple[int, int] = (0, 0)
    pad_mode: str = PAD_REPLICATE

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("channel counts must be >= 1")
        if len(self.kernel) != 3 or min(self.kernel) < 1:
            raise ParameterError(f"kernel must be three counts >= 1, got {self.kernel}")
        if len(self.stride) != 3 or min(self.stride) < 1:
            raise ParameterError(f"stride must be three counts >= 1, got {self.stride}")
        if len(self.spatial_pad) != 2 or min(self.spatial_pad) < 0:
            raise ParameterError(f"spatial_pad must be two counts >= 0, got {self.spatial_pad}")
        if self.pad_mode not in (PAD_REPLICATE, PAD_ZEROS):
            raise ParameterError(f"unknown pad_mode {self.pad_mode!r}")

    @property
    def temporal_pad(self) -> int:
        return self.kernel[0] - 1

    def weight_shape(self) -> tuple[int, int, int, int, int]:
        return (self.out_channels, self.in_channels) + tuple(self.kernel)

    def out_time(self, t: int) -> int:
        """Output frames for t input frames: (t - 1) // s_t + 1."""
        return (t - 1) // self.stride[0] + 1


def _check_weights(spec: ConvSpec, weight: np.ndarray, bias):
    weight = np.asarray(weight, dtype=np.float32)
    if weight.shape != spec.weight_shape():
        raise ShapeError(
            f"weight shape {weight.shape} does not match spec {spec.weight_shape()}"
        )
    if bias is None:
        bias = np.zeros(spec.out_channels, dtype=np.float32)
    else:
        bias = np.asarray(bias, dtype=np.float32)
        if bias.shape != (spec.out_channels,):
            raise ShapeError(
                f"bias shape {bias.shape} does not match ({spec.out_channels},)"
            )
    return weight, bias


def _conv3d_core(
    xp: np.ndarray, weight: np.ndarray, bias: np.ndarray, spec: ConvSpec
) -> np.ndarray:
    """Window engine shared by direct and streamed paths.

    ``xp`` is already temporally padded / cache-extended; no temporal padding
    happens here. Emits every window that fits, i.e. (Tp - k_t) // s_t + 1
    output frames.
    """
    cin, tp, h, w = xp.shape
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    ph, pw = spec.spatial_pad
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh or wp < kw:
        raise ShapeError(
            f"spatial extent ({hp}, {wp}) smaller than kernel ({kh}, {kw})"
        )
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    to = (tp - kt) // st + 1 if tp >= kt else 0
    if to == 0:
        return np.zeros((spec.out_channels, 0, ho, wo), dtype=np.float32)
    n = to * ho * wo
    acc = np.zeros((spec.out_channels, n), dtype=np.float32)
    # (kt, kh, kw, out, in) layout keeps each per-offset weight slice
    # contiguous, which keeps the matmul below on the BLAS fast path.
    wtab = np.ascontiguousarray(weight.transpose(2, 3, 4, 0, 1))
    for dt, dy, dx in product(range(kt), range(kh), range(kw)):
        window = xp[
            :,
            dt : dt + st * (to - 1) + 1 : st,
            dy : dy + sh * (ho - 1) + 1 : sh,
            dx : dx + sw * (wo - 1) + 1 : sw,
        ]
        acc += wtab[dt, dy, dx] @ window.reshape(cin, n)
    out = acc.reshape(spec.out_channels, to, ho, wo)
    out += bias[:, None, None, None]
    return out


def _temporal_pad(frames: np.ndarray, spec: ConvSpec) -> np.ndarray:
    pad = spec.temporal_pad
    if pad == 0:
        return frames
    if spec.pad_mode == PAD_REPLICATE:
        lead = np.repeat(frames[:, :1], pad, axis=1)
    else:
        lead = np.zeros(
            (frames.shape[0], pad) + frames.shape[2:], dtype=frames.dtype
        )
    return np.concatenate([lead, frames], axis=1)


def causal_conv3d(
    x: VideoTensor, spec: ConvSpec, weight, bias=None
) -> VideoTensor:
    """Whole-clip causal convolution."""
    if x.channels != spec.in_channels:
        raise ShapeError(
            f"input has {x.channels} channels, spec expects {spec.in_channels}"
        )
    weight, bias = _check_weights(spec, weight, bias)
    out = _conv3d_core(_temporal_pad(x.data, spec), weight, bias, spec)
    return VideoTensor(out)


# ---------------------------------------------------------------------------
# Cache-size bookkeeping.
# ---------------------------------------------------------------------------


def _check_cache_args(k_t: int, s_t: int, t_chunk: int, m: int):
    if k_t < 1 or s_t < 1 or t_chunk < 1:
        raise ParameterError(
            f"kernel, stride and chunk size must be >= 1, got "
            f"({k_t}, {s_t}, {t_chunk})"
        )
    if m < 0:
        raise ParameterError(f"chunk index must be >= 0, got {m}")


def cache_len(k_t: int, s_t: int, t_chunk: int, m: int) -> int:
    """Closed-form cached-frame count after chunk ``m`` under canonical chunking.

    Chunk 0 is the initial frame alone; chunk m >= 1 is the m-th block of
    ``t_chunk`` frames. May be negative when ``k_t <= s_t`` (see module docs).
    """
    _check_cache_args(k_t, s_t, t_chunk, m)
    return k_t + m * t_chunk - s_t * (m * t_chunk // s_t + 1)


def cache_len_by_simulation(k_t: int, s_t: int, t_chunk: int, m: int) -> int:
    """Sliding-window walk computing the same quantity as :func:`cache_len`.

    Enumerates window start positions until one extends past the frames
    available after chunk ``m``; the cache must keep everything from that
    window's start to the last available frame.
    """
    _check_cache_args(k_t, s_t, t_chunk, m)
    last_available = k_t - 1 + m * t_chunk
    n = 0
    while n * s_t + k_t - 1 <= last_available:
        n += 1
    return last_available - n * s_t + 1


_EMPTY = np.zeros((0,), dtype=np.float32)


@dataclass(frozen=True)
class CacheState:
    """Per-stream tail-frame cache for one causal convolution.

    Tracks absolute frame indices in post-padding coordinates, so irregular
    chunk sizes work; the canonical-chunking formula is then a checkable
    special case of this bookkeeping, not its implementation. Treat instances
    as immutable; :func:`stream_conv3d` returns updated copies.
    """

    chunk_index: int = 0
    frames_seen: int = 0
    next_window_start: int = 0
    cache: np.ndarray = field(default_factory=lambda: _EMPTY)
    finalized: bool = False

    @property
    def occupancy(self) -> int:
        """Number of frames currently retained."""
        return 0 if self.cache.ndim != 4 else self.cache.shape[1]

    def finalize(self) -> "CacheState":
        """Mark the stream complete; any further chunk raises StateError."""
        return replace(self, finalized=True)


def _stream_conv_core(
    state: CacheState, frames: np.ndarray, spec: ConvSpec, weight, bias
) -> tuple[np.ndarray, CacheState]:
    if state.finalized:
        raise StateError("chunk fed after the stream was finalized")
    kt, st = spec.kernel[0], spec.stride[0]
    if frames.shape[1] == 0:
        if state.frames_seen == 0:
            # Stream not started yet; nothing to pad against.
            empty = np.zeros(
                (spec.out_channels, 0) + _spatial_out(frames.shape[2:], spec),
                dtype=np.float32,
            )
            return empty, replace(state, chunk_index=state.chunk_index + 1)
        incoming = frames
    elif state.frames_seen == 0:
        incoming = _temporal_pad(frames, spec)
    else:
        incoming = frames
    new_seen = state.frames_seen + incoming.shape[1]
    if state.occupancy:
        slab = np.concatenate([state.cache, incoming], axis=1)
    else:
        slab = incoming
    slab_start = new_seen - slab.shape[1]
    offset = state.next_window_start - slab_start
    if offset < 0:
        raise StateError("cache lost frames still needed by the next window")
    avail = slab.shape[1] - offset
    if avail >= kt:
        emitted = (avail - kt) // st + 1
        out = _conv3d_core(slab[:, offset:], weight, bias, spec)
    else:
        emitted = 0
        out = np.zeros(
            (spec.out_channels, 0) + _spatial_out(slab.shape[2:], spec),
            dtype=np.float32,
        )
    new_next = state.next_window_start + emitted * st
    keep_from = new_next - slab_start
    if keep_from < slab.shape[1]:
        cache = np.ascontiguousarray(slab[:, keep_from:])
    else:
        cache = _EMPTY
    new_state = CacheState(
        chunk_index=state.chunk_index + 1,
        frames_seen=new_seen,
        next_window_start=new_next,
        cache=cache,
    )
    return out, new_state


def _spatial_out(hw: tuple[int, int], spec: ConvSpec) -> tuple[int, int]:
    h, w = hw
    kh, kw = spec.kernel[1:]
    sh, sw = spec.stride[1:]
    ph, pw = spec.spatial_pad
    return ((h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1)


def stream_conv3d(
    state: CacheState, chunk: VideoTensor, spec: ConvSpec, weight, bias=None
) -> tuple[VideoTensor | None, CacheState]:
    """Feed one chunk; returns (output chunk or None, updated state).

    None means no window completed yet (the frames were cached). Concatenating
    all non-None outputs over a stream reproduces :func:`causal_conv3d` on the
    concatenated input exactly.
    """
    if chunk.time < 1:
        raise ShapeError("chunk must contain at least one frame")
    if chunk.channels != spec.in_channels:
        raise ShapeError(
            f"chunk has {chunk.channels} channels, spec expects {spec.in_channels}"
        )
    weight, bias = _check_weights(spec, weight, bias)
    out, new_state = _stream_conv_core(state, chunk.data, spec, weight, bias)
    if out.shape[1] == 0:
        return None, new_state
    return VideoTensor(out), new_state


# ---------------------------------------------------------------------------
# Stream-safe pointwise/per-frame layers and the whole-clip negative control.
# ---------------------------------------------------------------------------


def silu(x: np.ndarray) -> np.ndarray:
    """Smooth gate x * sigmoid(x) = x / (1 + exp(-x)).

    Large negative inputs overflow exp harmlessly (x / inf underflows to -0),
    so the computation stays branch-free.
    """
    x = np.asarray(x, dtype=np.float32)
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def _frame_layernorm_core(
    frames: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float
) -> np.ndarray:
    if frames.shape[1] == 0:
        return frames
    # Float64 accumulators, float32 arithmetic: per-frame statistics are
    # independent of chunk boundaries, keeping this layer stream-safe.
    mean = frames.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
    ex2 = np.mean(np.square(frames), axis=(0, 2, 3), keepdims=True, dtype=np.float64)
    var = np.maximum(ex2 - np.square(mean), 0.0)
    scale = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    shift = mean.astype(np.float32)
    out = (frames - shift) * scale
    out *= gain[:, None, None, None]
    out += bias[:, None, None, None]
    return out


def frame_layernorm(
    x: VideoTensor, gain, bias, eps: float = 1e-5
) -> VideoTensor:
    """Normalize each frame over (channels, height, width); stream-safe.

    No statistic crosses the time axis, so chunked evaluation is identical to
    whole-clip evaluation.
    """
    gain, bias, _ = _check_affine(x.channels, gain, bias, eps)
    return VideoTensor(_frame_layernorm_core(x.data, gain, bias, eps))


def _check_affine(channels: int, gain, bias, eps: float):
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    gain = np.asarray(gain, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise ShapeError(
            f"gain/bias must have shape ({channels},), got {gain.shape}/{bias.shape}"
        )
    return gain, bias, eps


def _groupnorm_core(
    frames: np.ndarray, groups: int, gain: np.ndarray, bias: np.ndarray, eps: float
) -> np.ndarray:
    c, t, h, w = frames.shape
    if frames.shape[1] == 0:
        return frames
    grouped = frames.reshape(groups, c // groups, t, h, w)
    mean = grouped.mean(axis=(1, 2, 3, 4), keepdims=True, dtype=np.float64)
    ex2 = np.mean(
        np.square(grouped), axis=(1, 2, 3, 4), keepdims=True, dtype=np.float64
    )
    var = np.maximum(ex2 - np.square(mean), 0.0)
    scale = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    shift = mean.astype(np.float32)
    out = ((grouped - shift) * scale).reshape(c, t, h, w)
    out *= gain[:, None, None, None]
    out += bias[:, None, None, None]
    return out


def groupnorm_whole_clip(
    x: VideoTensor, groups: int, gain, bias, eps: float = 1e-5
) -> VideoTensor:
    """Group normalization with statistics over the full clip.

    Statistics span (group-channels, time, height, width), so they depend on
    where chunk boundaries fall: this layer deliberately breaks the streaming
    guarantee and exists as the negative control for it.
    """
    if x.channels % groups:
        raise ParameterError(
            f"channels ({x.channels}) not divisible by groups ({groups})"
        )
    gain, bias, _ = _check_affine(x.channels, gain, bias, eps)
    return VideoTensor(_groupnorm_core(x.data, groups, gain, bias, eps))


def _upsample_core(frames: np.ndarray, factors, first_chunk: bool) -> np.ndarray:
    ft, fh, fw = factors
    out = frames
    if fh > 1:
        out = np.repeat(out, fh, axis=2)
    if fw > 1:
        out = np.repeat(out, fw, axis=3)
    if ft == 2 and out.shape[1]:
        out = np.repeat(out, 2, axis=1)
        if first_chunk:
            out = out[:, 1:]
    return out


def nearest_upsample(x: VideoTensor, factors: tuple[int, int, int]) -> VideoTensor:
    """Nearest-neighbor upsampling with a causal time rule.

    Temporal factor 2 emits 2t frames and drops the duplicated first frame,
    yielding 2t - 1: the inverse of the causal pad-then-halve time law, and
    per-frame (hence stream-safe).
    """
    ft, fh, fw = factors
    if ft not in (1, 2) or fh < 1 or fw < 1:
        raise ParameterError(f"unsupported upsample factors {factors}")
    return VideoTensor(_upsample_core(x.data, factors, first_chunk=True))


class _UpsampleStream:
    def __init__(self, factors):
        self.factors = factors
        self._started = False

    def feed(self, frames: np.ndarray) -> np.ndarray:
        out = _upsample_core(frames, self.factors, first_chunk=not self._started)
        if frames.shape[1]:
            self._started = True
        return out


# ---------------------------------------------------------------------------
# Layer stacks: a tiny composition harness for the streaming guarantee.
# ---------------------------------------------------------------------------

KIND_CONV = "causal_conv3d"
KIND_LAYERNORM = "frame_layernorm"
KIND_GROUPNORM = "groupnorm"
KIND_NONLINEARITY = "nonlinearity"
KIND_RESAMPLE = "resample"

STREAM_SAFE_KINDS = frozenset(
    {KIND_CONV, KIND_LAYERNORM, KIND_NONLINEARITY, KIND_RESAMPLE}
)


@dataclass(frozen=True)
class LayerDef:
    """One layer of a runnable stack; use the classmethod constructors."""

    kind: str
    spec: ConvSpec | None = None
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    gain: np.ndarray | None = None
    groups: int = 1
    eps: float = 1e-5
    factors: tuple[int, int, int] = (1, 1, 1)
    name: str = ""

    @classmethod
    def conv(cls, spec: ConvSpec, weight, bias=None, name: str = "") -> "LayerDef":
        weight, bias = _check_weights(spec, weight, bias)
        return cls(kind=KIND_CONV, spec=spec, weight=weight, bias=bias, name=name)

    @classmethod
    def layernorm(cls, gain, bias, eps: float = 1e-5, name: str = "") -> "LayerDef":
        gain = np.asarray(gain, dtype=np.float32)
        bias = np.asarray(bias, dtype=np.float32)
        return cls(kind=KIND_LAYERNORM, gain=gain, bias=bias, eps=eps, name=name)

    @classmethod
    def groupnorm(
        cls, groups: int, gain, bias, eps: float = 1e-5, name: str = ""
    ) -> "LayerDef":
        gain = np.asarray(gain, dtype=np.float32)
        bias = np.asarray(bias, dtype=np.float32)
        return cls(
            kind=KIND_GROUPNORM, groups=groups, gain=gain, bias=bias, eps=eps,
            name=name,
        )

    @classmethod
    def nonlinearity(cls, name: str = "") -> "LayerDef":
        return cls(kind=KIND_NONLINEARITY, name=name)

    @classmethod
    def upsample(cls, factors: tuple[int, int, int], name: str = "") -> "LayerDef":
        ft, fh, fw = factors
        if ft not in (1, 2) or fh < 1 or fw < 1:
            raise ParameterError(f"unsupported upsample factors {factors}")
        return cls(kind=KIND_RESAMPLE, factors=tuple(factors), name=name)

    @property
    def stream_safe(self) -> bool:
        return self.kind in STREAM_SAFE_KINDS


def _apply_layer(layer: LayerDef, frames: np.ndarray) -> np.ndarray:
    if layer.kind == KIND_CONV:
        return _conv3d_core(
            _temporal_pad(frames, layer.spec), layer.weight, layer.bias, layer.spec
        )
    if layer.kind == KIND_LAYERNORM:
        return _frame_layernorm_core(frames, layer.gain, layer.bias, layer.eps)
    if layer.kind == KIND_GROUPNORM:
        return _groupnorm_core(frames, layer.groups, layer.gain, layer.bias, layer.eps)
    if layer.kind == KIND_NONLINEARITY:
        return silu(frames)
    if layer.kind == KIND_RESAMPLE:
        return _upsample_core(frames, layer.factors, first_chunk=True)
    raise ParameterError(f"unknown layer kind {layer.kind!r}")


class _LayerStream:
    """Streaming evaluator for one LayerDef."""

    def __init__(self, layer: LayerDef):
        self.layer = layer
        self.conv_state = CacheState() if layer.kind == KIND_CONV else None
        self.upsample = (
            _UpsampleStream(layer.factors) if layer.kind == KIND_RESAMPLE else None
        )

    def feed(self, frames: np.ndarray) -> np.ndarray:
        layer = self.layer
        if layer.kind == KIND_CONV:
            out, self.conv_state = _stream_conv_core(
                self.conv_state, frames, layer.spec, layer.weight, layer.bias
            )
            return out
        if layer.kind == KIND_RESAMPLE:
            return self.upsample.feed(frames)
        # Per-frame (layernorm, nonlinearity) or per-chunk (groupnorm, the
        # negative control: its statistics shrink to the chunk).
        return _apply_layer(layer, frames)


@dataclass(frozen=True)
class ChunkPlan:
    """How to drive a stream: direct, canonical chunking, or explicit sizes."""

    mode: str  # "direct" | "canonical" | "explicit"
    chunk_size: int = 0
    sizes: tuple[int, ...] = ()

    @classmethod
    def direct(cls) -> "ChunkPlan":
        return cls(mode="direct")

    @classmethod
    def canonical(cls, t_chunk: int) -> "ChunkPlan":
        if t_chunk < 1:
            raise ParameterError(f"t_chunk must be >= 1, got {t_chunk}")
        return cls(mode="canonical", chunk_size=t_chunk)

    @classmethod
    def explicit(cls, sizes) -> "ChunkPlan":
        sizes = tuple(int(s) for s in sizes)
        if not sizes or min(sizes) < 1:
            raise ParameterError(f"explicit sizes must all be >= 1, got {sizes}")
        return cls(mode="explicit", sizes=sizes)

    @classmethod
    def parse(cls, text: str) -> "ChunkPlan":
        """Parse "direct", "canonical:N", or "explicit:a,b,c"."""
        text = text.strip()
        if text == "direct":
            return cls.direct()
        if text.startswith("canonical:"):
            return cls.canonical(int(text.split(":", 1)[1]))
        if text.startswith("explicit:"):
            return cls.explicit(int(s) for s in text.split(":", 1)[1].split(","))
        raise ParameterError(f"cannot parse chunk plan {text!r}")

    @property
    def is_streaming(self) -> bool:
        return self.mode != "direct"

    def split(self, total: int) -> list[int]:
        """Chunk sizes summing to ``total`` frames."""
        if total < 1:
            raise ParameterError(f"stream length must be >= 1, got {total}")
        if self.mode == "direct":
            return [total]
        if self.mode == "canonical":
            sizes = [1]
            remaining = total - 1
            while remaining > 0:
                step = min(self.chunk_size, remaining)
                sizes.append(step)
                remaining -= step
            return sizes
        if sum(self.sizes) != total:
            raise ParameterError(
                f"explicit sizes sum to {sum(self.sizes)}, stream has {total} frames"
            )
        return list(self.sizes)

    def describe(self) -> str:
        if self.mode == "direct":
            return "direct"
        if self.mode == "canonical":
            return f"canonical:{self.chunk_size}"
        return "explicit:" + ",".join(str(s) for s in self.sizes)


def run_layer_stack(
    layers: list[LayerDef], x: VideoTensor, plan: ChunkPlan | None = None
) -> VideoTensor:
    """Execute a stack directly or in streaming mode per the plan.

    For stacks containing only stream-safe kinds, both modes agree exactly;
    an empty stack is the identity.
    """
    plan = plan or ChunkPlan.direct()
    if not plan.is_streaming:
        frames = x.data
        for layer in layers:
            frames = _apply_layer(layer, frames)
        return VideoTensor(frames)
    states = [_LayerStream(layer) for layer in layers]
    pieces = []
    start = 0
    for size in plan.split(x.time):
        frames = x.data[:, start : start + size]
        start += size
        for state in states:
            frames = state.feed(frames)
        if frames.shape[1]:
            pieces.append(frames)
    if not pieces:
        raise ShapeError("streaming produced no output frames")
    return VideoTensor(np.concatenate(pieces, axis=1))
