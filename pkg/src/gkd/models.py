"""The three gesture architectures, width-scaled builders, and forwards.

Canonical layer tables (width 1):

* baseline_cnn3d: six conv(+BN+ReLU) layers with channels
  [32, 64, 64, 128, 128, 128]; odd layers downsample every dimension
  (k=4, s=2, p=1), even layers preserve size (k=3, s=1, p=1); a 32-frame
  64x64 clip ends at 128x4x8x8 = 32,768 features, then linear 512 and a
  class linear.
* joint encoder: the same table except layer 5 keeps time (k_t=3, s_t=1,
  p_t=1) because a 4-frame block only supports two temporal halvings; a
  block ends at 128x1x8x8 = 8,192 features, then linear 512. A 256-unit
  LSTM consumes block features and its last hidden state is classified.
* baseline_lstm: raw 4-frame blocks flattened (2*4*64*64 = 32,768),
  linear 512 + ReLU, the 256-unit LSTM, then the class linear.

``width_scale`` multiplies every conv channel count, the 512-wide linear,
and the LSTM units (rounded to nearest, minimum 1); input channels and
class count never scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .autodiff import (Tensor, conv3d_forward, conv3d_shape, linear_forward,
                       relu, reshape, slice_rows, concat_rows)
from .data import center_window_32, chunk4
from .layers import BatchNormState, batchnorm3d, lstm_forward

__all__ = [
    "FAMILIES",
    "ArchSpec",
    "ModelParams",
    "build_model",
    "param_count",
    "forward_baseline_cnn",
    "forward_baseline_lstm",
    "forward_joint",
    "forward_batch",
    "predict_logits",
    "arch_descriptor",
    "spec_from_descriptor",
]

FAMILIES = ("baseline_cnn3d", "baseline_lstm", "joint")
WIDTH_SCALES = (Fraction(1), Fraction(1, 2), Fraction(1, 4))

BASE_CONV_CHANNELS = (32, 64, 64, 128, 128, 128)
BASE_FC_WIDTH = 512
BASE_LSTM_UNITS = 256
CLIP_FRAMES = 32
BLOCK_FRAMES = 4
BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5

DOWNSAMPLE = ((4, 4, 4), (2, 2, 2), (1, 1, 1))
PRESERVE = ((3, 3, 3), (1, 1, 1), (1, 1, 1))
JOINT_LAYER5 = ((3, 4, 4), (1, 2, 2), (1, 1, 1))


def scale_width(base: int, width_scale: Fraction) -> int:
    """Nearest-integer scaled width (half rounds up), never below 1."""
    scaled = int(Fraction(base) * width_scale + Fraction(1, 2))
    return max(1, scaled)


@dataclass(frozen=True)
class ArchSpec:
    """Architecture selector: family, width, classes, input geometry."""

    family: str
    width_scale: Fraction = Fraction(1)
    class_count: int = 20
    input_channels: int = 2
    spatial: int = 64

    def __post_init__(self):
        object.__setattr__(self, "width_scale", Fraction(self.width_scale))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, pick from {FAMILIES}")
        if self.width_scale not in WIDTH_SCALES:
            raise ValueError(
                f"width_scale must be one of 1, 1/2, 1/4, got {self.width_scale}")
        if self.class_count < 1:
            raise ValueError(f"class_count must be positive, got {self.class_count}")
        if self.input_channels not in (2, 4):
            raise ValueError(
                f"input_channels must be 2 or 4, got {self.input_channels}")
        if self.spatial < 8 or self.spatial % 8:
            raise ValueError(
                f"spatial size must be a positive multiple of 8, got {self.spatial}")

    @property
    def conv_channels(self) -> tuple[int, ...]:
        return tuple(scale_width(c, self.width_scale) for c in BASE_CONV_CHANNELS)

    @property
    def fc_width(self) -> int:
        return scale_width(BASE_FC_WIDTH, self.width_scale)

    @property
    def lstm_units(self) -> int:
        return scale_width(BASE_LSTM_UNITS, self.width_scale)


def conv_table(spec: ArchSpec) -> list[tuple[int, tuple, tuple, tuple]]:
    """Per-layer (out_channels, kernel, stride, pad) for the conv families."""
    rows = []
    for i, out_ch in enumerate(spec.conv_channels):
        geom = DOWNSAMPLE if i % 2 == 0 else PRESERVE
        if spec.family == "joint" and i == 4:
            geom = JOINT_LAYER5
        rows.append((out_ch, *geom))
    return rows


def encoder_output_shape(spec: ArchSpec) -> tuple[int, int, int, int]:
    """(C, T, H, W) leaving the conv stack for one clip or block."""
    t = CLIP_FRAMES if spec.family == "baseline_cnn3d" else BLOCK_FRAMES
    h = w = spec.spatial
    c = spec.input_channels
    for out_ch, kernel, stride, pad in conv_table(spec):
        t = conv3d_shape(t, kernel[0], stride[0], pad[0])
        h = conv3d_shape(h, kernel[1], stride[1], pad[1])
        w = conv3d_shape(w, kernel[2], stride[2], pad[2])
        c = out_ch
    return c, t, h, w


def flat_features(spec: ArchSpec) -> int:
    """Flattened width entering fc1."""
    if spec.family == "baseline_lstm":
        return spec.input_channels * BLOCK_FRAMES * spec.spatial * spec.spatial
    c, t, h, w = encoder_output_shape(spec)
    return c * t * h * w


class ModelParams:
    """Named tensors for one architecture plus storage-encoding tags.

    ``encodings`` maps each tensor name to how it is stored on disk
    (0 dense-f32, 1 dense-f16, 2 sparse-coo-f32); in memory every tensor
    is dense float32. BN running statistics are ordinary entries here but
    are excluded from ``learnable`` and from parameter counts.
    """

    def __init__(self, spec: ArchSpec, tensors: dict[str, Tensor],
                 encodings: dict[str, int] | None = None):
        self.spec = spec
        self.tensors = dict(tensors)
        if encodings is None:
            encodings = {name: 0 for name in self.tensors}
        if set(encodings) != set(self.tensors):
            raise ValueError("encodings must cover exactly the tensor names")
        self.encodings = dict(encodings)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    @staticmethod
    def is_learnable(name: str) -> bool:
        return not name.endswith((".running_mean", ".running_var"))

    def learnable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if self.is_learnable(n)}

    def copy(self) -> "ModelParams":
        tensors = {}
        for name, t in self.tensors.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            tensors[name] = c
        return ModelParams(self.spec, tensors, dict(self.encodings))


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_model(spec: ArchSpec, seed: int, dtype=np.float32) -> ModelParams:
    """Initialize parameters for ``spec``, deterministically in ``seed``.

    Weights draw from uniform(+-sqrt(1/fan_in)) in a fixed tensor order;
    biases start at zero except the LSTM forget-gate block, which starts
    at 1.0. BN scales start at one, shifts and running means at zero,
    running variances at one.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    def learn(name, data):
        tensors[name] = Tensor(data, requires_grad=True)

    def stat(name, data):
        tensors[name] = Tensor(data)

    if spec.family in ("baseline_cnn3d", "joint"):
        c_in = spec.input_channels
        for i, (out_ch, kernel, _, _) in enumerate(conv_table(spec), start=1):
            fan_in = c_in * kernel[0] * kernel[1] * kernel[2]
            learn(f"conv{i}.weight",
                  _uniform(rng, (out_ch, c_in, *kernel), fan_in, dtype))
            learn(f"conv{i}.bias", np.zeros(out_ch, dtype=dtype))
            learn(f"bn{i}.gamma", np.ones(out_ch, dtype=dtype))
            learn(f"bn{i}.beta", np.zeros(out_ch, dtype=dtype))
            stat(f"bn{i}.running_mean", np.zeros(out_ch, dtype=dtype))
            stat(f"bn{i}.running_var", np.ones(out_ch, dtype=dtype))
            c_in = out_ch

    flat = flat_features(spec)
    fc_w = spec.fc_width
    learn("fc1.weight", _uniform(rng, (fc_w, flat), flat, dtype))
    learn("fc1.bias", np.zeros(fc_w, dtype=dtype))

    if spec.family in ("baseline_lstm", "joint"):
        units = spec.lstm_units
        learn("lstm.w_ih", _uniform(rng, (4 * units, fc_w), fc_w, dtype))
        learn("lstm.w_hh", _uniform(rng, (4 * units, units), units, dtype))
        bias = np.zeros(4 * units, dtype=dtype)
        bias[units:2 * units] = 1.0
        learn("lstm.bias", bias)
        head_in = units
    else:
        head_in = fc_w

    learn("fc2.weight", _uniform(rng, (spec.class_count, head_in), head_in, dtype))
    learn("fc2.bias", np.zeros(spec.class_count, dtype=dtype))
    return ModelParams(spec, tensors)


def param_count(model: ModelParams) -> int:
    """Total elements across learnable tensors (running stats excluded)."""
    return sum(t.size for t in model.learnable().values())


# ---------------------------------------------------------------------------
# forward passes

def _bn_adapter(model: ModelParams, i: int) -> BatchNormState:
    st = BatchNormState.__new__(BatchNormState)
    st.gamma = model[f"bn{i}.gamma"]
    st.beta = model[f"bn{i}.beta"]
    st.running_mean = model[f"bn{i}.running_mean"].data
    st.running_var = model[f"bn{i}.running_var"].data
    st.momentum = BN_MOMENTUM
    st.epsilon = BN_EPSILON
    return st


def _conv_stack(model: ModelParams, x: Tensor, training: bool) -> Tensor:
    for i, (_, kernel, stride, pad) in enumerate(conv_table(model.spec), start=1):
        x = conv3d_forward(x, model[f"conv{i}.weight"], model[f"conv{i}.bias"],
                           strides=stride, pads=pad)
        x = batchnorm3d(x, _bn_adapter(model, i), training)
        x = relu(x)
    return x


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)


def _check_video(spec: ArchSpec, video: np.ndarray) -> np.ndarray:
    if video.ndim != 4 or video.shape[0] < 1 or video.shape[1:] != (
            spec.input_channels, spec.spatial, spec.spatial):
        raise ValueError(
            f"video must be (T, {spec.input_channels}, {spec.spatial}, "
            f"{spec.spatial}) with T >= 1, got {video.shape}")
    return video


def _encode_blocks(model: ModelParams, blocks: np.ndarray, training: bool) -> Tensor:
    """Joint encoder over stacked (N, C, 4, S, S) blocks -> (N, fc) features."""
    x = _conv_stack(model, Tensor(blocks), training)
    x = reshape(x, (blocks.shape[0], flat_features(model.spec)))
    x = linear_forward(x, model["fc1.weight"], model["fc1.bias"])
    return relu(x)


def _recurrent_head(model: ModelParams, feats: Tensor,
                    counts: Sequence[int]) -> Tensor:
    """Per-sample LSTM over stacked block features, then the class linear."""
    w_ih, w_hh, bias = model["lstm.w_ih"], model["lstm.w_hh"], model["lstm.bias"]
    finals = []
    offset = 0
    for n in counts:
        sub = slice_rows(feats, offset, offset + n)
        state = lstm_forward(sub, w_ih, w_hh, bias)
        finals.append(reshape(state.hidden, (1, state.hidden.size)))
        offset += n
    hidden = concat_rows(finals)
    return linear_forward(hidden, model["fc2.weight"], model["fc2.bias"])


def forward_batch(model: ModelParams, batch, training: bool = False) -> Tensor:
    """Logits (B, classes) for a batch.

    For baseline_cnn3d, ``batch`` is an (B, C, 32, S, S) array of clips.
    For the recurrent families it is a sequence of (T_i, C, S, S) videos
    of arbitrary lengths; all their blocks run through the encoder as one
    stack and per-sample recurrences read back their own rows.
    """
    spec = model.spec
    if spec.family == "baseline_cnn3d":
        clips = _as_array(batch)
        want = (spec.input_channels, CLIP_FRAMES, spec.spatial, spec.spatial)
        if clips.ndim != 5 or clips.shape[1:] != want:
            raise ValueError(f"clip batch must be (B, {', '.join(map(str, want))}),"
                             f" got {clips.shape}")
        x = _conv_stack(model, Tensor(clips), training)
        x = reshape(x, (clips.shape[0], flat_features(spec)))
        x = relu(linear_forward(x, model["fc1.weight"], model["fc1.bias"]))
        return linear_forward(x, model["fc2.weight"], model["fc2.bias"])

    videos = [_check_video(spec, _as_array(v)) for v in batch]
    if not videos:
        raise ValueError("empty batch")
    block_sets = [chunk4(v) for v in videos]
    counts = [b.shape[0] for b in block_sets]
    stacked = np.concatenate(block_sets, axis=0)

    if spec.family == "joint":
        feats = _encode_blocks(model, stacked, training)
    else:
        rows = stacked.reshape(stacked.shape[0], -1)
        feats = relu(linear_forward(Tensor(rows), model["fc1.weight"],
                                    model["fc1.bias"]))
    return _recurrent_head(model, feats, counts)


def _single(logits_batch: Tensor) -> Tensor:
    return reshape(slice_rows(logits_batch, 0, 1), (logits_batch.shape[1],))


def forward_baseline_cnn(model: ModelParams, clip, training: bool = False) -> Tensor:
    """Class logits for one 32-frame clip (C, 32, S, S)."""
    arr = _as_array(clip)
    if model.spec.family != "baseline_cnn3d":
        raise ValueError(f"model family is {model.spec.family}")
    if arr.ndim != 4:
        raise ValueError(f"clip must be (C, {CLIP_FRAMES}, S, S), got {arr.shape}")
    return _single(forward_batch(model, arr[None], training))


def forward_baseline_lstm(model: ModelParams, video) -> Tensor:
    """Class logits for one variable-length (T, C, S, S) video."""
    if model.spec.family != "baseline_lstm":
        raise ValueError(f"model family is {model.spec.family}")
    return _single(forward_batch(model, [video], training=False))


def forward_joint(model: ModelParams, video, training: bool = False) -> Tensor:
    """Class logits for one variable-length (T, C, S, S) video."""
    if model.spec.family != "joint":
        raise ValueError(f"model family is {model.spec.family}")
    return _single(forward_batch(model, [video], training))


def clip_from_video(video: np.ndarray) -> np.ndarray:
    """Center-windowed, channel-first (C, 32, S, S) clip of a video."""
    return np.ascontiguousarray(center_window_32(video).transpose(1, 0, 2, 3))


def predict_logits(model: ModelParams, video, training: bool = False) -> Tensor:
    """Logits for one raw (T, C, S, S) video under any family."""
    arr = _check_video(model.spec, _as_array(video))
    if model.spec.family == "baseline_cnn3d":
        return forward_baseline_cnn(model, clip_from_video(arr), training)
    if model.spec.family == "baseline_lstm":
        return forward_baseline_lstm(model, arr)
    return forward_joint(model, arr, training)


# ---------------------------------------------------------------------------
# architecture descriptor (embedded in model files)

def arch_descriptor(spec: ArchSpec) -> dict:
    """JSON-ready description: selector fields plus the derived layer table."""
    table: dict = {
        "spatial": spec.spatial,
        "fc1": [flat_features(spec), spec.fc_width],
    }
    if spec.family in ("baseline_cnn3d", "joint"):
        table["conv"] = [[out_ch, list(k), list(s), list(p)]
                         for out_ch, k, s, p in conv_table(spec)]
    if spec.family in ("baseline_lstm", "joint"):
        table["lstm"] = spec.lstm_units
        table["fc2"] = [spec.lstm_units, spec.class_count]
    else:
        table["fc2"] = [spec.fc_width, spec.class_count]
    return {
        "family": spec.family,
        "width_scale": [spec.width_scale.numerator, spec.width_scale.denominator],
        "class_count": spec.class_count,
        "input_channels": spec.input_channels,
        "layer_table": table,
    }


def spec_from_descriptor(d: dict) -> ArchSpec:
    """Rebuild an ArchSpec and verify the embedded layer table matches."""
    try:
        num, den = d["width_scale"]
        spec = ArchSpec(family=d["family"],
                        width_scale=Fraction(int(num), int(den)),
                        class_count=int(d["class_count"]),
                        input_channels=int(d["input_channels"]),
                        spatial=int(d["layer_table"]["spatial"]))
    except (KeyError, TypeError, ValueError, ZeroDivisionError) as e:
        raise ValueError(f"invalid architecture descriptor: {e}") from None
    if arch_descriptor(spec) != d:
        raise ValueError("architecture descriptor layer table is inconsistent")
    return spec
