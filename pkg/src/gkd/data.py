"""Synthetic gesture-video corpus, input views, augmentation, dataset files.

Each sample is a Gaussian blob moving through one of eight motion patterns
over a 64x64 frame, rendered into two channels: channel 0 is a grayscale
intensity image, channel 1 a "depth" image whose brightness decreases as
the blob grows, so the channels carry related but distinct information.
Every sample is a pure function of (corpus seed, sample id), which makes
splits reproducible and individual samples regenerable in isolation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fileio import DecodeError, Reader, Writer, atomic_write

__all__ = [
    "CLASS_NAMES",
    "FRAME_SIZE",
    "GestureSample",
    "DatasetManifest",
    "GestureDataset",
    "make_sample",
    "synth_generate",
    "center_window_32",
    "chunk4",
    "make_input",
    "augment",
    "augment_with_params",
    "save_dataset",
    "load_dataset",
]

CLASS_NAMES = ("up", "down", "left", "right", "circle_cw", "circle_ccw",
               "expand", "contract")
FRAME_SIZE = 64
MIN_FRAMES, MAX_FRAMES = 16, 48
NOISE_SIGMA = 0.05
AUGMENT_CONFIG = {"angle_deg": 10.0, "shift_px": 4.0, "zoom": [0.9, 1.1]}

DATASET_MAGIC = b"GKDD"
DATASET_VERSION = 1


@dataclass
class GestureSample:
    """One gesture video: frames (T, 2, 64, 64) in [0,1] plus metadata.

    ``keypoints`` holds the per-frame blob center as (x, y) pixel
    coordinates inside the frame, standing in for a tracked hand position.
    """

    id: int
    label: int
    frames: np.ndarray
    keypoints: np.ndarray

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


@dataclass
class DatasetManifest:
    class_count: int
    train_count: int
    val_count: int
    test_count: int
    seed: int
    augmentation: dict = field(default_factory=lambda: dict(AUGMENT_CONFIG))

    def to_json(self) -> str:
        return json.dumps({
            "class_count": self.class_count,
            "train_count": self.train_count,
            "val_count": self.val_count,
            "test_count": self.test_count,
            "seed": self.seed,
            "augmentation": self.augmentation,
        }, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            d = json.loads(text)
            return cls(class_count=int(d["class_count"]),
                       train_count=int(d["train_count"]),
                       val_count=int(d["val_count"]),
                       test_count=int(d["test_count"]),
                       seed=int(d["seed"]),
                       augmentation=dict(d["augmentation"]))
        except (ValueError, KeyError, TypeError) as e:
            raise DecodeError(f"invalid dataset manifest: {e}") from None


class GestureDataset:
    """Manifest plus samples ordered by id; splits are contiguous id ranges."""

    def __init__(self, manifest: DatasetManifest, samples: Sequence[GestureSample]):
        total = manifest.train_count + manifest.val_count + manifest.test_count
        if len(samples) != total:
            raise ValueError(
                f"manifest promises {total} samples, got {len(samples)}")
        self.manifest = manifest
        self.samples = list(samples)

    @property
    def train(self) -> list[GestureSample]:
        return self.samples[:self.manifest.train_count]

    @property
    def val(self) -> list[GestureSample]:
        a = self.manifest.train_count
        return self.samples[a:a + self.manifest.val_count]

    @property
    def test(self) -> list[GestureSample]:
        a = self.manifest.train_count + self.manifest.val_count
        return self.samples[a:]

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# synthesis

def _class_trajectory(label: int, tau: np.ndarray, start: np.ndarray,
                      speed: float, phase: float, sigma_base: float,
                      sigma_jitter: float):
    """Blob center (x, y) and size per frame for one motion class.

    ``tau`` runs 0..1 across the video. Directional classes translate the
    blob along an axis, circle classes sweep one full revolution, and
    expand/contract animate the blob size in place.
    """
    name = CLASS_NAMES[label]
    t = tau
    cx = np.full_like(t, start[0])
    cy = np.full_like(t, start[1])
    sigma = np.full_like(t, sigma_base * sigma_jitter)

    extent = 24.0 * speed
    radius = 10.0 * speed
    if name == "up":
        cy = start[1] + extent * (0.5 - t)
    elif name == "down":
        cy = start[1] - extent * (0.5 - t)
    elif name == "left":
        cx = start[0] + extent * (0.5 - t)
    elif name == "right":
        cx = start[0] - extent * (0.5 - t)
    elif name == "circle_cw":
        ang = phase + 2.0 * math.pi * t
        cx = start[0] + radius * np.cos(ang)
        cy = start[1] + radius * np.sin(ang)
    elif name == "circle_ccw":
        ang = phase - 2.0 * math.pi * t
        cx = start[0] + radius * np.cos(ang)
        cy = start[1] + radius * np.sin(ang)
    elif name == "expand":
        sigma = (3.0 + 6.0 * t) * sigma_jitter
    elif name == "contract":
        sigma = (9.0 - 6.0 * t) * sigma_jitter
    else:
        raise ValueError(f"unknown class label {label}")
    return cx, cy, sigma


def _depth_amplitude(sigma: np.ndarray) -> np.ndarray:
    # larger blob reads as closer, which this camera encodes as darker
    return np.clip(1.1 - sigma / 10.0, 0.15, 1.0)


def make_sample(seed: int, sample_id: int, class_count: int = len(CLASS_NAMES)) -> GestureSample:
    """Render one deterministic sample; label is ``sample_id % class_count``.

    The random stream is keyed by (seed, id), so any sample can be
    regenerated alone. Draw order is fixed: frame count, start jitter
    (x then y), speed, phase, blob size, size jitter, then pixel noise.
    """
    if not 1 <= class_count <= len(CLASS_NAMES):
        raise ValueError(f"class_count must be in [1, {len(CLASS_NAMES)}]")
    rng = np.random.default_rng([seed, sample_id])
    label = sample_id % class_count

    t_frames = int(rng.integers(MIN_FRAMES, MAX_FRAMES + 1))
    jitter = rng.uniform(-4.0, 4.0, size=2)
    speed = float(rng.uniform(0.8, 1.2))
    phase = float(rng.uniform(0.0, 2.0 * math.pi))
    sigma_base = float(rng.uniform(5.0, 7.0))
    sigma_jitter = float(rng.uniform(0.9, 1.1))

    center = FRAME_SIZE / 2.0 - 0.5
    start = np.array([center, center]) + jitter
    tau = np.arange(t_frames, dtype=np.float64) / max(t_frames - 1, 1)
    cx, cy, sigma = _class_trajectory(label, tau, start, speed, phase,
                                      sigma_base, sigma_jitter)

    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)
    d2 = ((xx[None] - cx[:, None, None]) ** 2
          + (yy[None] - cy[:, None, None]) ** 2)
    blob = np.exp(-d2 / (2.0 * sigma[:, None, None] ** 2))
    gray = 0.9 * blob
    depth = _depth_amplitude(sigma)[:, None, None] * blob

    frames = np.stack([gray, depth], axis=1)
    frames += rng.normal(0.0, NOISE_SIGMA, size=frames.shape)
    np.clip(frames, 0.0, 1.0, out=frames)
    # quantize through u8 exactly as the file loader does, so disk
    # roundtrips and in-isolation regeneration are bit-exact
    frames = np.round(frames * 255.0).astype(np.uint8).astype(np.float32) / 255.0

    keypoints = np.stack([cx, cy], axis=1)
    keypoints = np.clip(np.round(keypoints), 0, FRAME_SIZE - 1).astype(np.float32)
    return GestureSample(id=sample_id, label=label, frames=frames,
                         keypoints=keypoints)


def synth_generate(train_count: int, val_count: int, test_count: int,
                   seed: int, class_count: int = len(CLASS_NAMES)) -> GestureDataset:
    """Generate a dataset with contiguous train/val/test id ranges."""
    for name, n in (("train", train_count), ("val", val_count), ("test", test_count)):
        if n < 1:
            raise ValueError(f"{name} count must be >= 1, got {n}")
    manifest = DatasetManifest(class_count=class_count, train_count=train_count,
                               val_count=val_count, test_count=test_count,
                               seed=seed)
    total = train_count + val_count + test_count
    samples = [make_sample(seed, i, class_count) for i in range(total)]
    return GestureDataset(manifest, samples)


# ---------------------------------------------------------------------------
# windowing and chunking

def center_window_32(video: np.ndarray) -> np.ndarray:
    """Middle 32 frames of a (T, C, H, W) video; short videos are centered
    between zero frames (floor(pad/2) before, the remainder after)."""
    if video.ndim != 4 or video.shape[0] < 1:
        raise ValueError(f"video must be (T, C, H, W) with T >= 1, got {video.shape}")
    t = video.shape[0]
    if t == 32:
        return video
    if t > 32:
        lo = (t - 32) // 2
        return video[lo:lo + 32]
    before = (32 - t) // 2
    after = 32 - t - before
    pad = [(before, after)] + [(0, 0)] * 3
    return np.pad(video, pad)


def chunk4(video: np.ndarray) -> np.ndarray:
    """Split a (T, C, H, W) video into ceil(T/4) conv-ready blocks.

    Returns (n, C, 4, H, W); a final partial block is zero-padded at the
    end of its time axis.
    """
    if video.ndim != 4 or video.shape[0] < 1:
        raise ValueError(f"video must be (T, C, H, W) with T >= 1, got {video.shape}")
    t, c, h, w = video.shape
    n = -(-t // 4)
    if t != n * 4:
        video = np.pad(video, [(0, n * 4 - t), (0, 0), (0, 0), (0, 0)])
    return np.ascontiguousarray(
        video.reshape(n, 4, c, h, w).transpose(0, 2, 1, 3, 4))


# ---------------------------------------------------------------------------
# bilinear sampling shared by crops and augmentation

def _bilinear_gather(imgs: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (..., H, W) images at float coords, zero outside the frame."""
    h, w = imgs.shape[-2:]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0

    def tap(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = imgs[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return vals * inside

    top = tap(y0, x0) * (1 - fx) + tap(y0, x0 + 1) * fx
    bot = tap(y0 + 1, x0) * (1 - fx) + tap(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bot * fy


def _resize_bilinear(imgs: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (..., H, W) images with half-pixel-centered sampling."""
    h, w = imgs.shape[-2:]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_gather(imgs, grid_y, grid_x)


# ---------------------------------------------------------------------------
# input views

def _hand_view(sample: GestureSample) -> np.ndarray:
    if sample.keypoints is None or len(sample.keypoints) != sample.frame_count:
        raise ValueError("hand view needs one keypoint per frame")
    half = 16
    out = np.empty_like(sample.frames)
    for t in range(sample.frame_count):
        kx, ky = sample.keypoints[t]
        x0 = int(np.clip(round(float(kx)) - half, 0, FRAME_SIZE - 2 * half))
        y0 = int(np.clip(round(float(ky)) - half, 0, FRAME_SIZE - 2 * half))
        window = sample.frames[t, :, y0:y0 + 2 * half, x0:x0 + 2 * half]
        out[t] = _resize_bilinear(window, FRAME_SIZE, FRAME_SIZE)
    return out.astype(np.float32)


def make_input(sample: GestureSample, mode: str) -> np.ndarray:
    """Build the (T, C, 64, 64) network view of a sample.

    ``upper_body`` passes the full 2-channel frames through; ``hand``
    crops a 32x32 window around each frame's keypoint (clamped inside the
    frame) and resizes it back to 64x64; ``combined`` stacks both to 4
    channels (body-gray, body-depth, hand-gray, hand-depth).
    """
    if mode == "upper_body":
        return sample.frames
    if mode == "hand":
        return _hand_view(sample)
    if mode == "combined":
        return np.concatenate([sample.frames, _hand_view(sample)], axis=1)
    raise ValueError(f"unknown input mode {mode!r}")


# ---------------------------------------------------------------------------
# augmentation

def augment_with_params(sample: GestureSample, angle_deg: float,
                        shift: tuple[float, float], zoom: float) -> GestureSample:
    """Apply one rotation/translation/zoom to every frame and keypoint.

    The transform maps a point p (x, y) to zoom * R(p - c) + c + shift
    around the frame center c; frames are resampled bilinearly with zero
    fill and keypoints follow the same map, clamped into the frame.
    """
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    c = (FRAME_SIZE - 1) / 2.0
    tx, ty = float(shift[0]), float(shift[1])

    # inverse map: where each output pixel reads from in the source frame
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)
    dx = (xx - c - tx) / zoom
    dy = (yy - c - ty) / zoom
    src_x = cos_t * dx + sin_t * dy + c
    src_y = -sin_t * dx + cos_t * dy + c

    frames = _bilinear_gather(sample.frames.astype(np.float64), src_y, src_x)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)

    kx = sample.keypoints[:, 0].astype(np.float64) - c
    ky = sample.keypoints[:, 1].astype(np.float64) - c
    new_kx = zoom * (cos_t * kx - sin_t * ky) + c + tx
    new_ky = zoom * (sin_t * kx + cos_t * ky) + c + ty
    keypoints = np.stack([new_kx, new_ky], axis=1)
    keypoints = np.clip(keypoints, 0, FRAME_SIZE - 1).astype(np.float32)

    return GestureSample(id=sample.id, label=sample.label, frames=frames,
                         keypoints=keypoints)


def augment(sample: GestureSample, rng: np.random.Generator) -> GestureSample:
    """Draw one transform (angle, shift x/y, zoom) and apply it."""
    angle = float(rng.uniform(-AUGMENT_CONFIG["angle_deg"], AUGMENT_CONFIG["angle_deg"]))
    tx = float(rng.uniform(-AUGMENT_CONFIG["shift_px"], AUGMENT_CONFIG["shift_px"]))
    ty = float(rng.uniform(-AUGMENT_CONFIG["shift_px"], AUGMENT_CONFIG["shift_px"]))
    zoom = float(rng.uniform(*AUGMENT_CONFIG["zoom"]))
    return augment_with_params(sample, angle, (tx, ty), zoom)


# ---------------------------------------------------------------------------
# dataset file format

def save_dataset(dataset: GestureDataset, path: str) -> None:
    """Write the dataset file: header, manifest JSON, then u8 sample records."""
    w = Writer()
    w.raw(DATASET_MAGIC)
    w.u32(DATASET_VERSION)
    w.utf8_u32(dataset.manifest.to_json())
    w.u32(len(dataset.samples))
    for s in dataset.samples:
        t = s.frame_count
        if s.frames.shape != (t, 2, FRAME_SIZE, FRAME_SIZE):
            raise ValueError(f"sample {s.id} has frames {s.frames.shape}")
        w.u32(s.id)
        w.u16(s.label)
        w.u16(t)
        w.u8(2)
        w.u8(FRAME_SIZE)
        w.u8(FRAME_SIZE)
        w.array(np.clip(np.round(s.keypoints), 0, 255), np.uint8)
        w.array(np.round(s.frames * 255.0), np.uint8)
    atomic_write(path, w.getvalue())


def load_dataset(path: str) -> GestureDataset:
    with open(path, "rb") as f:
        r = Reader(f.read(), context=path)
    r.expect_magic(DATASET_MAGIC)
    r.expect_version(DATASET_VERSION)
    manifest = DatasetManifest.from_json(r.utf8_u32())
    count = r.u32()
    expected = manifest.train_count + manifest.val_count + manifest.test_count
    if count != expected:
        raise DecodeError(
            f"{path}: sample count {count} does not match manifest total {expected}")
    samples = []
    for _ in range(count):
        sid = r.u32()
        label = r.u16()
        t = r.u16()
        channels, h, ww = r.u8(), r.u8(), r.u8()
        if channels != 2 or h != FRAME_SIZE or ww != FRAME_SIZE:
            raise DecodeError(
                f"{path}: sample {sid} geometry {channels}x{h}x{ww} unsupported")
        if label >= manifest.class_count:
            raise DecodeError(
                f"{path}: sample {sid} label {label} out of range")
        if t < 1:
            raise DecodeError(f"{path}: sample {sid} has no frames")
        keypoints = r.array(np.uint8, t * 2).reshape(t, 2).astype(np.float32)
        pixels = r.array(np.uint8, t * 2 * FRAME_SIZE * FRAME_SIZE)
        frames = (pixels.reshape(t, 2, FRAME_SIZE, FRAME_SIZE)
                  .astype(np.float32) / 255.0)
        samples.append(GestureSample(id=sid, label=label, frames=frames,
                                     keypoints=keypoints))
    r.expect_eof()
    return GestureDataset(manifest, samples)
