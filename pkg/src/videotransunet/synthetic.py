"""Synthetic swallow-study videos, snippet extraction, splitting and augmentation.

Each sequence shows a static tube-shaped pharynx and an elliptical bolus
that enters at the top, descends along the tube and leaves at the bottom.
Frames carry additive Gaussian noise and, with some probability, a blanked
rectangular patch; masks are never occluded.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import fileio
from .autodiff import serialize
from .decoder import MaskPair
from .encoder import check_extent


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    frame_size: tuple = (64, 64)
    sequence_length: int = 20
    noise_sigma: float = 0.03
    occlusion_prob: float = 0.3
    occlusion_extent: tuple = (0.30, 0.45)  # patch side as a fraction of the frame
    bolus_speed: tuple = (4.0, 6.0)  # pixels per frame at 64x64

    def __post_init__(self):
        object.__setattr__(self, "frame_size", tuple(int(v) for v in self.frame_size))
        check_extent(*self.frame_size)
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be positive")
        if not 0 <= self.occlusion_prob <= 1:
            raise ValueError("occlusion_prob must lie in [0, 1]")


@dataclass
class FrameStack:
    frames: np.ndarray  # (t, H, W)
    center: int
    target: MaskPair  # centre-frame masks, (H, W) each
    seq_id: str = ""
    frame_index: int = 0


@dataclass
class Sequence:
    seq_id: str
    frames: np.ndarray  # (L, H, W) float32 in [0, 1]
    masks: np.ndarray  # (L, 2, H, W) float32 in {0, 1}; heads bolus, pharynx
    occluded: np.ndarray = field(default=None)  # (L, H, W) bool, True where blanked


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def generate_sequence(spec: SceneSpec, seq_id: str = "seq_000", with_occlusion_map: bool = False):
    """Render one sequence; returns ``(frames, masks)`` with masks ``(L, 2, H, W)``.

    With ``with_occlusion_map`` a third array marks the blanked pixels.
    """
    rng = np.random.default_rng(spec.seed)
    # occluders draw from their own stream so scenes do not depend on occlusion settings
    occ_rng = np.random.default_rng([spec.seed, 1])
    h, w = spec.frame_size
    scale = h / 64.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    background = 0.25 + 0.08 * _smooth_field(rng, (h, w), 6 * scale)

    cx = w * rng.uniform(0.4, 0.6)
    amp = scale * rng.uniform(2.0, 5.0)
    period = h * rng.uniform(0.8, 1.6)
    phase = rng.uniform(0, 2 * np.pi)
    top = h * rng.uniform(0.04, 0.14)
    bottom = h * rng.uniform(0.86, 0.96)
    half_w0 = scale * rng.uniform(5.0, 7.5)
    half_w1 = scale * rng.uniform(0.5, 1.5)

    def centerline(y):
        return cx + amp * np.sin(2 * np.pi * y / period + phase)

    half_width = half_w0 + half_w1 * np.sin(2 * np.pi * yy / h * 1.5 + phase)
    pharynx = (np.abs(xx - centerline(yy)) <= half_width) & (yy >= top) & (yy <= bottom)

    semi_x = scale * rng.uniform(4.0, 6.5)
    semi_y = scale * rng.uniform(6.0, 9.0)
    speed = scale * rng.uniform(*spec.bolus_speed)
    entry = int(rng.integers(1, 5))
    start_y = -semi_y

    n = spec.sequence_length
    frames = np.empty((n, h, w), np.float32)
    masks = np.zeros((n, 2, h, w), np.float32)
    occluded = np.zeros((n, h, w), bool)
    for k in range(n):
        by = start_y + speed * (k - entry)
        if k >= entry and by - semi_y < h:
            jitter = 1.0 + 0.08 * rng.standard_normal(2)
            stretch = 1.0 + 0.25 * np.clip(by / h, 0, 1)
            ax_x = semi_x * jitter[0]
            ax_y = semi_y * jitter[1] * stretch
            bx = centerline(np.clip(by, 0, h - 1)) + scale * rng.normal(0, 0.5)
            bolus = ((xx - bx) / ax_x) ** 2 + ((yy - by) / ax_y) ** 2 <= 1.0
        else:
            rng.standard_normal(3)  # keep the stream aligned across frames
            bolus = np.zeros((h, w), bool)
        img = background + 0.25 * pharynx + 0.45 * bolus
        img = img + spec.noise_sigma * rng.standard_normal((h, w))
        if occ_rng.random() < spec.occlusion_prob:
            side_h = int(round(h * occ_rng.uniform(*spec.occlusion_extent)))
            side_w = int(round(w * occ_rng.uniform(*spec.occlusion_extent)))
            y0 = int(occ_rng.integers(0, h - side_h + 1))
            x0 = int(occ_rng.integers(0, w - side_w + 1))
            occluded[k, y0 : y0 + side_h, x0 : x0 + side_w] = True
            img[occluded[k]] = 0.0
        frames[k] = np.clip(img, 0.0, 1.0)
        masks[k, 0] = bolus
        masks[k, 1] = pharynx
    if with_occlusion_map:
        return frames, masks, occluded
    return frames, masks


def make_sequences(base: SceneSpec, count: int) -> list:
    """``count`` sequences whose seeds derive from ``base.seed``."""
    out = []
    for k in range(count):
        seed = int(np.random.SeedSequence([base.seed, k]).generate_state(1)[0])
        spec = SceneSpec(**{**asdict(base), "seed": seed})
        frames, masks, occ = generate_sequence(spec, with_occlusion_map=True)
        out.append(Sequence(f"seq_{k:03d}", frames, masks, occ))
    return out


def extract_snippets(frames, masks, t: int, stride: int = 1, seq_id: str = "") -> list:
    """One centre-aligned stack per ``stride``-th frame, edges padded by replication."""
    if t < 1 or t % 2 == 0:
        raise ValueError(f"snippet length must be odd and >= 1, got {t}")
    frames = np.asarray(frames)
    masks = np.asarray(masks)
    n = frames.shape[0]
    half = (t - 1) // 2
    stacks = []
    for c in range(0, n, stride):
        idx = np.clip(np.arange(c - half, c + half + 1), 0, n - 1)
        stacks.append(
            FrameStack(
                frames=frames[idx],
                center=half,
                target=MaskPair(masks[c, 0], masks[c, 1]),
                seq_id=seq_id,
                frame_index=c,
            )
        )
    return stacks


def split_dataset(sequences, fractions=(0.70, 0.15, 0.15), seed: int = 0):
    """Split whole sequences into train/val/test, deterministic under ``seed``."""
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    items = list(sequences)
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(round(fractions[0] * len(items)))
    n_val = int(round(fractions[1] * len(items)))
    n_val = min(n_val, len(items) - n_train)
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train : n_train + n_val]]
    test = [items[i] for i in order[n_train + n_val :]]
    return train, val, test


# ---------------------------------------------------------------- augmentation
def rotate(image: np.ndarray, degrees: float, order: int) -> np.ndarray:
    """Rotate about the image centre; outside samples are filled with zero."""
    h, w = image.shape
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src_y = c * (yy - cy) - s * (xx - cx) + cy
    src_x = s * (yy - cy) + c * (xx - cx) + cx
    out = ndimage.map_coordinates(image.astype(np.float64), [src_y, src_x], order=order, mode="constant", cval=0.0)
    return out.astype(image.dtype)


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def augment(stack: FrameStack, seed, max_degrees: float = 10.0) -> FrameStack:
    """Random rotation in +-``max_degrees`` and horizontal flip (p=0.5), shared by frames and masks."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    angle = rng.uniform(-max_degrees, max_degrees)
    flip = rng.random() < 0.5

    def frame_op(img):
        out = rotate(img, angle, order=1)
        return flip_horizontal(out) if flip else out

    def mask_op(m):
        out = rotate(m, angle, order=0)
        return flip_horizontal(out) if flip else out

    frames = np.stack([frame_op(f) for f in stack.frames])
    target = MaskPair(mask_op(np.asarray(stack.target.bolus)), mask_op(np.asarray(stack.target.pharynx)))
    return FrameStack(frames, stack.center, target, stack.seq_id, stack.frame_index)


# ----------------------------------------------------------------- dataset io
@dataclass
class Dataset:
    root: str
    sequences: dict  # seq_id -> Sequence
    splits: dict  # split name -> list of seq_ids
    manifest: dict

    def split(self, name: str) -> list:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return [self.sequences[s] for s in self.splits[name]]

    def snippets(self, name: str, t: int) -> list:
        out = []
        for seq in self.split(name):
            out.extend(extract_snippets(seq.frames, seq.masks, t, seq_id=seq.seq_id))
        return out


MANIFEST = "manifest.txt"


def write_dataset(root, sequences, spec: SceneSpec, split_seed: int) -> dict:
    os.makedirs(root, exist_ok=True)
    train, val, test = split_dataset([s.seq_id for s in sequences], seed=split_seed)
    for seq in sequences:
        fdir = os.path.join(root, seq.seq_id, "frames")
        mdir = os.path.join(root, seq.seq_id, "masks")
        os.makedirs(fdir, exist_ok=True)
        os.makedirs(mdir, exist_ok=True)
        for k in range(seq.frames.shape[0]):
            serialize.save(os.path.join(fdir, f"{k}.vtt1"), seq.frames[k])
            fileio.write_mask_pgm(os.path.join(mdir, f"{k}_bolus.pgm"), seq.masks[k, 0])
            fileio.write_mask_pgm(os.path.join(mdir, f"{k}_pharynx.pgm"), seq.masks[k, 1])
    manifest = {
        "format": "vfss-synthetic-1",
        "seed": spec.seed,
        "sequences": len(sequences),
        "frame_height": spec.frame_size[0],
        "frame_width": spec.frame_size[1],
        "sequence_length": spec.sequence_length,
        "noise_sigma": spec.noise_sigma,
        "occlusion_prob": spec.occlusion_prob,
        "occlusion_extent": ",".join(str(v) for v in spec.occlusion_extent),
        "bolus_speed": ",".join(str(v) for v in spec.bolus_speed),
        "split_seed": split_seed,
        "split.train": ",".join(train),
        "split.val": ",".join(val),
        "split.test": ",".join(test),
    }
    fileio.write_keyvalue(os.path.join(root, MANIFEST), manifest)
    return manifest


def load_dataset(root) -> Dataset:
    path = os.path.join(root, MANIFEST)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = fileio.read_keyvalue(path)
    splits = {}
    for name in ("train", "val", "test"):
        raw = manifest.get(f"split.{name}", "")
        splits[name] = [s for s in raw.split(",") if s]
    sequences = {}
    for seq_id in sorted(set(sum(splits.values(), []))):
        fdir = os.path.join(root, seq_id, "frames")
        mdir = os.path.join(root, seq_id, "masks")
        n = len([f for f in os.listdir(fdir) if f.endswith(".vtt1")])
        frames = np.stack([serialize.load(os.path.join(fdir, f"{k}.vtt1")) for k in range(n)])
        masks = np.stack(
            [
                np.stack(
                    [
                        fileio.read_mask_pgm(os.path.join(mdir, f"{k}_bolus.pgm")),
                        fileio.read_mask_pgm(os.path.join(mdir, f"{k}_pharynx.pgm")),
                    ]
                )
                for k in range(n)
            ]
        )
        sequences[seq_id] = Sequence(seq_id, frames, masks)
    return Dataset(str(root), sequences, splits, manifest)
