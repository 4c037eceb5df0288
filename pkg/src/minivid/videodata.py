"""Synthetic video clips with temporally discriminative labels, segment
frame sampling, and training augmentation.

Each clip shows one shape (the noun) drifting across a textured background
with one motion pattern (the verb). The world is toroidal: shapes wrap
around the frame edge and start positions are uniform over the whole
image, so the marginal distribution of any single frame is identical for
every motion class. Telling left from right (or anything from static)
requires comparing frames. The unseen-background test split draws its
textures from a pool disjoint from the training pool.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .serialization import read_array, write_array

VERBS = ("left", "right", "up", "down", "static")
NOUNS = ("square", "cross", "bar")
SPLITS = ("train", "test_s1", "test_s2")

_DIRECTIONS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "up": (0.0, -1.0),
    "down": (0.0, 1.0),
    "static": (0.0, 0.0),
}

# (x half-extent, y half-extent) of the soft rectangles composing each shape
_SHAPE_PARTS = {
    "square": [(4.0, 4.0)],
    "bar": [(6.5, 2.0)],
    "cross": [(6.5, 1.75), (1.75, 6.5)],
}


@dataclass
class VideoClip:
    frames: np.ndarray          # (T, 3, H, W) float32 in [0, 1]
    verb_label: int
    noun_label: int
    action_label: int
    clip_id: str
    split: str


@dataclass
class SyntheticConfig:
    height: int = 32
    width: int = 32
    length: int = 40            # raw frames per clip; both samplers fit without replacement
    verbs: tuple = VERBS
    nouns: tuple = NOUNS
    split_fractions: tuple = (0.7, 0.15, 0.15)
    noise: float = 0.008
    speed: float = 1.2          # px per raw frame; 1.5 toroidal wraps per clip
    textures_per_pool: int = 8


@dataclass
class SamplerConfig:
    num_frames: int = 16
    mode: str = "random_per_segment"   # or "center_per_segment"


def _stream(seed: int, *tags) -> np.random.Generator:
    entropy = [seed] + [t if isinstance(t, int) else zlib.crc32(str(t).encode()) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _texture_pool(seed: int, pool: str, count: int, h: int, w: int) -> np.ndarray:
    """Smooth low-frequency color fields in [0, 0.45], darker than any shape."""
    rng = _stream(seed, "textures", pool)
    coarse = rng.uniform(0.0, 0.45, size=(count, 3, 5, 5)).astype(np.float32)
    return bilinear_resize(coarse.reshape(count * 3, 1, 5, 5), h, w).reshape(count, 3, h, w)


def _wrapped_offsets(n: int, center: float) -> np.ndarray:
    idx = np.arange(n, dtype=np.float64)
    return (idx - center + n / 2.0) % n - n / 2.0


def _shape_mask(noun: str, cx: float, cy: float, h: int, w: int) -> np.ndarray:
    """Antialiased wrap-around mask in [0, 1] centered at (cx, cy)."""
    dx = np.abs(_wrapped_offsets(w, cx))
    dy = np.abs(_wrapped_offsets(h, cy))
    mask = np.zeros((h, w))
    for hx, hy in _SHAPE_PARTS[noun]:
        fx = np.clip(hx + 0.5 - dx, 0.0, 1.0)
        fy = np.clip(hy + 0.5 - dy, 0.0, 1.0)
        mask = np.maximum(mask, np.minimum(fy[:, None], fx[None, :]))
    return mask


def action_pairs(verbs, nouns) -> list:
    return [(v, n) for v in range(len(verbs)) for n in range(len(nouns))]


def _split_schedule(n_clips: int, fractions) -> list:
    counts = [int(round(f * n_clips)) for f in fractions[:-1]]
    counts.append(n_clips - sum(counts))
    if min(counts) < 0:
        raise ValueError(f"split fractions {fractions} do not fit {n_clips} clips")
    schedule = []
    for split, count in zip(SPLITS, counts):
        schedule.extend([split] * count)
    return schedule


def generate_synthetic(seed: int, n_clips: int, cfg: SyntheticConfig | None = None) -> list:
    """Deterministic synthetic dataset; same seed means bitwise-equal clips.

    Verb/noun pairs cycle round-robin, so label balance is within one clip
    of uniform. Action labels index (verb, noun) pairs by first appearance
    in the train split.
    """
    cfg = cfg or SyntheticConfig()
    if len(cfg.verbs) < 2 or len(cfg.nouns) < 2:
        raise ValueError("need at least 2 verbs and 2 nouns")
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    h, w, t_len = cfg.height, cfg.width, cfg.length
    seen = _texture_pool(seed, "seen", cfg.textures_per_pool, h, w)
    unseen = _texture_pool(seed, "unseen", cfg.textures_per_pool, h, w)
    pairs = action_pairs(cfg.verbs, cfg.nouns)
    schedule = _split_schedule(n_clips, cfg.split_fractions)

    # action vocabulary: first appearance order within the train split
    vocab: dict[tuple, int] = {}
    for i in range(n_clips):
        if schedule[i] == "train":
            pair = pairs[i % len(pairs)]
            if pair not in vocab:
                vocab[pair] = len(vocab)
    for i in range(n_clips):
        if pairs[i % len(pairs)] not in vocab:
            raise ValueError(
                "train split too small: some (verb, noun) pairs never appear in it"
            )

    clips = []
    for i in range(n_clips):
        verb_i, noun_i = pairs[i % len(pairs)]
        split = schedule[i]
        rng = _stream(seed, "clip", i)
        pool = unseen if split == "test_s2" else seen
        texture = pool[rng.integers(len(pool))]
        # random toroidal phase so clips do not share the texture alignment
        texture = np.roll(texture, (int(rng.integers(h)), int(rng.integers(w))), axis=(1, 2))
        color = rng.uniform(0.6, 1.0, size=3).astype(np.float32)
        x0 = rng.uniform(0.0, w)
        y0 = rng.uniform(0.0, h)
        dx, dy = _DIRECTIONS[cfg.verbs[verb_i]]
        frames = np.empty((t_len, 3, h, w), dtype=np.float32)
        for t in range(t_len):
            cx = (x0 + dx * cfg.speed * t) % w
            cy = (y0 + dy * cfg.speed * t) % h
            mask = _shape_mask(cfg.nouns[noun_i], cx, cy, h, w).astype(np.float32)
            frame = texture * (1.0 - mask) + color[:, None, None] * mask
            if cfg.noise > 0:
                frame = frame + rng.normal(0.0, cfg.noise, size=frame.shape).astype(np.float32)
            frames[t] = np.clip(frame, 0.0, 1.0)
        clips.append(VideoClip(
            frames=frames,
            verb_label=verb_i,
            noun_label=noun_i,
            action_label=vocab[(verb_i, noun_i)],
            clip_id=f"clip_{seed:04d}_{i:05d}",
            split=split,
        ))
    return clips


# -- frame sampling --------------------------------------------------------------


def segment_bounds(total: int, num_segments: int, i: int) -> tuple:
    return (i * total) // num_segments, ((i + 1) * total) // num_segments


def sample_indices(total: int, cfg: SamplerConfig, rng: np.random.Generator | None = None):
    """Strictly increasing frame indices, one per equal segment.

    Random mode draws uniformly inside each segment; center mode takes the
    segment midpoint floor((start + end) / 2) with end exclusive.
    """
    k = cfg.num_frames
    if k > total:
        raise ValueError(f"cannot sample {k} frames from a {total}-frame clip")
    indices = []
    for i in range(k):
        start, end = segment_bounds(total, k, i)
        if cfg.mode == "center_per_segment":
            indices.append((start + end) // 2)
        elif cfg.mode == "random_per_segment":
            if rng is None:
                raise ValueError("random sampling requires an rng")
            indices.append(int(rng.integers(start, end)))
        else:
            raise ValueError(f"unknown sampling mode {cfg.mode!r}")
    return np.asarray(indices, dtype=np.int64)


def sample_frames(clip, cfg: SamplerConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    return frames[sample_indices(frames.shape[0], cfg, rng)]


# -- augmentation ----------------------------------------------------------------


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    scale_range: tuple = (0.8, 1.25)


@dataclass
class AugmentParams:
    hflip: bool
    scale: float
    offset_y: int
    offset_x: int


def bilinear_resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes of (N, C, H, W) with bilinear weights."""
    n, c, h, w = frames.shape
    if (h, w) == (out_h, out_w):
        return frames.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(frames.dtype)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(frames.dtype)
    top = frames[:, :, y0][:, :, :, x0] * (1 - wx) + frames[:, :, y0][:, :, :, x1] * wx
    bot = frames[:, :, y1][:, :, :, x0] * (1 - wx) + frames[:, :, y1][:, :, :, x1] * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


def draw_augment_params(rng: np.random.Generator, cfg: AugmentConfig,
                        height: int, width: int) -> AugmentParams:
    """One transform per clip; every frame gets the same parameters."""
    hflip = bool(rng.random() < cfg.flip_prob)
    scale = float(rng.uniform(*cfg.scale_range))
    new_h = max(1, round(height * scale))
    new_w = max(1, round(width * scale))
    return AugmentParams(
        hflip=hflip,
        scale=scale,
        offset_y=int(rng.integers(new_h)),
        offset_x=int(rng.integers(new_w)),
    )


def apply_augment(frames: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Flip / scale / wrap-crop back to the original size.

    Downscaled clips are tiled toroidally before the crop (the synthetic
    world wraps, so the seam is as natural as any other translation).
    Pixel range and shape are preserved.
    """
    t, c, h, w = frames.shape
    out = frames[:, :, :, ::-1] if params.hflip else frames
    new_h = max(1, round(h * params.scale))
    new_w = max(1, round(w * params.scale))
    out = bilinear_resize(out, new_h, new_w)
    rows = (params.offset_y + np.arange(h)) % new_h
    cols = (params.offset_x + np.arange(w)) % new_w
    return np.ascontiguousarray(out[:, :, rows][:, :, :, cols])


def augment(frames: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig | None = None):
    """Training augmentation; returns (frames, params used).

    A horizontal flip changes the apparent motion direction, so callers
    must relabel left/right clips via :func:`flip_verb_label`.
    """
    cfg = cfg or AugmentConfig()
    params = draw_augment_params(rng, cfg, frames.shape[2], frames.shape[3])
    return apply_augment(frames, params), params


def flip_verb_label(verb: int, verbs=VERBS) -> int:
    name = verbs[verb]
    swap = {"left": "right", "right": "left"}
    return verbs.index(swap[name]) if name in swap else verb


# -- manifest + on-disk dataset ----------------------------------------------------


@dataclass
class ManifestEntry:
    clip_id: str
    path: str
    verb: int
    noun: int
    action: int
    split: str


def write_dataset(clips, out_dir, force: bool = False) -> dict:
    """Store clips as raw tensor files plus a JSON-lines manifest.

    Returns per-split clip counts.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use force)")
    (out / "clips").mkdir(parents=True, exist_ok=True)
    counts: dict[str, int] = {}
    with open(out / "manifest.jsonl", "w") as fh:
        for clip in clips:
            rel = f"clips/{clip.clip_id}.ten"
            write_array(out / rel, clip.frames)
            fh.write(json.dumps({
                "clip_id": clip.clip_id, "path": rel, "verb": clip.verb_label,
                "noun": clip.noun_label, "action": clip.action_label,
                "split": clip.split,
            }) + "\n")
            counts[clip.split] = counts.get(clip.split, 0) + 1
    return counts


def read_manifest(path) -> list:
    entries = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                entry = ManifestEntry(
                    clip_id=rec["clip_id"], path=rec["path"], verb=int(rec["verb"]),
                    noun=int(rec["noun"]), action=int(rec["action"]), split=rec["split"],
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}: malformed manifest line {lineno}: {exc}") from exc
            if entry.clip_id in seen:
                raise ValueError(f"{path}: duplicate clip_id {entry.clip_id!r} at line {lineno}")
            seen.add(entry.clip_id)
            entries.append(entry)
    return entries


def load_clip(entry: ManifestEntry, root) -> VideoClip:
    frames = read_array(Path(root) / entry.path)
    return VideoClip(frames=frames, verb_label=entry.verb, noun_label=entry.noun,
                     action_label=entry.action, clip_id=entry.clip_id, split=entry.split)


def vocab_from_manifest(entries) -> dict:
    """(verb, noun) -> action index, first-appearance order over train entries."""
    vocab: dict[tuple, int] = {}
    for e in entries:
        if e.split == "train" and (e.verb, e.noun) not in vocab:
            vocab[(e.verb, e.noun)] = e.action
    return vocab
