"""Inference protocols, score files, ensembling, and challenge metrics.

Scores are pre-softmax logits everywhere: per-clip records hold one score
vector per task, ensembling is the elementwise mean across models, and
two-clip inference is the elementwise mean of two deterministically
sampled clips. Metrics (top-1/top-5 accuracy, macro precision/recall) are
computed in exact rational arithmetic and converted to float percentages
at the end, so an independent oracle lands on identical values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .videodata import SamplerConfig, bilinear_resize, sample_indices

# short-side presets used by the full-scale backbones this family of
# models is usually built on; desk-scale runs default to the training size
FULL_SCALE_SHORT_SIDES = {"bninception": 256, "inceptionv3": 261}

TASKS = ("verb", "noun", "action")


@dataclass
class ScoreRecord:
    clip_id: str
    verb: np.ndarray
    noun: np.ndarray
    action: np.ndarray

    def task(self, name: str) -> np.ndarray:
        return getattr(self, name)


# -- inference protocols -----------------------------------------------------------


def rescale_short_side(frames: np.ndarray, short_side: int) -> np.ndarray:
    """Bilinear rescale of (T, 3, H, W) so min(H, W) == short_side."""
    h, w = frames.shape[2], frames.shape[3]
    if min(h, w) == short_side:
        return frames
    scale = short_side / min(h, w)
    return bilinear_resize(frames, max(1, round(h * scale)), max(1, round(w * scale)))


def center_crop(frames: np.ndarray, size: int) -> np.ndarray:
    h, w = frames.shape[2], frames.shape[3]
    if h < size or w < size:
        raise ValueError(f"cannot center-crop {h}x{w} frames to {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return frames[:, :, top:top + size, left:left + size]


def standard_scores(model, frames: np.ndarray) -> tuple:
    """Plain forward pass on one sampled clip (K, 3, H, W)."""
    batch = Tensor(frames[None])
    sv, sn, sa = model.forward(batch, training=False)
    return sv.data[0], sn.data[0], sa.data[0]


def fully_conv_scores(model, frames: np.ndarray, short_side: int) -> tuple:
    """Fully-convolutional spatial inference on one sampled clip.

    Frames are rescaled so the shorter side matches ``short_side``, the
    backbone runs on the full map, the classifier is applied at every
    spatial position of the temporally pooled feature map, and the score
    map is spatially averaged. With a 1x1 feature map this follows the
    exact float path of :func:`standard_scores`.
    """
    minimum = model.min_input_size()
    if short_side < minimum:
        raise ValueError(f"short side {short_side} below the network minimum {minimum}")
    frames = rescale_short_side(frames, short_side)
    feats = model.features(Tensor(frames[None]))          # (1, T, C, h, w)
    fmap = T.mean(feats, axis=1)                          # (1, C, h, w)
    _, c, h, w = fmap.shape
    per_pos = Tensor(np.ascontiguousarray(fmap.data.reshape(c, h * w).T))  # (h*w, C)
    sv, sn, sa = model.head.apply(per_pos, per_pos, per_pos)
    return tuple(s.data.mean(axis=0) for s in (sv, sn, sa))


def single_clip_scores(model, frames: np.ndarray, *, fully_conv: bool,
                       short_side: int, crop_size: int) -> tuple:
    if fully_conv:
        return fully_conv_scores(model, frames, short_side)
    return standard_scores(model, center_crop(frames, crop_size))


def two_clip_infer(model, clip, sampler: SamplerConfig, *, fully_conv: bool = False,
                   short_side: int | None = None, crop_size: int | None = None) -> ScoreRecord:
    """Average the scores of two deterministic clips.

    The clips are segment-center samples of the first and second temporal
    halves of the video.
    """
    frames = clip.frames
    total = frames.shape[0]
    half = total // 2
    if half < sampler.num_frames:
        raise ValueError(
            f"video too short for two-clip sampling ({total} frames, need "
            f"{2 * sampler.num_frames})"
        )
    center = SamplerConfig(sampler.num_frames, "center_per_segment")
    crop = crop_size or frames.shape[2]
    side = short_side or min(frames.shape[2], frames.shape[3])
    halves = [frames[:half], frames[half:]]
    scored = [
        single_clip_scores(
            model, part[sample_indices(part.shape[0], center)],
            fully_conv=fully_conv, short_side=side, crop_size=crop)
        for part in halves
    ]
    avg = [(a + b) / 2.0 for a, b in zip(*scored)]
    return ScoreRecord(clip.clip_id, *avg)


def one_clip_infer(model, clip, sampler: SamplerConfig, *, fully_conv: bool = False,
                   short_side: int | None = None, crop_size: int | None = None) -> ScoreRecord:
    frames = clip.frames
    center = SamplerConfig(sampler.num_frames, "center_per_segment")
    crop = crop_size or frames.shape[2]
    side = short_side or min(frames.shape[2], frames.shape[3])
    scores = single_clip_scores(
        model, frames[sample_indices(frames.shape[0], center)],
        fully_conv=fully_conv, short_side=side, crop_size=crop)
    return ScoreRecord(clip.clip_id, *scores)


# -- ensembling ---------------------------------------------------------------------


def ensemble(record_sets: list) -> list:
    """Elementwise mean of per-model scores, clip by clip.

    Every set must cover the same clip_ids with matching vector lengths.
    Per-element sums use exact accumulation (math.fsum), so the result is
    independent of the order the models are given in.
    """
    if not record_sets:
        raise ValueError("ensemble: no score sets given")
    by_id = [{r.clip_id: r for r in records} for records in record_sets]
    base_ids = list(by_id[0])
    base_set = set(base_ids)
    for k, m in enumerate(by_id[1:], start=2):
        if set(m) != base_set:
            missing = sorted(base_set ^ set(m))[0]
            raise ValueError(f"ensemble: clip coverage mismatch in set {k} (clip {missing!r})")
    n = len(record_sets)
    out = []
    for cid in base_ids:
        members = [m[cid] for m in by_id]
        merged = {}
        for task in TASKS:
            vecs = [r.task(task) for r in members]
            length = len(vecs[0])
            for k, v in enumerate(vecs):
                if len(v) != length:
                    raise ValueError(
                        f"ensemble: {task} length mismatch for clip {cid!r} "
                        f"({len(v)} vs {length})"
                    )
            merged[task] = np.array(
                [math.fsum(v[i] for v in vecs) / n for i in range(length)]
            )
        out.append(ScoreRecord(cid, merged["verb"], merged["noun"], merged["action"]))
    return out


# -- score files ---------------------------------------------------------------------


def _format_floats(values) -> str:
    return "[" + ", ".join(format(float(v), ".17g") for v in values) + "]"


def write_scores(path, records) -> None:
    """JSON-lines score file; floats carry 17 significant digits, so the
    read side reproduces every value bit-exactly."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(
                '{"clip_id": ' + json.dumps(r.clip_id)
                + ', "verb": ' + _format_floats(r.verb)
                + ', "noun": ' + _format_floats(r.noun)
                + ', "action": ' + _format_floats(r.action) + "}\n"
            )


def read_scores(path) -> list:
    records = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                record = ScoreRecord(
                    clip_id=rec["clip_id"],
                    verb=np.array([float(v) for v in rec["verb"]], dtype=np.float64),
                    noun=np.array([float(v) for v in rec["noun"]], dtype=np.float64),
                    action=np.array([float(v) for v in rec["action"]], dtype=np.float64),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}: malformed score line {lineno}: {exc}") from exc
            if record.clip_id in seen:
                raise ValueError(f"{path}: duplicate clip_id {record.clip_id!r} at line {lineno}")
            seen.add(record.clip_id)
            records.append(record)
    return records


# -- metrics --------------------------------------------------------------------------


@dataclass
class TaskMetrics:
    top1: float
    top5: float
    precision: float
    recall: float


@dataclass
class MetricsReport:
    split: str
    verb: TaskMetrics
    noun: TaskMetrics
    action: TaskMetrics

    def task(self, name: str) -> TaskMetrics:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            **{t: vars(self.task(t)) for t in TASKS},
        }


def topk_classes(scores: np.ndarray, k: int) -> list:
    """Indices of the k highest scores; ties go to the lower class index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def _task_metrics(preds: dict, labels: dict, k_top: int = 5) -> TaskMetrics:
    n = len(labels)
    top1 = sum(1 for cid, lab in labels.items() if preds[cid][0] == lab)
    topk = sum(1 for cid, lab in labels.items() if lab in preds[cid][:k_top])
    present = sorted(set(labels.values()))
    tp = {c: 0 for c in present}
    fp = {c: 0 for c in present}
    fn = {c: 0 for c in present}
    for cid, lab in labels.items():
        pred = preds[cid][0]
        if pred == lab:
            tp[lab] += 1
        else:
            fn[lab] += 1
            if pred in fp:
                fp[pred] += 1
    precision = Fraction(0)
    recall = Fraction(0)
    for c in present:
        denom_p = tp[c] + fp[c]
        precision += Fraction(tp[c], denom_p) if denom_p else Fraction(0)
        recall += Fraction(tp[c], tp[c] + fn[c])
    n_classes = len(present)
    return TaskMetrics(
        top1=float(Fraction(100 * top1, n)),
        top5=float(Fraction(100 * topk, n)),
        precision=float(100 * precision / n_classes),
        recall=float(100 * recall / n_classes),
    )


def compute_metrics(records, labels: dict, split: str = "") -> MetricsReport:
    """Challenge metrics per task.

    labels: clip_id -> (verb, noun, action). Macro precision/recall
    average over the classes present in the ground truth; a class that is
    never predicted contributes precision 0.
    """
    for r in records:
        if r.clip_id not in labels:
            raise ValueError(f"missing label for clip {r.clip_id!r}")
    by_task = {}
    for t_idx, task in enumerate(TASKS):
        preds = {r.clip_id: topk_classes(r.task(task), 5) for r in records}
        task_labels = {r.clip_id: labels[r.clip_id][t_idx] for r in records}
        by_task[task] = _task_metrics(preds, task_labels)
    return MetricsReport(split=split, verb=by_task["verb"], noun=by_task["noun"],
                         action=by_task["action"])


def format_metrics_table(reports: list) -> str:
    """Fixed-width table: one row per split, metric groups by task."""
    groups = (("Top-1 Accuracy (%)", "top1"), ("Top-5 Accuracy (%)", "top5"),
              ("Precision (%)", "precision"), ("Recall (%)", "recall"))
    sub = "".join(f"{h:>8s}" for h in ("Verb", "Noun", "Action"))
    header1 = f"{'':12s}" + "".join(f"| {title:<24s} " for title, _ in groups)
    header2 = f"{'Split':<12s}" + f"| {sub} " * len(groups)
    lines = [header1.rstrip(), header2.rstrip(), "-" * len(header2.rstrip())]
    for rep in reports:
        cells = []
        for _, f in groups:
            block = "".join(f"{getattr(rep.task(t), f):>8.2f}" for t in TASKS)
            cells.append(f"| {block} ")
        lines.append((f"{rep.split:<12s}" + "".join(cells)).rstrip())
    return "\n".join(lines)
