"""Synthetic video tasks.

motion8
    A bright square on a dim noisy background moves in a straight line at one
    pixel per frame. The label is the direction index k (angle 45k degrees,
    counter-clockwise, image y axis pointing up).

flash-order
    A red or green square flashes for the whole first quarter of the clip and
    again for the whole last quarter. The label is 2*first + last (red=0,
    green=1). A distractor flash of random colour, position and length sits in
    the middle half, so the class depends on *when* each colour appears.

Every clip is a pure function of (task, seed, index).
"""

import zlib
from dataclasses import dataclass

import numpy as np

from ..container import read_container, write_container

TASKS = {"motion8": 8, "flash-order": 4}
COLORS = np.array([[0.95, 0.1, 0.1], [0.1, 0.95, 0.1]])


class TaskError(ValueError):
    pass


def num_classes(task_id):
    try:
        return TASKS[task_id]
    except KeyError:
        raise TaskError(f"unknown task {task_id!r}; choose from {sorted(TASKS)}") from None


def clip_rng(task_id, seed, index):
    return np.random.default_rng([seed, zlib.crc32(task_id.encode()), index])


def _background(rng, t, h, w, lo, hi):
    level = rng.uniform(lo, hi)
    return level + rng.normal(0.0, 0.03, size=(3, t, h, w))


def _square_size(h, w):
    return max(2, min(h, w) // 5)


def _motion8(rng, label, t, h, w):
    pix = _background(rng, t, h, w, 0.0, 0.2)
    s = _square_size(h, w)
    color = rng.uniform(0.6, 1.0, size=3)
    ang = label * np.pi / 4
    dx, dy = np.cos(ang), -np.sin(ang)  # row index grows downwards
    span_x, span_y = dx * (t - 1), dy * (t - 1)
    x0s = (-min(0.0, span_x), w - s - max(0.0, span_x))
    y0s = (-min(0.0, span_y), h - s - max(0.0, span_y))
    if x0s[1] < x0s[0] or y0s[1] < y0s[0]:
        raise TaskError(f"{h}x{w} frame too small for a {t}-frame trajectory")
    x0, y0 = rng.uniform(*x0s), rng.uniform(*y0s)
    for f in range(t):
        x, y = int(round(x0 + dx * f)), int(round(y0 + dy * f))
        pix[:, f, y : y + s, x : x + s] = color[:, None, None]
    return pix


def _flash(pix, rng, frames, color, s):
    _, _, h, w = pix.shape
    y, x = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
    pix[:, frames, y : y + s, x : x + s] = COLORS[color][:, None, None, None]


def _flash_order(rng, label, t, h, w):
    q = t // 4
    if q < 1:
        raise TaskError(f"flash-order needs at least 4 frames, got {t}")
    pix = _background(rng, t, h, w, 0.2, 0.4)
    s = _square_size(h, w)
    first, last = divmod(label, 2)
    length = int(rng.integers(1, 2 * q + 1))
    start = q + int(rng.integers(0, 2 * q - length + 1))
    _flash(pix, rng, slice(start, start + length), int(rng.integers(0, 2)), s)
    _flash(pix, rng, slice(0, q), first, s)
    _flash(pix, rng, slice(t - q, t), last, s)
    return pix


_GENERATORS = {"motion8": _motion8, "flash-order": _flash_order}


def gen_clip(task_id, seed, index, t, h, w):
    """(pixels 3 x T x H x W float32 in [0, 1], label)."""
    k = num_classes(task_id)
    label = index % k
    pix = _GENERATORS[task_id](clip_rng(task_id, seed, index), label, t, h, w)
    return np.clip(pix, 0.0, 1.0).astype(np.float32), label


def _motion8_label(pix):
    mask = pix.mean(axis=0) > 0.45
    cy, cx = [], []
    for f in (0, pix.shape[1] - 1):
        ys, xs = np.nonzero(mask[f])
        cy.append(ys.mean())
        cx.append(xs.mean())
    ang = np.arctan2(-(cy[1] - cy[0]), cx[1] - cx[0])
    return int(np.round(ang / (np.pi / 4))) % 8


def _color_in(frames):
    r, g, b = frames[0], frames[1], frames[2]
    red = ((r > 0.7) & (g < 0.3) & (b < 0.3)).sum()
    green = ((g > 0.7) & (r < 0.3) & (b < 0.3)).sum()
    return int(green > red)


def _flash_order_label(pix):
    q = pix.shape[1] // 4
    return 2 * _color_in(pix[:, :q]) + _color_in(pix[:, -q:])


def derive_label(task_id, pixels):
    """Recover the label from pixels alone, using the rule in the module docstring."""
    num_classes(task_id)
    return {"motion8": _motion8_label, "flash-order": _flash_order_label}[task_id](np.asarray(pixels))


@dataclass
class Dataset:
    clips: np.ndarray  # n x 3 x T x H x W
    labels: np.ndarray  # n, int64
    task_id: str
    seed: int

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return num_classes(self.task_id)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.clips[idx], self.labels[idx], self.task_id, self.seed)

    def split(self, n_first):
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))


def gen_dataset(task_id, n, t=16, h=32, w=32, seed=0, start=0):
    """Clips start..start+n-1 of the (task_id, seed) stream. Labels cycle through the classes."""
    num_classes(task_id)
    if n < 1:
        raise TaskError(f"need n >= 1, got {n}")
    clips = np.empty((n, 3, t, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        clips[i], labels[i] = gen_clip(task_id, seed, start + i, t, h, w)
    return Dataset(clips, labels, task_id, seed)


def save_dataset(ds, path):
    meta = f"task_id={ds.task_id}\nseed={ds.seed}\n"
    tensors = {f"clip/{i}": ds.clips[i] for i in range(len(ds))}
    tensors["labels"] = ds.labels.astype(np.float64)
    write_container(path, meta, tensors)


def load_dataset(path):
    meta, tensors = read_container(path)
    kv = dict(line.split("=", 1) for line in meta.splitlines() if "=" in line)
    labels = tensors.pop("labels").astype(np.int64)
    clips = np.stack([tensors[f"clip/{i}"] for i in range(len(labels))])
    return Dataset(clips, labels, kv["task_id"], int(kv["seed"]))
