"""Dataset ingestion: CIFAR-10 binary files, synthetic event streams, batching."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
SYNTH_CLASSES = ("bar_up", "bar_down", "bar_left", "bar_right", "dot_cw", "dot_ccw")
EVENT_DTYPE = np.dtype([("t", "<i8"), ("x", "<i4"), ("y", "<i4"), ("p", "u1")])


class DataError(ValueError):
    pass


def data_root(explicit=None) -> Path:
    root = explicit or os.environ.get("MSVIT_DATA_DIR")
    if not root:
        raise DataError("no data directory: pass --data-dir or set MSVIT_DATA_DIR")
    return Path(root)


@dataclass
class Sample:
    input: np.ndarray
    label: int


@dataclass
class ArrayDataset:
    """Inputs stacked along axis 0 with integer labels.

    ``kind`` is ``"static"`` for ``(n, C, H, W)`` images in [0, 1] or
    ``"events"`` for ``(n, T, 2, H, W)`` binary frames.
    """

    inputs: np.ndarray
    labels: np.ndarray
    kind: str = "static"
    num_classes: Optional[int] = None

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise DataError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.inputs[i], int(self.labels[i]))

    def subset(self, idx) -> "ArrayDataset":
        return ArrayDataset(self.inputs[idx], self.labels[idx], self.kind, self.num_classes)


# -- CIFAR-10 ---------------------------------------------------------------

def _cifar_dir(root: Path) -> Path:
    sub = root / "cifar-10-batches-bin"
    return sub if sub.is_dir() else root


def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Decode one binary batch file to ``uint8`` pixels ``(n, 3, 32, 32)`` and labels."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataError(f"{path}: size {len(raw)} is not a whole number of "
                        f"{CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{path}: record {bad[0]} has label {labels[bad[0]]} (valid 0-9)")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


_NORM_CACHE: dict[str, tuple[list[float], list[float]]] = {}


def cifar10_channel_stats(root) -> tuple[list[float], list[float]]:
    """Per-channel mean/std of the training split in [0, 1] units, cached."""
    d = _cifar_dir(Path(root))
    key = str(d.resolve())
    if key in _NORM_CACHE:
        return _NORM_CACHE[key]
    cache_file = d / "msvit_norm.json"
    if cache_file.is_file():
        stats = json.loads(cache_file.read_text())
        _NORM_CACHE[key] = (stats["mean"], stats["std"])
        return _NORM_CACHE[key]
    total = np.zeros(3)
    total_sq = np.zeros(3)
    n = 0
    for name in CIFAR_TRAIN_FILES:
        px, _ = read_cifar10_file(d / name)
        x = px.astype(np.float64) / 255.0
        total += x.sum(axis=(0, 2, 3))
        total_sq += (x ** 2).sum(axis=(0, 2, 3))
        n += x.shape[0] * 32 * 32
    mean = total / n
    std = np.sqrt(total_sq / n - mean ** 2)
    _NORM_CACHE[key] = (mean.tolist(), std.tolist())
    try:
        cache_file.write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
    except OSError:
        pass
    return _NORM_CACHE[key]


def load_cifar10_binary(root, split: str = "train", classes: Optional[Sequence[int]] = None,
                        limit: Optional[int] = None, normalize: bool = False) -> ArrayDataset:
    """Load a CIFAR-10 split from the canonical binary files.

    ``classes`` keeps only those labels and renumbers them ``0..k-1`` in the
    given order; ``limit`` keeps the first ``limit`` matching records. Pixels
    are scaled to [0, 1]; ``normalize`` further standardises each channel with
    training-split statistics.
    """
    if split not in ("train", "test"):
        raise DataError(f"unknown split {split!r}")
    d = _cifar_dir(Path(root))
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    pix, labs = [], []
    for name in names:
        path = d / name
        if not path.is_file():
            raise DataError(f"missing CIFAR-10 file {path}")
        p, l = read_cifar10_file(path)
        pix.append(p)
        labs.append(l)
    px = np.concatenate(pix)
    labels = np.concatenate(labs)
    num_classes = 10
    if classes is not None:
        classes = list(classes)
        keep = np.isin(labels, classes)
        px, labels = px[keep], labels[keep]
        remap = {c: i for i, c in enumerate(classes)}
        labels = np.array([remap[int(c)] for c in labels], dtype=np.int64)
        num_classes = len(classes)
    if limit is not None:
        px, labels = px[:limit], labels[:limit]
    x = px.astype(np.float32) / 255.0
    if normalize:
        mean, std = cifar10_channel_stats(root)
        x = (x - np.array(mean, np.float32)[:, None, None]) / np.array(std, np.float32)[:, None, None]
    return ArrayDataset(x, labels, "static", num_classes)


def write_cifar10_file(path, pixels: np.ndarray, labels: Sequence[int]) -> None:
    """Write records in the CIFAR-10 binary layout (used to build fixtures)."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), 3072)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(rec.tobytes())


# -- synthetic event streams --------------------------------------------------

@dataclass
class EventStream:
    events: np.ndarray
    width: int = 32
    height: int = 32
    duration: int = 100_000

    def __post_init__(self):
        ev = self.events
        if ev.dtype != EVENT_DTYPE:
            self.events = ev = np.asarray(ev).astype(EVENT_DTYPE)
        if len(ev):
            if np.any(np.diff(ev["t"]) < 0):
                raise DataError("event timestamps must be nondecreasing")
            if (ev["x"].min() < 0 or ev["x"].max() >= self.width or ev["y"].min() < 0
                    or ev["y"].max() >= self.height):
                raise DataError("event coordinates out of sensor range")

    def __len__(self):
        return len(self.events)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x", "y", "p"])
        for e in self.events:
            w.writerow([int(e["t"]), int(e["x"]), int(e["y"]), int(e["p"])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, width: int = 32, height: int = 32,
                 duration: int = 100_000) -> "EventStream":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["t", "x", "y", "p"]:
            raise DataError("event CSV must start with the header t,x,y,p")
        ev = np.array([tuple(int(v) for v in r) for r in rows[1:]], dtype=EVENT_DTYPE)
        return cls(ev, width, height, duration)


def synth_events(cls: int, seed: int, size: int = 32, duration: int = 100_000,
                 noise: float = 0.02) -> EventStream:
    """Deterministic event stream for one of six motion classes.

    Classes 0-3 are a bar sweeping up/down/left/right; 4 and 5 are a dot
    orbiting a random centre clockwise and counter-clockwise. Moving edges emit ON events at
    the leading position and OFF events where the object was; a small fraction
    of uniformly scattered noise events is added.
    """
    if not 0 <= cls < len(SYNTH_CLASSES):
        raise DataError(f"class must be in [0, {len(SYNTH_CLASSES)}), got {cls}")
    rng = np.random.default_rng([seed, cls, 7919])
    steps = 48
    times = np.sort(rng.integers(0, duration, size=steps))
    rows = []
    if cls < 4:
        thick = int(rng.integers(2, 4))
        lo, hi = int(rng.integers(0, size // 4)), int(rng.integers(3 * size // 4, size - thick))
        start, stop = (hi, lo) if cls in (0, 2) else (lo, hi)
        pos = np.round(np.linspace(start, stop, steps)).astype(int)
        extent = np.arange(int(rng.integers(0, size // 4)), int(rng.integers(3 * size // 4, size)))
        prev = None
        for t, p in zip(times, pos):
            for line in range(p, p + thick):
                if prev is not None and prev <= line < prev + thick:
                    continue
                keep = extent[rng.random(extent.size) < 0.8]
                rows += [(t, line, e, 1) if cls >= 2 else (t, e, line, 1) for e in keep]
            if prev is not None:
                for line in range(prev, prev + thick):
                    if p <= line < p + thick:
                        continue
                    keep = extent[rng.random(extent.size) < 0.8]
                    rows += [(t, line, e, 0) if cls >= 2 else (t, e, line, 0) for e in keep]
            prev = p
    else:
        radius = rng.uniform(size / 10, size / 6)
        r = 1
        margin = radius + r + 1
        cx0, cy0 = rng.uniform(margin, size - 1 - margin, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        # a tight, fast orbit: each time bin then holds a curved arc whose
        # ON/OFF ordering shows the rotation sense wherever the orbit sits
        turns = rng.uniform(3.2, 4.8)
        # image y grows downward, so decreasing angle is clockwise on screen
        sign = -1.0 if cls == 4 else 1.0
        steps = 160
        times = np.sort(rng.integers(0, duration, size=steps))
        angles = phase + sign * 2 * np.pi * turns * np.linspace(0, 1, steps)
        prev = None
        for t, a in zip(times, angles):
            cx = int(round(cx0 + radius * np.cos(a)))
            cy = int(round(cy0 - radius * np.sin(a)))
            cur = {(cx + dx, cy + dy) for dx in range(-r, r + 1) for dy in range(-r, r + 1)}
            old = prev or set()
            rows += [(t, x, y, 1) for x, y in sorted(cur - old)]
            rows += [(t, x, y, 0) for x, y in sorted(old - cur)]
            prev = cur
    n_noise = int(noise * len(rows))
    if n_noise:
        nt = rng.integers(0, duration, size=n_noise)
        nx = rng.integers(0, size, size=n_noise)
        ny = rng.integers(0, size, size=n_noise)
        npol = rng.integers(0, 2, size=n_noise)
        rows += list(zip(nt, nx, ny, npol))
    ev = np.array([tuple(int(v) for v in r) for r in rows], dtype=EVENT_DTYPE)
    ev = ev[np.argsort(ev["t"], kind="stable")]
    return EventStream(ev, size, size, duration)


def events_to_frames(stream: EventStream, timesteps: int, height: Optional[int] = None,
                     width: Optional[int] = None) -> np.ndarray:
    """Bin a stream into ``(T, 2, H, W)`` presence frames.

    The stream duration is split into ``T`` equal bins. Channel 0 marks any
    ON (polarity 1) event at a pixel within the bin, channel 1 any OFF event.
    Sensor coordinates are rescaled when ``H, W`` differ from the sensor.
    """
    if timesteps < 1:
        raise DataError("timesteps must be >= 1")
    height = height or stream.height
    width = width or stream.width
    frames = np.zeros((timesteps, 2, height, width), dtype=np.uint8)
    ev = stream.events
    if len(ev) == 0:
        return frames
    span = max(int(stream.duration), int(ev["t"].max()) + 1)
    b = np.minimum(ev["t"] * timesteps // span, timesteps - 1)
    x = ev["x"].astype(np.int64) * width // stream.width
    y = ev["y"].astype(np.int64) * height // stream.height
    ch = 1 - ev["p"].astype(np.int64)
    frames[b, ch, y, x] = 1
    return frames


def synth_event_dataset(n_per_class: int, timesteps: int, size: int = 32,
                        seed: int = 0, frame_size: Optional[int] = None) -> ArrayDataset:
    """Frames for ``n_per_class`` streams of each class, seeds offset by ``seed``."""
    frame_size = frame_size or size
    inputs, labels = [], []
    for k in range(n_per_class):
        for c in range(len(SYNTH_CLASSES)):
            s = synth_events(c, seed + k, size)
            inputs.append(events_to_frames(s, timesteps, frame_size, frame_size))
            labels.append(c)
    return ArrayDataset(np.stack(inputs), np.array(labels, dtype=np.int64), "events",
                        len(SYNTH_CLASSES))


# -- batching ------------------------------------------------------------------

def epoch_order(n: int, seed: Optional[int], epoch: int = 0) -> np.ndarray:
    if seed is None:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(data: ArrayDataset, batch: int, seed: Optional[int] = None, epoch: int = 0,
            timesteps: Optional[int] = None, dtype=torch.float32) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(x, y)`` with ``x`` shaped ``(T, B, C, H, W)``.

    The order is a function of ``(seed, epoch)`` only; ``seed=None`` keeps the
    stored order. The last partial batch is kept. Static images are repeated
    over ``timesteps`` frames.
    """
    if batch < 1:
        raise DataError("batch size must be >= 1")
    order = epoch_order(len(data), seed, epoch)
    for i in range(0, len(order), batch):
        idx = order[i:i + batch]
        x = torch.as_tensor(np.ascontiguousarray(data.inputs[idx])).to(dtype)
        y = torch.as_tensor(data.labels[idx])
        if data.kind == "events":
            x = x.transpose(0, 1)
        else:
            if timesteps is None:
                raise DataError("static data needs timesteps to build frames")
            x = x.unsqueeze(0).expand(timesteps, *x.shape)
        yield x, y
