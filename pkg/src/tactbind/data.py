"""Synthetic visuo-tactile trajectories, sliding-window samples, splits and I/O.

A trajectory is one press-and-slide episode on a single material, split
into approach / contact / slide / withdraw stages. The tactile channel is a
GelSight-like deformation map; the visual channel is a tinted, blurred view
of the same contact patch.

Pressure follows a viscoelastic creep curve from the first contact frame
to the last in-contact frame (end of the slide stage)::

    a(dt) = hardness * (1 - exp(-dt / tau)) / (1 - exp(-dt_end / tau))

so every material reaches exactly ``hardness`` at its final contact frame
and two materials that differ only in ``tau`` are indistinguishable there,
but not over time. After lift-off the deformation recovers as
``a_end * exp(-2 k / tau)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .storage import BlobWriter, FormatError, read_chunk, read_container, write_container

NOISE_SIGMA = 0.02
STAGE_FRACTIONS = (0.2, 0.4, 0.8)
STAGES = ("approach", "contact", "slide", "withdraw")
MIN_LENGTH = 8
DATASET_MAGIC = "tactbind-dataset v1"
BLOB_NAME = "frames.bin"

TACTILE_BLOB_SIGMA = 1.8
VISUAL_BLOB_SIGMA = 2.7
TEXTURE_DEPTH = 0.3
SLIDE_PHASE_STEP = 0.9


@dataclass(frozen=True)
class MaterialClass:
    class_id: int
    keywords: tuple[str, ...]
    hardness: float
    texture_frequency: float
    relaxation_time: float

    def __post_init__(self):
        if not self.keywords:
            raise ValueError(f"class {self.class_id}: keywords must be nonempty")
        if not 0.0 <= self.hardness <= 1.0:
            raise ValueError(f"class {self.class_id}: hardness {self.hardness} outside [0, 1]")
        if self.texture_frequency <= 0 or self.relaxation_time <= 0:
            raise ValueError(f"class {self.class_id}: texture_frequency and relaxation_time must be > 0")

    @property
    def tint(self) -> np.ndarray:
        """Object colour; depends on appearance (hardness, texture), never on relaxation."""
        return np.array([
            0.2 + 0.7 * self.hardness,
            0.2 + 0.6 * min(self.texture_frequency / 4.0, 1.0),
            0.5 - 0.3 * self.hardness,
        ])


def default_classes() -> list[MaterialClass]:
    """Eight classes: {solid, soft} x {smooth, rough} x {elastic, viscous}.

    Classes ``2i`` and ``2i + 1`` differ only in relaxation time.
    """
    out = []
    for hardness, hw in ((0.85, "solid"), (0.4, "soft")):
        for freq, fw in ((1.0, "smooth"), (3.0, "rough")):
            for tau, tw in ((0.5, "elastic"), (3.0, "viscous")):
                out.append(MaterialClass(len(out), (hw, fw, tw), hardness, freq, tau))
    return out


def temporal_pairs(classes: Sequence[MaterialClass]) -> list[tuple[int, int]]:
    """Class pairs that share hardness and texture and differ only in relaxation time."""
    pairs = []
    for i, a in enumerate(classes):
        for b in classes[i + 1:]:
            if (a.hardness == b.hardness and a.texture_frequency == b.texture_frequency
                    and a.relaxation_time != b.relaxation_time):
                pairs.append((a.class_id, b.class_id))
    return pairs


def vocabulary(classes: Iterable[MaterialClass]) -> list[str]:
    """Keywords in order of first appearance."""
    vocab: list[str] = []
    for c in classes:
        for w in c.keywords:
            if w not in vocab:
                vocab.append(w)
    return vocab


@dataclass(frozen=True)
class FramePair:
    visual: np.ndarray  # (H, W, 3)
    tactile: np.ndarray  # (H, W)
    time_index: int


@dataclass(eq=False)
class TrajectoryRecord:
    trajectory_id: int
    material: MaterialClass
    visual: np.ndarray  # (L, H, W, 3) float32
    tactile: np.ndarray  # (L, H, W) float32
    stage_marks: tuple[int, int, int, int]  # first frame (1-based) of each stage

    @property
    def length(self) -> int:
        return self.tactile.shape[0]

    @property
    def frames(self) -> list[FramePair]:
        return [FramePair(self.visual[i], self.tactile[i], i + 1) for i in range(self.length)]

    def stage_of(self, t: int) -> str:
        """Stage name for 1-based frame index ``t``."""
        k = int(np.searchsorted(self.stage_marks, t, side="right")) - 1
        return STAGES[k]

    def __eq__(self, other):
        if not isinstance(other, TrajectoryRecord):
            return NotImplemented
        return (self.trajectory_id == other.trajectory_id
                and self.material == other.material
                and self.stage_marks == other.stage_marks
                and self.visual.dtype == other.visual.dtype
                and self.tactile.dtype == other.tactile.dtype
                and np.array_equal(self.visual, other.visual)
                and np.array_equal(self.tactile, other.tactile))


@dataclass(eq=False)
class TemporalSample:
    sample_id: int
    visual: np.ndarray  # (T, H, W, 3)
    tactile: np.ndarray  # (T, H, W)
    keywords: tuple[str, ...]
    class_id: int
    source_trajectory: int
    window_start: int  # 1-based index of the first frame
    time_indices: tuple[int, ...] = field(default=())

    @property
    def T(self) -> int:
        return self.tactile.shape[0]

    @property
    def frames(self) -> list[FramePair]:
        return [FramePair(self.visual[i], self.tactile[i], t) for i, t in enumerate(self.time_indices)]


# ---------------------------------------------------------------- generation


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stage_marks(length: int) -> tuple[int, int, int, int]:
    """First frame of each stage; every stage keeps at least two frames."""
    if length < MIN_LENGTH:
        raise ValueError(f"trajectory length {length} below minimum {MIN_LENGTH}")
    ends = []
    prev = 0
    for k, frac in enumerate(STAGE_FRACTIONS, start=1):
        end = min(max(_round_half_up(frac * length), prev + 2), length - 2 * (len(STAGE_FRACTIONS) + 1 - k))
        ends.append(end)
        prev = end
    return (1, ends[0] + 1, ends[1] + 1, ends[2] + 1)


def pressure_amplitude(material: MaterialClass, length: int) -> np.ndarray:
    """Noise-free pressure amplitude per frame (closed form, before per-trajectory gain)."""
    _, contact, _, withdraw = stage_marks(length)
    tau = material.relaxation_time
    t = np.arange(1, length + 1)
    a = np.zeros(length)
    dt_end = withdraw - contact
    norm = 1.0 - math.exp(-dt_end / tau)
    touching = (t >= contact) & (t < withdraw)
    dt = t[touching] - contact + 1
    a[touching] = material.hardness * (1.0 - np.exp(-dt / tau)) / norm
    k = t[t >= withdraw] - withdraw + 1
    a[t >= withdraw] = material.hardness * np.exp(-2.0 * k / tau)
    return a


def _blob(h: int, w: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))


def _noise(rng: np.random.Generator, shape) -> np.ndarray:
    # truncated at 3 sigma so a zero-pressure frame stays under the noise floor
    return np.clip(rng.standard_normal(shape), -3.0, 3.0) * NOISE_SIGMA


def generate_trajectory(material: MaterialClass, length: int, seed: int,
                        trajectory_id: int = 0, grid: tuple[int, int] = (8, 8)) -> TrajectoryRecord:
    if length < MIN_LENGTH:
        raise ValueError(f"trajectory length {length} below minimum {MIN_LENGTH}")
    H, W = grid
    marks = stage_marks(length)
    rng = np.random.default_rng(seed)
    # draw order is fixed and material-independent
    gain = 1.0 + 0.05 * rng.standard_normal()
    cy, cx = (H - 1) / 2 + rng.uniform(-0.5, 0.5), (W - 1) / 2 + rng.uniform(-0.5, 0.5)
    phase0 = rng.uniform(0.0, 2 * math.pi)
    tint_jitter = 0.03 * rng.standard_normal(3)
    tac_noise = _noise(rng, (length, H, W))
    vis_noise = _noise(rng, (length, H, W, 3))

    amp = gain * pressure_amplitude(material, length)
    tac_blob = _blob(H, W, cy, cx, TACTILE_BLOB_SIGMA)
    vis_blob = _blob(H, W, cy, cx, VISUAL_BLOB_SIGMA)
    cols = np.arange(W)[None, :]
    slide_start, withdraw = marks[2], marks[3]

    tactile = np.empty((length, H, W))
    for i in range(length):
        t = i + 1
        frame = amp[i] * tac_blob
        if slide_start <= t < withdraw:
            phase = (2 * math.pi * material.texture_frequency * cols / W + phase0
                     + SLIDE_PHASE_STEP * (t - slide_start))
            frame = frame * (1.0 - TEXTURE_DEPTH + TEXTURE_DEPTH * np.sin(phase))
        tactile[i] = frame
    tactile = np.clip(tactile + tac_noise, 0.0, 1.0)

    tint = np.clip(material.tint + tint_jitter, 0.0, 1.0)
    base = 0.15 + 0.55 * tint
    visual = base[None, None, None, :] + 0.3 * amp[:, None, None, None] * vis_blob[None, :, :, None]
    visual = np.clip(visual + vis_noise, 0.0, 1.0)

    return TrajectoryRecord(
        trajectory_id=trajectory_id,
        material=material,
        visual=visual.astype(np.float32),
        tactile=tactile.astype(np.float32),
        stage_marks=marks,
    )


def trajectory_seed(seed: int, trajectory_id: int) -> int:
    return int(np.random.SeedSequence([seed, trajectory_id]).generate_state(1)[0])


def generate_dataset(n_trajectories: int = 200, length: int = 12, seed: int = 0,
                     classes: Sequence[MaterialClass] | None = None,
                     grid: tuple[int, int] = (8, 8)) -> list[TrajectoryRecord]:
    """Trajectory ``i`` uses class ``i mod K``."""
    classes = list(classes) if classes is not None else default_classes()
    return [
        generate_trajectory(classes[i % len(classes)], length, trajectory_seed(seed, i), i, grid)
        for i in range(n_trajectories)
    ]


# ------------------------------------------------------------------ windows


def build_temporal_samples(trajectory: TrajectoryRecord, T: int, start_id: int = 0) -> list[TemporalSample]:
    """All ``L - T + 1`` windows of ``T`` consecutive frames."""
    L = trajectory.length
    if T < 1:
        raise ValueError(f"sequence length T={T} must be >= 1")
    if T > L:
        raise ValueError(f"sequence length T={T} exceeds trajectory length {L}")
    out = []
    for i in range(L - T + 1):
        out.append(TemporalSample(
            sample_id=start_id + i,
            visual=trajectory.visual[i:i + T],
            tactile=trajectory.tactile[i:i + T],
            keywords=trajectory.material.keywords,
            class_id=trajectory.material.class_id,
            source_trajectory=trajectory.trajectory_id,
            window_start=i + 1,
            time_indices=tuple(range(i + 1, i + T + 1)),
        ))
    return out


def build_all_samples(records: Sequence[TrajectoryRecord], T: int) -> list[TemporalSample]:
    samples: list[TemporalSample] = []
    for rec in records:
        samples.extend(build_temporal_samples(rec, T, start_id=len(samples)))
    return samples


def split_dataset(samples: Sequence[TemporalSample], test_fraction: float,
                  seed: int) -> tuple[list[TemporalSample], list[TemporalSample]]:
    """Split by source trajectory; ``round(test_fraction * n)`` trajectories go to test."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction {test_fraction} must lie in (0, 1)")
    ids = sorted({s.source_trajectory for s in samples})
    if len(ids) < 2:
        raise ValueError(f"need at least 2 trajectories to split, got {len(ids)}")
    n_test = _round_half_up(test_fraction * len(ids))
    perm = np.random.default_rng(seed).permutation(len(ids))
    test_ids = {ids[i] for i in perm[:n_test]}
    train = [s for s in samples if s.source_trajectory not in test_ids]
    test = [s for s in samples if s.source_trajectory in test_ids]
    return train, test


# ---------------------------------------------------------------------- I/O


def write_dataset(records: Sequence[TrajectoryRecord], path) -> None:
    """Write ``manifest.txt``, ``frames.bin`` and ``vocab.txt`` under ``path``."""
    classes: dict[int, MaterialClass] = {}
    for r in records:
        prev = classes.setdefault(r.material.class_id, r.material)
        if prev != r.material:
            raise ValueError(f"class id {r.material.class_id} used for two different materials")
    grid = records[0].tactile.shape[1:] if records else (0, 0)
    lines = [f"grid {grid[0]} {grid[1]}"]
    for cid in sorted(classes):
        c = classes[cid]
        lines.append(f"class {cid} {c.hardness!r} {c.texture_frequency!r} {c.relaxation_time!r} {','.join(c.keywords)}")
    blob = BlobWriter()
    for r in records:
        if r.tactile.shape[1:] != tuple(grid):
            raise ValueError(f"trajectory {r.trajectory_id}: grid {r.tactile.shape[1:]} differs from {tuple(grid)}")
        data = (np.ascontiguousarray(r.visual, dtype="<f4").tobytes()
                + np.ascontiguousarray(r.tactile, dtype="<f4").tobytes())
        off, n, crc = blob.append(data)
        marks = " ".join(str(m) for m in r.stage_marks)
        lines.append(f"traj {r.trajectory_id} {r.material.class_id} {r.length} {off} {n} {crc} {marks}")
    write_container(path, DATASET_MAGIC, lines, blob.getvalue(), BLOB_NAME)
    Path(path, "vocab.txt").write_text("".join(f"{w}\n" for w in vocabulary(classes[c] for c in sorted(classes))),
                                       encoding="utf-8")


def read_dataset(path) -> list[TrajectoryRecord]:
    records, blob, mpath = read_container(path, DATASET_MAGIC, BLOB_NAME)
    bpath = Path(path) / BLOB_NAME
    grid = None
    classes: dict[int, MaterialClass] = {}
    out = []
    for rec in records:
        lineno, kind, *rest = rec
        try:
            if kind == "grid":
                grid = (int(rest[0]), int(rest[1]))
            elif kind == "class":
                cid, hardness, freq, tau, kws = rest
                classes[int(cid)] = MaterialClass(int(cid), tuple(kws.split(",")), float(hardness),
                                                  float(freq), float(tau))
            elif kind == "traj":
                tid, cid, length, off, nbytes, crc, *marks = rest
                tid, cid, length, off, nbytes = map(int, (tid, cid, length, off, nbytes))
                if grid is None:
                    raise FormatError(mpath, f"line {lineno}", "trajectory record before grid line")
                if cid not in classes:
                    raise FormatError(mpath, f"line {lineno}", f"unknown class id {cid}")
                H, W = grid
                expected = length * H * W * 4 * 4
                if nbytes != expected:
                    raise FormatError(bpath, off, f"length error: manifest line {lineno} declares {nbytes} bytes, "
                                                  f"{length} frames of {H}x{W} need {expected}")
                chunk = read_chunk(blob, bpath, mpath, lineno, off, nbytes, crc)
                nv = length * H * W * 3
                arr = np.frombuffer(chunk, dtype="<f4")
                visual = arr[:nv].reshape(length, H, W, 3).astype(np.float32)
                tactile = arr[nv:].reshape(length, H, W).astype(np.float32)
                stage = tuple(int(m) for m in marks)
                if len(stage) != 4 or list(stage) != sorted(set(stage)) or stage[0] < 1 or stage[-1] > length:
                    raise FormatError(mpath, f"line {lineno}", f"invalid stage marks {stage}")
                out.append(TrajectoryRecord(tid, classes[cid], visual, tactile, stage))
            else:
                raise FormatError(mpath, f"line {lineno}", f"unknown record kind {kind!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(mpath, f"line {lineno}", f"malformed record: {exc}") from None
    return out


def read_classes(path) -> list[MaterialClass]:
    """Class table of a dataset directory without decoding frames."""
    records, _, _ = read_container(path, DATASET_MAGIC, BLOB_NAME)
    return [MaterialClass(int(r[2]), tuple(r[6].split(",")), float(r[3]), float(r[4]), float(r[5]))
            for r in records if r[1] == "class"]
