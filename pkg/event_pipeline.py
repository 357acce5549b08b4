#!/usr/bin/env python3
"""
Event Pipeline - simulate, perturb, store and voxelize event streams
EmambaIR toolkit, event input stage

LOGIC:
- simulate_events: contrast-threshold model on log intensity; each pixel keeps
  a reference level that only moves by whole thresholds, so sub-threshold
  residuals carry across frame pairs
- inject_noise: uniform spurious events plus periodically firing hot pixels
- voxelize: bilinear temporal binning of signed event mass into B bins
- augment: joint flips of image and voxel grid, voxel noise and voxel hot pixels

FILE FORMAT: UTF-8 CSV with header "t_us,x,y,p", sorted by t_us, optionally
preceded by one "# width=W height=H t_start=T0 t_end=T1" line.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from tensor_engine import Tensor
from validation_utils import ErrorHandler, FileValidator, ValidationError

logger = logging.getLogger(__name__)

EVENT_COLUMNS = ["t_us", "x", "y", "p"]
DEFAULT_BINS = 6
INTENSITY_FLOOR = 1e-3
COUNT_TOLERANCE = 1e-9


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def _event_error(message: str, error_code: str, suggestions: List[str] = None) -> ValidationError:
    return ValidationError(
        message,
        error_code=error_code,
        category=ValidationError.DATA_ERROR,
        suggestions=suggestions,
        step="event_pipeline"
    )


@dataclass
class EventStream:
    """
    Time-ordered events of a W x H sensor over [t_start, t_end] microseconds

    The events live in a pandas table with integer columns t_us, x, y, p.
    """

    width: int
    height: int
    t_start: int
    t_end: int
    table: pd.DataFrame

    def __post_init__(self):
        self.table = self.table[EVENT_COLUMNS].astype(np.int64).reset_index(drop=True)
        t, x, y, p = self.arrays()
        if np.any((x < 0) | (x >= self.width) | (y < 0) | (y >= self.height)):
            raise _event_error(
                f"Event coordinates outside the {self.width}x{self.height} sensor",
                "EVENT_OUT_OF_BOUNDS"
            )
        if np.any((p != 1) & (p != -1)):
            raise _event_error("Event polarity must be +1 or -1", "EVENT_PARSE_ERROR")
        if np.any((t < self.t_start) | (t > self.t_end)):
            raise _event_error(
                f"Event timestamps outside [{self.t_start}, {self.t_end}]",
                "EVENT_OUT_OF_RANGE"
            )
        if np.any(np.diff(t) < 0):
            raise _event_error("Events must be sorted by timestamp", "EVENT_NOT_SORTED")

    @classmethod
    def from_arrays(cls, t, x, y, p, width: int, height: int, t_start: int, t_end: int) -> "EventStream":
        table = pd.DataFrame({
            "t_us": np.asarray(t, dtype=np.int64),
            "x": np.asarray(x, dtype=np.int64),
            "y": np.asarray(y, dtype=np.int64),
            "p": np.asarray(p, dtype=np.int64),
        })
        return cls(width, height, int(t_start), int(t_end), table)

    @classmethod
    def from_events(cls, events: Iterable[Event], width: int, height: int,
                    t_start: int, t_end: int) -> "EventStream":
        events = list(events)
        columns = np.array(events, dtype=np.int64).reshape(-1, 4).T
        return cls.from_arrays(*columns, width, height, t_start, t_end)

    @property
    def events(self) -> List[Event]:
        return [Event(*row) for row in self.table.itertuples(index=False, name=None)]

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return tuple(self.table[column].to_numpy() for column in EVENT_COLUMNS)

    def __len__(self) -> int:
        return len(self.table)

    def polarity_sum(self) -> int:
        return int(self.table["p"].sum())

    def equals(self, other: "EventStream") -> bool:
        return ((self.width, self.height, self.t_start, self.t_end)
                == (other.width, other.height, other.t_start, other.t_end)
                and self.table.equals(other.table))


@dataclass
class VoxelGrid:
    """Signed temporal binning of an event stream: data is [bins, H, W]."""

    bins: int
    data: Tensor

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def total_mass(self) -> float:
        return float(self.data.data.sum())


@dataclass(frozen=True)
class AugmentFlags:
    hflip: bool = False
    vflip: bool = False


def _sorted_stream(chunks: List[Tuple[np.ndarray, ...]], width: int, height: int,
                   t_start: int, t_end: int) -> EventStream:
    if chunks:
        t, x, y, p = (np.concatenate(parts) for parts in zip(*chunks))
    else:
        t = x = y = p = np.zeros(0, dtype=np.int64)
    order = np.argsort(t, kind="stable")
    return EventStream.from_arrays(t[order], x[order], y[order], p[order], width, height, t_start, t_end)


def simulate_events(frames: Sequence[Union[Tensor, np.ndarray]], timestamps: Sequence[int],
                    threshold: float, intensity_floor: float = INTENSITY_FLOOR) -> EventStream:
    """
    Contrast-threshold event simulation between consecutive frames

    Args:
        frames: H x W intensity images
        timestamps: strictly increasing frame times in microseconds
        threshold: contrast threshold c on log intensity

    Returns:
        EventStream over [timestamps[0], timestamps[-1]]
    """
    if len(frames) == 0:
        raise _event_error("simulate_events needs at least one frame pair, got no frames", "EMPTY_FRAMES")
    if len(frames) < 2 or len(frames) != len(timestamps):
        raise _event_error(
            f"simulate_events needs >= 2 frames with one timestamp each "
            f"(got {len(frames)} frames, {len(timestamps)} timestamps)",
            "EMPTY_FRAMES"
        )
    stamps = np.asarray(timestamps, dtype=np.int64)
    if np.any(np.diff(stamps) <= 0):
        raise _event_error("Frame timestamps must be strictly increasing", "NON_INCREASING_TIMESTAMPS")
    if threshold <= 0:
        raise _event_error(f"Contrast threshold must be positive, got {threshold}", "INVALID_THRESHOLD")

    images = [f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64) for f in frames]
    height, width = images[0].shape
    if any(image.shape != (height, width) for image in images):
        raise _event_error("All frames must share one resolution", "RESOLUTION_MISMATCH")

    logs = [np.log(np.maximum(image, intensity_floor)) for image in images]
    reference = logs[0].copy()
    chunks = []
    for i in range(1, len(logs)):
        start_log, end_log = logs[i - 1], logs[i]
        t0, t1 = stamps[i - 1], stamps[i]
        diff = end_log - reference
        counts = np.floor(np.abs(diff) / threshold + COUNT_TOLERANCE).astype(np.int64)
        pixels = np.flatnonzero(counts)
        if pixels.size == 0:
            continue
        per_pixel = counts.flat[pixels]
        signs = np.sign(diff.flat[pixels]).astype(np.int64)
        owners = np.repeat(np.arange(pixels.size), per_pixel)
        crossing = np.arange(owners.size) - np.repeat(np.cumsum(per_pixel) - per_pixel, per_pixel) + 1
        pixel_ids = pixels[owners]
        levels = reference.flat[pixel_ids] + signs[owners] * crossing * threshold
        start, end = start_log.flat[pixel_ids], end_log.flat[pixel_ids]
        span = end - start
        safe_span = np.where(span != 0, span, 1.0)
        fraction = np.clip(np.where(span != 0, (levels - start) / safe_span, 1.0), 0.0, 1.0)
        times = np.rint(t0 + fraction * (t1 - t0)).astype(np.int64)
        chunks.append((times, pixel_ids % width, pixel_ids // width, signs[owners]))
        reference.flat[pixels] += signs * per_pixel * threshold

    stream = _sorted_stream(chunks, width, height, int(stamps[0]), int(stamps[-1]))
    logger.debug(f"Simulated {len(stream)} events from {len(frames)} frames (c={threshold})")
    return stream


def inject_noise(stream: EventStream, rate_noise: float, rate_hot: float, seed: int,
                 hot_pixel_events: int = 8) -> EventStream:
    """
    Add uniform spurious events and periodic hot pixels

    Args:
        rate_noise: spurious events per pixel over the whole stream
        rate_hot: fraction of pixels that are hot
        seed: RNG seed; output is a pure function of inputs and seed
    """
    if rate_noise < 0 or rate_hot < 0:
        raise _event_error(f"Noise rates must be >= 0, got ({rate_noise}, {rate_hot})", "NEGATIVE_RATE")
    if rate_noise == 0 and rate_hot == 0:
        return EventStream(stream.width, stream.height, stream.t_start, stream.t_end, stream.table.copy())

    rng = np.random.default_rng(seed)
    pixel_count = stream.width * stream.height
    chunks = [stream.arrays()]

    n_noise = int(round(rate_noise * pixel_count))
    if n_noise:
        chunks.append((
            rng.integers(stream.t_start, stream.t_end + 1, n_noise),
            rng.integers(0, stream.width, n_noise),
            rng.integers(0, stream.height, n_noise),
            rng.choice(np.array([-1, 1]), n_noise),
        ))

    n_hot = min(pixel_count, int(round(rate_hot * pixel_count)))
    if n_hot:
        hot_ids = rng.choice(pixel_count, n_hot, replace=False)
        hot_signs = rng.choice(np.array([-1, 1]), n_hot)
        times = np.rint(np.linspace(stream.t_start, stream.t_end, hot_pixel_events)).astype(np.int64)
        chunks.append((
            np.tile(times, n_hot),
            np.repeat(hot_ids % stream.width, hot_pixel_events),
            np.repeat(hot_ids // stream.width, hot_pixel_events),
            np.repeat(hot_signs, hot_pixel_events),
        ))
        logger.debug(f"Injected {n_hot} hot pixels x {hot_pixel_events} events")

    return _sorted_stream(chunks, stream.width, stream.height, stream.t_start, stream.t_end)


def voxelize(stream: EventStream, bins: int = DEFAULT_BINS) -> VoxelGrid:
    """Bilinear temporal binning: mass p split between bins floor(t*) and floor(t*)+1."""
    if int(bins) != bins or bins < 1:
        raise _event_error(f"Voxel bins must be >= 1, got {bins}", "INVALID_BINS")
    if stream.t_end <= stream.t_start:
        raise _event_error(
            f"Degenerate time range [{stream.t_start}, {stream.t_end}]",
            "DEGENERATE_TIME_RANGE"
        )
    t, x, y, p = stream.arrays()
    plane = stream.width * stream.height
    grid = np.zeros(bins * plane)
    normalized = (t - stream.t_start) / (stream.t_end - stream.t_start) * (bins - 1)
    left = np.floor(normalized).astype(np.int64)
    weight_right = normalized - left
    pixel = y * stream.width + x
    np.add.at(grid, left * plane + pixel, p * (1.0 - weight_right))
    has_right = left + 1 < bins
    np.add.at(grid, (left[has_right] + 1) * plane + pixel[has_right], p[has_right] * weight_right[has_right])
    return VoxelGrid(bins, Tensor(grid.reshape(bins, stream.height, stream.width)))


def augment(image: Tensor, voxel: VoxelGrid, flags: Optional[AugmentFlags] = None, seed: int = 0,
            noise_std: float = 0.0, hot_pixel_rate: float = 0.0,
            hot_pixel_value: float = 1.0) -> Tuple[Tensor, VoxelGrid]:
    """
    Apply the same spatial transform to image and voxel grid

    When flags is None each flip is drawn with probability 1/2 from the seed.
    noise_std adds Gaussian noise to the voxel grid; hot_pixel_rate pins a
    random pixel set to +-hot_pixel_value in every bin.
    """
    pixels = image.data
    cells = voxel.data.data
    if pixels.shape[-2:] != cells.shape[-2:]:
        raise _event_error(
            f"Image {pixels.shape[-2:]} and voxel {cells.shape[-2:]} resolutions differ",
            "RESOLUTION_MISMATCH"
        )
    rng = np.random.default_rng(seed)
    if flags is None:
        flags = AugmentFlags(hflip=bool(rng.random() < 0.5), vflip=bool(rng.random() < 0.5))
    if flags.hflip:
        pixels, cells = pixels[..., ::-1], cells[..., ::-1]
    if flags.vflip:
        pixels, cells = pixels[..., ::-1, :], cells[..., ::-1, :]
    cells = np.array(cells)
    if noise_std > 0:
        cells = cells + rng.normal(0.0, noise_std, cells.shape)
    if hot_pixel_rate > 0:
        height, width = cells.shape[-2:]
        n_hot = min(height * width, int(round(hot_pixel_rate * height * width)))
        hot_ids = rng.choice(height * width, n_hot, replace=False)
        signs = rng.choice(np.array([-1.0, 1.0]), n_hot)
        cells[:, hot_ids // width, hot_ids % width] = signs * hot_pixel_value
    return Tensor(np.array(pixels)), VoxelGrid(voxel.bins, Tensor(cells))


def random_crop(image: Tensor, voxel: VoxelGrid, size: int, seed: int) -> Tuple[Tensor, VoxelGrid]:
    """Crop a size x size window at the same offset from both modalities."""
    height, width = image.shape[-2:]
    if (voxel.height, voxel.width) != (height, width):
        raise _event_error("Image and voxel resolutions differ", "RESOLUTION_MISMATCH")
    if size > height or size > width:
        raise _event_error(f"Crop {size} larger than {height}x{width}", "CROP_TOO_LARGE")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    window = (slice(top, top + size), slice(left, left + size))
    return (Tensor(image.data[(Ellipsis,) + window]),
            VoxelGrid(voxel.bins, Tensor(voxel.data.data[(slice(None),) + window])))


def write_events(stream: EventStream, path: Union[str, Path], metadata: bool = True) -> Path:
    """
    Write t_us,x,y,p rows; with metadata=True a '# width=.. height=.. t_start=.. t_end=..'
    line precedes the header so the file is self-describing
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as handle:
            if metadata:
                handle.write(f"# width={stream.width} height={stream.height} "
                             f"t_start={stream.t_start} t_end={stream.t_end}\n")
            stream.table.to_csv(handle, index=False, lineterminator="\n")
    except OSError as e:
        raise ValidationError(ErrorHandler.handle_file_error(e, path, "writing events"),
                              error_code="EVENT_WRITE_FAILED", category=ValidationError.FILE_ERROR)
    logger.debug(f"Wrote {len(stream)} events to {path}")
    return path


def _parse_metadata(line: str) -> dict:
    fields = {}
    for token in line.lstrip("#").split():
        key, _, value = token.partition("=")
        if key in ("width", "height", "t_start", "t_end"):
            try:
                fields[key] = int(value)
            except ValueError:
                raise _event_error(f"Line 1: bad metadata value '{token}'", "EVENT_PARSE_ERROR")
    return fields


def read_events(path: Union[str, Path], width: Optional[int] = None,
                height: Optional[int] = None) -> EventStream:
    """
    Parse an event CSV; malformed rows are reported with their 1-based line number

    The optional '#' metadata line is accepted before the header. Explicit
    width/height override it. Blank lines are skipped.
    """
    path = FileValidator.validate_input_file(path, kind="events")
    try:
        with open(path, encoding="utf-8") as handle:
            first_line = handle.readline()
    except OSError as e:
        raise ValidationError(ErrorHandler.handle_file_error(e, path, "reading events"),
                              error_code="EVENT_READ_FAILED", category=ValidationError.FILE_ERROR)

    metadata = _parse_metadata(first_line) if first_line.startswith("#") else {}
    header_line = 2 if first_line.startswith("#") else 1
    try:
        frame = pd.read_csv(path, dtype=str, skiprows=header_line - 1, keep_default_na=False,
                            skip_blank_lines=False)
    except pd.errors.ParserError as e:
        raise _event_error(f"{path}: malformed event file ({e})", "EVENT_PARSE_ERROR")
    except pd.errors.EmptyDataError:
        raise _event_error(f"{path}: missing header line 't_us,x,y,p'", "EVENT_PARSE_ERROR")

    if list(frame.columns) != EVENT_COLUMNS:
        raise _event_error(
            f"{path}: line {header_line}: expected header 't_us,x,y,p', got '{','.join(frame.columns)}'",
            "EVENT_PARSE_ERROR"
        )

    frame = frame.fillna("").astype(str)
    for column in EVENT_COLUMNS:
        frame[column] = frame[column].str.strip()
    # physical line of every data row, taken before blank rows are dropped
    lines = frame.index.to_numpy() + header_line + 1
    blank = (frame == "").all(axis=1).to_numpy()
    frame, lines = frame[~blank], lines[~blank]

    parsed = {}
    for column in EVENT_COLUMNS:
        bad = ~frame[column].str.fullmatch(r"[+-]?\d+")
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raw = ",".join(str(v) for v in frame.iloc[row].tolist())
            raise _event_error(
                f"{path}: line {lines[row]}: cannot parse '{raw}' ({column} is not an integer)",
                "EVENT_PARSE_ERROR",
                suggestions=["Each line must be t_us,x,y,p with integer fields"]
            )
        parsed[column] = frame[column].astype(np.int64).to_numpy()

    t, x, y, p = (parsed[c] for c in EVENT_COLUMNS)
    width = width if width is not None else metadata.get("width")
    height = height if height is not None else metadata.get("height")
    if width is None or height is None:
        raise _event_error(f"{path}: sensor resolution unknown", "MISSING_RESOLUTION",
                           suggestions=["Pass width/height or keep the '# width=.. height=..' line"])

    def first_offending(mask: np.ndarray) -> int:
        return int(lines[np.flatnonzero(mask)[0]])

    out_of_bounds = (x < 0) | (x >= width) | (y < 0) | (y >= height)
    if out_of_bounds.any():
        raise _event_error(f"{path}: line {first_offending(out_of_bounds)}: coordinates outside "
                           f"{width}x{height}", "EVENT_OUT_OF_BOUNDS")
    bad_polarity = (p != 1) & (p != -1)
    if bad_polarity.any():
        raise _event_error(f"{path}: line {first_offending(bad_polarity)}: polarity must be +1 or -1",
                           "EVENT_PARSE_ERROR")
    if t.size and (t < 0).any():
        raise _event_error(f"{path}: line {first_offending(t < 0)}: negative timestamp", "EVENT_PARSE_ERROR")
    unsorted = np.concatenate([[False], np.diff(t) < 0])
    if unsorted.any():
        raise _event_error(f"{path}: line {first_offending(unsorted)}: events not sorted by t_us",
                           "EVENT_NOT_SORTED")

    t_start = metadata.get("t_start", int(t.min()) if t.size else 0)
    t_end = metadata.get("t_end", int(t.max()) if t.size else 0)
    return EventStream.from_arrays(t, x, y, p, width, height, t_start, t_end)
