"""Event-stream parsing and voxel-grid accumulation.

Two on-disk event formats are supported:

* CSV: one record per line, ``t_us,x,y,p`` with ``p`` in {0, 1} mapped to
  {-1, +1};
* binary: packed little-endian records ``(u64 t_us, u16 x, u16 y, i8 p)``,
  13 bytes each, with ``p`` in {-1, +1}.

Timestamps are microseconds. Events are accumulated into voxel grids with
``bins`` temporal slices; polarity mass is split between the two nearest
bins by bilinear weight on normalized time, and spatial placement is
nearest-pixel, so the sum over all voxels equals the signed polarity sum of
the window (a conservation law the tests rely on).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OrderingError, ParseError, ValidationError

BINARY_RECORD = struct.Struct("<QHHb")  # (t_us, x, y, p), 13 bytes


@dataclass(frozen=True)
class Event:
    t: int          # microseconds, non-negative
    x: int          # column, 0 <= x < width
    y: int          # row, 0 <= y < height
    polarity: int   # +1 or -1


@dataclass
class EventVoxelGrid:
    """``bins`` temporal slices of signed event counts over a (H, W) grid."""

    bins: np.ndarray          # (B, H, W) float64
    t_start: int              # microseconds, inclusive
    t_end: int                # microseconds, exclusive
    frame_id: int = 0

    @property
    def num_bins(self):
        return self.bins.shape[0]

    @property
    def height(self):
        return self.bins.shape[1]

    @property
    def width(self):
        return self.bins.shape[2]

    def total_mass(self):
        return float(self.bins.sum())


def _validate_event_fields(t, x, y, p, width, height, where):
    if not (0 <= x < width and 0 <= y < height):
        raise ValidationError(
            f"event coordinate ({x}, {y}) outside {width}x{height} sensor at {where}"
        )
    if t < 0:
        raise ValidationError(f"negative timestamp {t} at {where}")
    if p not in (-1, 1):
        raise ValidationError(f"polarity must be -1 or +1, got {p} at {where}")


def parse_event_stream(source, format, width, height):
    """Parse a byte stream into a timestamp-sorted event list.

    ``source`` is a bytes object or a binary file object. Rejects malformed
    records (with the byte offset), out-of-range coordinates, and streams
    whose timestamps decrease.
    """
    if hasattr(source, "read"):
        data = source.read()
    else:
        data = bytes(source)
    if format == "csv":
        events = _parse_csv(data, width, height)
    elif format == "binary":
        events = _parse_binary(data, width, height)
    else:
        raise ValidationError(f"unknown event format {format!r}")
    last_t = -1
    for i, ev in enumerate(events):
        if ev.t < last_t:
            raise OrderingError(
                f"timestamps not sorted: event {i} has t={ev.t} after t={last_t}"
            )
        last_t = ev.t
    return events


def _parse_csv(data, width, height):
    events = []
    offset = 0
    for raw_line in data.split(b"\n"):
        line = raw_line.strip()
        if line and not line.startswith(b"#"):
            parts = line.split(b",")
            if len(parts) != 4:
                raise ParseError(f"expected 4 comma-separated fields, got {len(parts)}", offset)
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                raise ParseError(f"non-integer field in record {line.decode(errors='replace')!r}",
                                 offset) from None
            if p not in (0, 1):
                raise ParseError(f"CSV polarity must be 0 or 1, got {p}", offset)
            p = 1 if p == 1 else -1
            _validate_event_fields(t, x, y, p, width, height, f"byte offset {offset}")
            events.append(Event(t, x, y, p))
        offset += len(raw_line) + 1
    return events


def _parse_binary(data, width, height):
    rec = BINARY_RECORD
    if len(data) % rec.size != 0:
        raise ParseError(
            f"binary stream length {len(data)} is not a multiple of {rec.size}",
            len(data) - len(data) % rec.size,
        )
    events = []
    for offset in range(0, len(data), rec.size):
        t, x, y, p = rec.unpack_from(data, offset)
        _validate_event_fields(t, x, y, p, width, height, f"byte offset {offset}")
        events.append(Event(t, x, y, p))
    return events


def write_events_csv(events, fp):
    for ev in events:
        fp.write(f"{ev.t},{ev.x},{ev.y},{1 if ev.polarity > 0 else 0}\n".encode())


def write_events_binary(events, fp):
    for ev in events:
        fp.write(BINARY_RECORD.pack(ev.t, ev.x, ev.y, ev.polarity))


def build_voxel_grid(events, t_start, t_end, num_bins, width, height, frame_id=0):
    """Accumulate events from [t_start, t_end) into a (B, H, W) voxel grid.

    Each event splits its polarity between the two temporal bins nearest to
    tau = (t - t_start) * (B - 1) / (t_end - t_start); the split weights sum
    to one, which makes total grid mass equal the signed polarity sum.
    """
    if num_bins < 1:
        raise ConfigError(f"voxel grid needs at least one bin, got {num_bins}")
    if t_end <= t_start:
        raise ConfigError(f"empty time window [{t_start}, {t_end})")
    grid = np.zeros((num_bins, height, width), dtype=np.float64)
    if events:
        # sort for a fixed accumulation order (bit-identical results under
        # permutation of the input list)
        events = sorted(events, key=lambda e: (e.t, e.y, e.x, e.polarity))
        t = np.array([e.t for e in events], dtype=np.float64)
        xs = np.array([e.x for e in events], dtype=np.intp)
        ys = np.array([e.y for e in events], dtype=np.intp)
        ps = np.array([e.polarity for e in events], dtype=np.float64)
        if t.min() < t_start or t.max() >= t_end:
            raise ValidationError(
                f"events outside window [{t_start}, {t_end}): "
                f"range [{int(t.min())}, {int(t.max())}]"
            )
        if num_bins == 1:
            tau = np.zeros_like(t)
        else:
            tau = (t - t_start) * (num_bins - 1) / (t_end - t_start)
        k0 = np.floor(tau).astype(np.intp)
        k0 = np.minimum(k0, num_bins - 1)
        frac = tau - k0
        flat = grid.reshape(num_bins, -1)
        idx = ys * width + xs
        np.add.at(flat, (k0, idx), ps * (1.0 - frac))
        hi = k0 + 1
        valid = hi < num_bins
        np.add.at(flat, (hi[valid], idx[valid]), ps[valid] * frac[valid])
    return EventVoxelGrid(bins=grid, t_start=int(t_start), t_end=int(t_end),
                          frame_id=frame_id)


def slice_fixed_duration(events, window_us, num_bins, width, height, t_start=None):
    """Slice a sorted event list into consecutive fixed-duration voxel grids.

    Returns one grid per window from ``t_start`` (default: first event, or 0)
    through the last event; trailing windows containing no events are not
    emitted, interior empty windows are (as all-zero grids).
    """
    if window_us <= 0:
        raise ConfigError("window duration must be positive")
    if not events:
        return []
    if t_start is None:
        t_start = events[0].t
    t_last = events[-1].t
    grids = []
    frame_id = 0
    lo = 0
    w_start = t_start
    while w_start <= t_last:
        w_end = w_start + window_us
        hi = lo
        while hi < len(events) and events[hi].t < w_end:
            hi += 1
        grids.append(build_voxel_grid(events[lo:hi], w_start, w_end,
                                      num_bins, width, height, frame_id))
        frame_id += 1
        lo = hi
        w_start = w_end
    return grids


def slice_fixed_count(events, count, num_bins, width, height):
    """Slice a sorted event list into grids of ``count`` events each.

    The final partial chunk, if any, is dropped. Each grid's window spans
    [first event t, last event t + 1) so every event lies inside it.
    """
    if count <= 0:
        raise ConfigError("events per window must be positive")
    grids = []
    for frame_id, lo in enumerate(range(0, len(events) - count + 1, count)):
        chunk = events[lo:lo + count]
        grids.append(build_voxel_grid(chunk, chunk[0].t, chunk[-1].t + 1,
                                      num_bins, width, height, frame_id))
    return grids
