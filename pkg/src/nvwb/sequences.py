"""Three-channel pulse sequences (laser, microwave, camera) for the five protocols.

Times are integer nanoseconds. A pulsed sequence half looks like::

    laser   [init]........................[readout = exposure + 2 guards]
    mw             guard [pulses] guard
    camera                                [exposure]

The camera opens together with the readout laser. When a reference is
requested, a second half with every microwave segment removed follows one
guard later. ODMR keeps the laser on for the whole sequence and gates only
the microwave and the camera.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import keyvalue
from .errors import ConfigError, SpecError

CHANNELS = ("laser", "microwave", "camera")
PROTOCOLS = ("odmr", "rabi", "ramsey", "hahn", "t1")
DEFAULT_GUARD_NS = 1_000


class Segment(NamedTuple):
    channel: str
    start: int
    end: int

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class PulseSequence:
    segments: tuple[Segment, ...]
    total_duration: int
    protocol: str | None = None
    value: float | None = None
    exposure: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        segs = tuple(sorted((Segment(*s) for s in self.segments),
                            key=lambda s: (s.start, s.channel, s.end)))
        object.__setattr__(self, "segments", segs)

    def on(self, channel: str) -> list[Segment]:
        return [s for s in self.segments if s.channel == channel]


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str
    sweep: tuple = ()
    init_laser: int = 5_000_000
    exposure: int = 500_000
    pi_half: int | None = None
    pi: int | None = None
    include_reference: bool = True
    guard: int = DEFAULT_GUARD_NS
    repeats: int = 1

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise SpecError(f"unknown protocol {self.kind!r}; expected one of {PROTOCOLS}")
        sweep = tuple(float(v) for v in np.atleast_1d(self.sweep))
        if not sweep:
            raise SpecError("sweep must not be empty")
        if any(v < 0 for v in sweep):
            raise SpecError("sweep values must be >= 0")
        object.__setattr__(self, "sweep", sweep)
        half, full = self.pi_half, self.pi
        if half is not None and full is not None and abs(full - 2 * half) > 1:
            raise SpecError(f"pi ({full} ns) must equal 2 * pi_half ({half} ns) within 1 ns")
        if half is None and full is not None:
            half = int(round(full / 2))
        if full is None and half is not None:
            full = 2 * int(round(half))
        object.__setattr__(self, "pi_half", None if half is None else int(round(half)))
        object.__setattr__(self, "pi", None if full is None else int(round(full)))
        for name in ("init_laser", "exposure", "guard"):
            v = getattr(self, name)
            if int(v) != v or v < (0 if name == "guard" else 1):
                raise SpecError(f"{name} must be a positive integer number of ns")
            object.__setattr__(self, name, int(v))

    @classmethod
    def from_text(cls, text: str) -> "ProtocolSpec":
        kv = keyvalue.parse(text)
        names = {
            "kind": ("kind", str),
            "sweep": ("sweep", parse_sweep),
            "init_laser_ns": ("init_laser", int),
            "exposure_ns": ("exposure", int),
            "pi_half_ns": ("pi_half", float),
            "pi_ns": ("pi", float),
            "include_reference": ("include_reference", None),
            "guard_ns": ("guard", int),
            "repeats": ("repeats", int),
        }
        kwargs = {}
        for key, value in kv.items():
            if key not in names:
                raise ConfigError(f"unknown protocol key {key!r}")
            attr, conv = names[key]
            if conv is None:
                kwargs[attr] = keyvalue.to_bool(key, value)
            else:
                try:
                    kwargs[attr] = conv(value)
                except ValueError:
                    raise ConfigError(f"{key}: bad value {value!r}") from None
        if "kind" not in kwargs:
            raise ConfigError("protocol spec needs 'kind'")
        return cls(**kwargs)

    def to_text(self) -> str:
        items = [("kind", self.kind), ("sweep", ",".join(repr(v) for v in self.sweep)),
                 ("init_laser_ns", self.init_laser), ("exposure_ns", self.exposure)]
        if self.pi_half is not None:
            items += [("pi_half_ns", self.pi_half), ("pi_ns", self.pi)]
        items += [("include_reference", self.include_reference), ("guard_ns", self.guard),
                  ("repeats", self.repeats)]
        return keyvalue.dump(items)


def parse_sweep(text: str) -> tuple[float, ...]:
    """``start:stop:step`` (stop inclusive) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(text)
        start, stop, step = parts
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return tuple(float(v) for v in start + step * np.arange(n))
    return tuple(float(v) for v in text.split(",") if v.strip())


def _mw_block(spec: ProtocolSpec, tau: int) -> tuple[list[tuple[int, int]], int]:
    """Microwave pulses relative to the block start, and the block length."""
    kind = spec.kind
    if kind == "rabi":
        return ([(0, tau)] if tau > 0 else []), tau
    if kind in ("ramsey", "hahn") and not spec.pi_half:
        raise SpecError(f"{kind} needs a non-zero pi_half")
    h = spec.pi_half
    if kind == "ramsey":
        return [(0, h), (h + tau, 2 * h + tau)], 2 * h + tau
    if kind == "hahn":
        p = spec.pi
        first = tau // 2
        second = tau - first
        a = h + first
        b = a + p + second
        return [(0, h), (a, a + p), (b, b + h)], b + h
    return [], 0


def _half(spec: ProtocolSpec, tau: int, t0: int, with_mw: bool) -> tuple[list[Segment], int]:
    g, exp = spec.guard, spec.exposure
    init_end = t0 + spec.init_laser
    segs = [Segment("laser", t0, init_end)]
    if spec.kind == "t1":
        r0 = init_end + tau
    else:
        pulses, length = _mw_block(spec, tau)
        m0 = init_end + g
        if with_mw:
            segs += [Segment("microwave", m0 + a, m0 + b) for a, b in pulses]
        r0 = m0 + length + g
    end = r0 + exp + 2 * g
    segs += [Segment("laser", r0, end), Segment("camera", r0, r0 + exp)]
    return segs, end


def _odmr_half(spec: ProtocolSpec, t0: int, with_mw: bool) -> tuple[list[Segment], int]:
    g, exp = spec.guard, spec.exposure
    m0 = t0 + spec.init_laser
    segs = [Segment("camera", m0 + g, m0 + g + exp)]
    if with_mw:
        segs.append(Segment("microwave", m0, m0 + exp + 2 * g))
    return segs, m0 + exp + 2 * g


def build(spec: ProtocolSpec, value) -> PulseSequence:
    """Timeline for one sweep point (ns durations, or Hz for ODMR)."""
    if float(value) not in spec.sweep:
        raise SpecError(f"value {value!r} is not in the sweep")
    value = float(value)
    meta = {"repeats": spec.repeats}
    halves = [True, False] if spec.include_reference else [True]
    segs: list[Segment] = []
    t0 = 0
    for with_mw in halves:
        if spec.kind == "odmr":
            part, end = _odmr_half(spec, t0, with_mw)
        else:
            part, end = _half(spec, int(round(value)), t0, with_mw)
        segs += part
        t0 = end + spec.guard
    total = t0 - spec.guard
    if spec.kind == "odmr":
        segs.append(Segment("laser", 0, total))
        meta["mw_frequency_hz"] = value
    return PulseSequence(tuple(segs), total, spec.kind, value, spec.exposure, meta)


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str


def _merged(segments: list[Segment]) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for s in sorted(segments, key=lambda s: s.start):
        if out and s.start <= out[-1][1]:
            out[-1][1] = max(out[-1][1], s.end)
        else:
            out.append([s.start, s.end])
    return [tuple(x) for x in out]


def validate(seq: PulseSequence) -> list[Violation]:
    """Every invariant breach in ``seq``; an empty list means the sequence is sound."""
    out = []
    for s in seq.segments:
        if s.channel not in CHANNELS:
            out.append(Violation("channel", f"unknown channel {s.channel!r}"))
        if not 0 <= s.start < s.end <= seq.total_duration:
            out.append(Violation("bounds", f"{s} outside [0, {seq.total_duration}] or empty"))
    for ch in CHANNELS:
        segs = sorted(seq.on(ch), key=lambda s: (s.start, s.end))
        for a, b in zip(segs, segs[1:]):
            if b.start < a.end:
                out.append(Violation("overlap", f"{ch}: {a} overlaps {b}"))
    lasers = _merged(seq.on("laser"))
    for cam in seq.on("camera"):
        if seq.exposure is not None and cam.duration != seq.exposure:
            out.append(Violation("exposure", f"{cam} lasts {cam.duration} ns, expected {seq.exposure}"))
        if not any(a <= cam.start and cam.end <= b for a, b in lasers):
            out.append(Violation("containment", f"{cam} is not inside a laser segment"))
    return out


def export_timing_table(seq: PulseSequence) -> str:
    """CSV ``channel,start_ns,end_ns`` sorted by (start, channel).

    Sequence-level fields go into leading ``#`` comments so the table parses
    back into an identical sequence.
    """
    buf = io.StringIO()
    if seq.protocol is not None:
        buf.write(f"# protocol: {seq.protocol}\n")
        buf.write(f"# value: {seq.value!r}\n")
        buf.write(f"# total_ns: {seq.total_duration}\n")
        if seq.exposure is not None:
            buf.write(f"# exposure_ns: {seq.exposure}\n")
        for k, v in sorted(seq.meta.items()):
            buf.write(f"# meta.{k}: {v!r}\n")
    elif seq.total_duration:
        buf.write(f"# total_ns: {seq.total_duration}\n")
    buf.write("channel,start_ns,end_ns\n")
    for s in sorted(seq.segments, key=lambda s: (s.start, s.channel)):
        buf.write(f"{s.channel},{s.start},{s.end}\n")
    return buf.getvalue()


def parse_timing_table(text: str) -> PulseSequence:
    fields: dict[str, str] = {}
    meta = {}
    segs = []
    header_seen = False
    for line in text.splitlines():
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            key, _, value = s[1:].partition(":")
            key, value = key.strip(), value.strip()
            if key.startswith("meta."):
                meta[key[5:]] = _literal(value)
            else:
                fields[key] = value
            continue
        if not header_seen:
            if s != "channel,start_ns,end_ns":
                raise ConfigError(f"unexpected timing-table header {s!r}")
            header_seen = True
            continue
        ch, a, b = s.split(",")
        segs.append(Segment(ch, int(a), int(b)))
    if not header_seen:
        raise ConfigError("timing table has no header")
    total = int(fields.get("total_ns", max((sg.end for sg in segs), default=0)))
    value = _literal(fields["value"]) if "value" in fields else None
    exposure = int(fields["exposure_ns"]) if "exposure_ns" in fields else None
    return PulseSequence(tuple(segs), total, fields.get("protocol"), value, exposure, meta)


def _literal(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text.strip("'\"")
