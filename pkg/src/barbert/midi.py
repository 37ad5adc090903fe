"""Standard MIDI File reading: raw events and normalized note streams.

Only what the tokenizer needs is interpreted: notes, program changes,
tempo and time-signature metas. Everything else is skipped structurally.
Times are kept as exact fractions of a quarter note (one beat).
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from collections import defaultdict, deque
from dataclasses import dataclass, field
from fractions import Fraction

DRUM_CHANNEL = 9
DRUM_PROGRAM = 128
DEFAULT_BPM = 120.0


class MidiError(ValueError):
    """Base class for unreadable MIDI input."""


class MalformedHeader(MidiError):
    pass


class UnsupportedFormat(MidiError):
    pass


class TruncatedChunk(MidiError):
    pass


class ZeroTimeDivision(MidiError):
    pass


@dataclass(frozen=True)
class RawEvent:
    """One channel or meta event at an absolute tick.

    ``kind`` is one of ``note_on``, ``note_off``, ``program``, ``tempo``,
    ``time_signature``. For notes ``data1``/``data2`` are pitch/velocity,
    for program changes ``data1`` is the program, for tempo ``data1`` is
    microseconds per quarter note, for time signatures numerator/denominator.
    """

    tick: int
    kind: str
    channel: int = -1
    data1: int = 0
    data2: int = 0


@dataclass
class SmfSong:
    time_division: int
    tracks: list[list[RawEvent]] = field(default_factory=list)
    end_ticks: list[int] = field(default_factory=list)


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset: Fraction
    duration: Fraction
    pitch: int
    velocity: int
    program: int
    is_drum: bool = False

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"non-positive duration {self.duration}")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")
        if not 0 <= self.program <= DRUM_PROGRAM:
            raise ValueError(f"program out of range: {self.program}")
        if self.is_drum != (self.program == DRUM_PROGRAM):
            raise ValueError("is_drum must coincide with program 128")

    @property
    def offset(self) -> Fraction:
        return self.onset + self.duration


@dataclass(frozen=True)
class TempoCurve:
    """Piecewise-constant tempo: ``segments`` is a list of (start_beat, bpm)."""

    segments: tuple[tuple[Fraction, float], ...] = ((Fraction(0), DEFAULT_BPM),)

    def __post_init__(self):
        if not self.segments or self.segments[0][0] != 0:
            raise ValueError("tempo curve must start at beat 0")
        starts = [s for s, _ in self.segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("tempo segment starts must be strictly increasing")
        if any(bpm <= 0 for _, bpm in self.segments):
            raise ValueError("bpm must be positive")

    def bpm_at(self, beat) -> float:
        starts = [s for s, _ in self.segments]
        i = bisect_right(starts, beat) - 1
        return self.segments[max(i, 0)][1]


def _read_varlen(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise TruncatedChunk("variable-length quantity runs past chunk end")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise TruncatedChunk("variable-length quantity longer than 4 bytes")


# data bytes per channel-message status nibble
_CHANNEL_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


def _parse_track(data: bytes, start: int, end: int) -> tuple[list[RawEvent], int]:
    events: list[RawEvent] = []
    pos = start
    tick = 0
    status = None
    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise TruncatedChunk("event missing after delta time")
        byte = data[pos]
        if byte == 0xFF:
            if pos + 2 > end:
                raise TruncatedChunk("meta event header truncated")
            meta_type = data[pos + 1]
            length, pos = _read_varlen(data, pos + 2, end)
            if pos + length > end:
                raise TruncatedChunk("meta event payload truncated")
            payload = data[pos : pos + length]
            pos += length
            if meta_type == 0x51 and length == 3:
                events.append(RawEvent(tick, "tempo", data1=int.from_bytes(payload, "big")))
            elif meta_type == 0x58 and length >= 2:
                events.append(RawEvent(tick, "time_signature", data1=payload[0], data2=2 ** payload[1]))
            elif meta_type == 0x2F:
                break
            continue
        if byte in (0xF0, 0xF7):
            length, pos = _read_varlen(data, pos + 1, end)
            if pos + length > end:
                raise TruncatedChunk("sysex payload truncated")
            pos += length
            status = None
            continue
        if byte & 0x80:
            status = byte
            pos += 1
        elif status is None:
            raise MidiError(f"data byte 0x{byte:02x} without running status")
        kind, channel = status >> 4, status & 0x0F
        n = _CHANNEL_DATA_LEN.get(kind)
        if n is None:
            # system common messages carry no length; treat as corruption
            raise MidiError(f"unexpected status byte 0x{status:02x}")
        if pos + n > end:
            raise TruncatedChunk("channel message truncated")
        d1 = data[pos] & 0x7F
        d2 = data[pos + 1] & 0x7F if n == 2 else 0
        pos += n
        if kind == 0x9 and d2 > 0:
            events.append(RawEvent(tick, "note_on", channel, d1, d2))
        elif kind == 0x8 or kind == 0x9:
            events.append(RawEvent(tick, "note_off", channel, d1, 0))
        elif kind == 0xC:
            events.append(RawEvent(tick, "program", channel, d1))
    return events, tick


def parse_smf(data: bytes) -> SmfSong:
    """Parse a format 0 or 1 Standard MIDI File into absolute-tick events."""
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MalformedHeader("missing MThd header")
    header_len = struct.unpack(">I", data[4:8])[0]
    if header_len < 6 or len(data) < 8 + header_len:
        raise MalformedHeader("header chunk too short")
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise UnsupportedFormat("SMF format 2 (independent sequences) is not supported")
    if fmt not in (0, 1):
        raise UnsupportedFormat(f"unknown SMF format {fmt}")
    if division & 0x8000:
        raise UnsupportedFormat("SMPTE time division is not supported")
    if division == 0:
        raise ZeroTimeDivision("time division is zero")

    song = SmfSong(time_division=division)
    pos = 8 + header_len
    while pos < len(data) and len(song.tracks) < ntracks:
        if pos + 8 > len(data):
            raise TruncatedChunk("chunk header truncated")
        chunk_id = data[pos : pos + 4]
        length = struct.unpack(">I", data[pos + 4 : pos + 8])[0]
        start, end = pos + 8, pos + 8 + length
        if end > len(data):
            raise TruncatedChunk(f"chunk {chunk_id!r} declares {length} bytes, {len(data) - start} present")
        if chunk_id == b"MTrk":
            events, end_tick = _parse_track(data, start, end)
            song.tracks.append(events)
            song.end_ticks.append(end_tick)
        pos = end
    return song


def extract_notes(song: SmfSong) -> tuple[list[NoteEvent], TempoCurve]:
    """Pair note-ons with note-offs and convert ticks to beats.

    Tracks are merged into one stream ordered by onset. Note-offs close the
    earliest open note of the same track, channel and pitch; notes still
    open at the end of their track are closed there.
    """
    td = song.time_division
    # program changes are global per channel across tracks
    program_changes: dict[int, list[tuple[int, int]]] = defaultdict(list)
    tempos: dict[int, float] = {}
    for events in song.tracks:
        for ev in events:
            if ev.kind == "program":
                program_changes[ev.channel].append((ev.tick, ev.data1))
            elif ev.kind == "tempo" and ev.data1 > 0:
                tempos[ev.tick] = 60_000_000 / ev.data1
    for changes in program_changes.values():
        changes.sort(key=lambda c: c[0])
    change_ticks = {ch: [t for t, _ in changes] for ch, changes in program_changes.items()}

    def program_at(channel: int, tick: int) -> int:
        if channel == DRUM_CHANNEL:
            return DRUM_PROGRAM
        ticks = change_ticks.get(channel)
        if not ticks:
            return 0
        i = bisect_right(ticks, tick) - 1
        return program_changes[channel][i][1] if i >= 0 else 0

    notes: list[NoteEvent] = []

    def emit(channel: int, pitch: int, on_tick: int, velocity: int, off_tick: int) -> None:
        if off_tick <= on_tick:
            return
        program = program_at(channel, on_tick)
        notes.append(
            NoteEvent(
                onset=Fraction(on_tick, td),
                duration=Fraction(off_tick - on_tick, td),
                pitch=pitch,
                velocity=velocity,
                program=program,
                is_drum=program == DRUM_PROGRAM,
            )
        )

    for events, end_tick in zip(song.tracks, song.end_ticks):
        open_notes: dict[tuple[int, int], deque] = defaultdict(deque)
        for ev in events:
            if ev.kind == "note_on":
                open_notes[(ev.channel, ev.data1)].append((ev.tick, ev.data2))
            elif ev.kind == "note_off":
                queue = open_notes.get((ev.channel, ev.data1))
                if queue:
                    on_tick, velocity = queue.popleft()
                    emit(ev.channel, ev.data1, on_tick, velocity, ev.tick)
        for (channel, pitch), queue in open_notes.items():
            for on_tick, velocity in queue:
                # a dangling note at the very last tick still gets one tick
                emit(channel, pitch, on_tick, velocity, max(end_tick, on_tick + 1))

    notes.sort(key=lambda n: (n.onset, n.program, n.pitch, n.duration, n.velocity))

    segments = [(Fraction(0), DEFAULT_BPM)]
    for tick in sorted(tempos):
        beat = Fraction(tick, td)
        if beat == segments[-1][0]:
            segments[-1] = (beat, tempos[tick])
        else:
            segments.append((beat, tempos[tick]))
    return notes, TempoCurve(tuple(segments))


def read_midi(path) -> tuple[list[NoteEvent], TempoCurve]:
    with open(path, "rb") as fh:
        return extract_notes(parse_smf(fh.read()))
