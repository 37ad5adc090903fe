"""REMI+ vocabulary and per-bar encoding.

A bar is ``<bar> <tempo>`` followed by one five-token group per note:
``<position> <instrument> <pitch | pitch-drum> <velocity> <duration>``.
Bars are fixed at 4 beats with 12 positions per beat.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .midi import DRUM_PROGRAM, NoteEvent, TempoCurve

BEATS_PER_BAR = 4
POSITIONS_PER_BEAT = 12
N_POSITIONS = BEATS_PER_BAR * POSITIONS_PER_BEAT

# quantizer constants; the upstream REMI+ bin edges are not published
TEMPO_MIN, TEMPO_MAX, N_TEMPO = 30.0, 240.0, 32
N_VELOCITY = 32
FINE_DURATIONS = [Fraction(k, POSITIONS_PER_BEAT) for k in range(1, N_POSITIONS + 1)]
COARSE_DURATIONS = [Fraction(b) for b in range(6, 25, 2)]
DURATION_GRID = FINE_DURATIONS + COARSE_DURATIONS

CATEGORIES = (
    ("bar", 1),
    ("tempo", N_TEMPO),
    ("instrument", 129),
    ("pitch", 128),
    ("pitch_drum", 128),
    ("position", N_POSITIONS),
    ("duration", len(DURATION_GRID)),
    ("velocity", N_VELOCITY),
)
SPECIALS = ("PAD", "MASK", "CLS", "UNK")


class CodecError(ValueError):
    pass


class NonPositiveTempo(CodecError):
    pass


class OnsetOutOfBar(CodecError):
    pass


class VelocityOutOfRange(CodecError):
    pass


class NonPositiveDuration(CodecError):
    pass


class MalformedBar(CodecError):
    pass


class Vocab:
    """Bijective map between token ids and (category, value) pairs."""

    def __init__(self):
        self.offsets: dict[str, int] = {}
        self.sizes: dict[str, int] = {}
        next_id = 0
        for name, size in CATEGORIES:
            self.offsets[name] = next_id
            self.sizes[name] = size
            next_id += size
        self.musical_size = next_id
        self.specials = {name: self.musical_size + i for i, name in enumerate(SPECIALS)}
        self.size = self.musical_size + len(SPECIALS)
        # category index per musical id, for vectorized lookups
        self.category_of_id = np.zeros(self.musical_size, dtype=np.int64)
        for i, (name, size) in enumerate(CATEGORIES):
            self.category_of_id[self.offsets[name] : self.offsets[name] + size] = i

    @property
    def category_sizes(self) -> list[int]:
        return [size for _, size in CATEGORIES]

    @property
    def pad(self) -> int:
        return self.specials["PAD"]

    @property
    def mask(self) -> int:
        return self.specials["MASK"]

    @property
    def cls(self) -> int:
        return self.specials["CLS"]

    @property
    def unk(self) -> int:
        return self.specials["UNK"]

    def id_of(self, category: str, value: int = 0) -> int:
        if category in self.specials:
            return self.specials[category]
        size = self.sizes[category]
        if not 0 <= value < size:
            raise KeyError(f"{category} value {value} outside 0..{size - 1}")
        return self.offsets[category] + int(value)

    def lookup(self, token_id: int) -> tuple[str, int]:
        token_id = int(token_id)
        if self.musical_size <= token_id < self.size:
            return SPECIALS[token_id - self.musical_size], 0
        if not 0 <= token_id < self.musical_size:
            raise KeyError(f"token id {token_id} outside vocabulary")
        name = CATEGORIES[self.category_of_id[token_id]][0]
        return name, token_id - self.offsets[name]

    def is_category(self, token_id: int, category: str) -> bool:
        off = self.offsets[category]
        return off <= token_id < off + self.sizes[category]

    def __len__(self) -> int:
        return self.size


@lru_cache(maxsize=1)
def build_vocab() -> Vocab:
    return Vocab()


@dataclass(frozen=True)
class BarTokens:
    song_id: str
    bar_index: int
    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


# -- quantizers --------------------------------------------------------------

_TEMPO_LOG_CENTERS = np.log(TEMPO_MIN) + np.arange(N_TEMPO) * (np.log(TEMPO_MAX) - np.log(TEMPO_MIN)) / (N_TEMPO - 1)
TEMPO_CENTERS = np.exp(_TEMPO_LOG_CENTERS)


def quantize_tempo(bpm: float) -> int:
    if not bpm > 0:
        raise NonPositiveTempo(f"bpm must be positive, got {bpm}")
    return int(np.argmin(np.abs(_TEMPO_LOG_CENTERS - math.log(bpm))))


def dequantize_tempo(index: int) -> float:
    return float(TEMPO_CENTERS[index])


def quantize_position(onset_in_bar) -> int:
    if not 0 <= onset_in_bar < BEATS_PER_BAR:
        raise OnsetOutOfBar(f"onset {onset_in_bar} outside [0, {BEATS_PER_BAR})")
    slot = math.floor(Fraction(onset_in_bar) * POSITIONS_PER_BEAT + Fraction(1, 2))
    return min(max(slot, 0), N_POSITIONS - 1)


def dequantize_position(index: int) -> Fraction:
    return Fraction(index, POSITIONS_PER_BEAT)


def quantize_velocity(velocity: int) -> int:
    if not 1 <= velocity <= 127:
        raise VelocityOutOfRange(f"velocity {velocity} outside 1..127")
    return (int(velocity) - 1) * N_VELOCITY // 127


def _velocity_representatives() -> list[int]:
    members: dict[int, list[int]] = {}
    for v in range(1, 128):
        members.setdefault(quantize_velocity(v), []).append(v)
    return [members[b][len(members[b]) // 2] for b in range(N_VELOCITY)]


VELOCITY_CENTERS = _velocity_representatives()


def dequantize_velocity(index: int) -> int:
    return VELOCITY_CENTERS[index]


_DURATION_TWELFTHS = np.array([int(d * POSITIONS_PER_BEAT) for d in DURATION_GRID], dtype=np.int64)


def quantize_duration(duration) -> int:
    if not duration > 0:
        raise NonPositiveDuration(f"duration must be positive, got {duration}")
    twelfths = Fraction(duration) * POSITIONS_PER_BEAT
    if twelfths >= _DURATION_TWELFTHS[-1]:
        return len(DURATION_GRID) - 1
    # exact comparison; argmin prefers the shorter bin on a tie
    diffs = [abs(twelfths - int(g)) for g in _DURATION_TWELFTHS]
    return int(min(range(len(diffs)), key=diffs.__getitem__))


def dequantize_duration(index: int) -> Fraction:
    return DURATION_GRID[index]


# -- encode / decode ---------------------------------------------------------


def _note_group(vocab: Vocab, note: NoteEvent, position: int) -> list[int]:
    pitch_cat = "pitch_drum" if note.is_drum else "pitch"
    return [
        vocab.id_of("position", position),
        vocab.id_of("instrument", note.program),
        vocab.id_of(pitch_cat, note.pitch),
        vocab.id_of("velocity", quantize_velocity(note.velocity)),
        vocab.id_of("duration", quantize_duration(note.duration)),
    ]


def split_bars(notes: list[NoteEvent]) -> list[list[NoteEvent]]:
    """Group notes by 4-beat bar of their onset; bars 0..last are all present."""
    if not notes:
        return []
    bars: dict[int, list[NoteEvent]] = {}
    for note in notes:
        bars.setdefault(int(note.onset // BEATS_PER_BAR), []).append(note)
    return [bars.get(i, []) for i in range(max(bars) + 1)]


def encode_bar(notes: list[NoteEvent], bar_index: int, bpm: float, song_id: str = "") -> BarTokens:
    vocab = build_vocab()
    start = bar_index * BEATS_PER_BAR
    placed = []
    for note in notes:
        position = quantize_position(Fraction(note.onset) - start)
        placed.append((position, note.program, note.pitch, note.velocity, note.duration, note))
    placed.sort(key=lambda p: p[:5])
    ids = [vocab.id_of("bar"), vocab.id_of("tempo", quantize_tempo(bpm))]
    for position, *_, note in placed:
        ids.extend(_note_group(vocab, note, position))
    return BarTokens(song_id, bar_index, tuple(ids))


def encode_song(notes: list[NoteEvent], tempo: TempoCurve | None = None, song_id: str = "") -> list[BarTokens]:
    """Encode a note stream into one BarTokens per 4-beat bar.

    Bars between the first and last note-bearing bar are kept even when
    empty; nothing is emitted after the last note's bar.
    """
    tempo = tempo or TempoCurve()
    notes = sorted(notes, key=lambda n: (n.onset, n.program, n.pitch, n.velocity, n.duration))
    return [
        encode_bar(bar_notes, i, tempo.bpm_at(i * BEATS_PER_BAR), song_id)
        for i, bar_notes in enumerate(split_bars(notes))
    ]


def decode_bar(bar: BarTokens) -> tuple[list[NoteEvent], float]:
    """Invert one bar up to quantization. Onsets are relative to the bar start."""
    vocab = build_vocab()
    ids = bar.ids
    if len(ids) < 2 or ids[0] != vocab.id_of("bar") or not vocab.is_category(ids[1], "tempo"):
        raise MalformedBar("bar must start with <bar> <tempo>")
    if (len(ids) - 2) % 5:
        raise MalformedBar(f"{len(ids) - 2} note tokens is not a whole number of 5-token groups")
    bpm = dequantize_tempo(vocab.lookup(ids[1])[1])
    notes = []
    last_position = -1
    for g in range(2, len(ids), 5):
        cats = [vocab.lookup(t) for t in ids[g : g + 5]]
        (c_pos, pos), (c_ins, program), (c_pitch, pitch), (c_vel, vel), (c_dur, dur) = cats
        if (c_pos, c_ins, c_vel, c_dur) != ("position", "instrument", "velocity", "duration"):
            raise MalformedBar(f"unexpected token layout {[c for c, _ in cats]} at offset {g}")
        expected_pitch = "pitch_drum" if program == DRUM_PROGRAM else "pitch"
        if c_pitch != expected_pitch:
            raise MalformedBar(f"{c_pitch} token after instrument {program}")
        if pos < last_position:
            raise MalformedBar("positions must be non-decreasing")
        last_position = pos
        notes.append(
            NoteEvent(
                onset=dequantize_position(pos),
                duration=dequantize_duration(dur),
                pitch=pitch,
                velocity=dequantize_velocity(vel),
                program=program,
                is_drum=program == DRUM_PROGRAM,
            )
        )
    return notes, bpm


def decode_song(bars: list[BarTokens]) -> list[NoteEvent]:
    """Concatenate decoded bars on the absolute beat axis."""
    out = []
    for bar in bars:
        notes, _ = decode_bar(bar)
        shift = bar.bar_index * BEATS_PER_BAR
        for n in notes:
            out.append(NoteEvent(n.onset + shift, n.duration, n.pitch, n.velocity, n.program, n.is_drum))
    return out
