"""Synthetic songs with planted structure, and a minimal SMF writer for them.

Each song draws one tempo, a small instrument set, a four-chord
progression and a rhythm pattern, then repeats them (with small
variations) for every bar. That gives every probe metric something
learnable, and gives songs an identity the clustering metric can find.
"""

from __future__ import annotations

import struct
from fractions import Fraction
from pathlib import Path

import numpy as np

from .labels import QUALITIES, bar_labels
from .midi import DRUM_CHANNEL, DRUM_PROGRAM, NoteEvent, TempoCurve
from .remi import BEATS_PER_BAR, encode_song, split_bars

TICKS_PER_BEAT = 480
_PROGRAM_POOL = (0, 4, 19, 24, 25, 30, 33, 40, 48, 56, 65, 73, 80, 88)
_BASS_PROGRAMS = (32, 33, 34, 38)
_QUALITY_POOL = ("maj", "min", "dom7", "min7", "maj7", "dim")
_TEMPO_POOL = (60.0, 72.0, 84.0, 96.0, 108.0, 120.0, 132.0, 144.0, 160.0, 176.0)


def generate_song(rng: np.random.Generator, n_bars: int = 8) -> tuple[list[NoteEvent], TempoCurve]:
    bpm = float(rng.choice(_TEMPO_POOL))
    key = int(rng.integers(12))
    progression = [
        ((key + int(rng.choice([0, 2, 4, 5, 7, 9]))) % 12, str(rng.choice(_QUALITY_POOL))) for _ in range(4)
    ]
    harmony = int(rng.choice(_PROGRAM_POOL))
    bass = int(rng.choice(_BASS_PROGRAMS))
    lead = int(rng.choice(_PROGRAM_POOL)) if rng.random() < 0.6 else None
    drums = rng.random() < 0.5
    base_vel = int(rng.integers(40, 110))
    # one rhythm per song, in twelfths of a beat
    slots = np.arange(0, BEATS_PER_BAR * 12, 3)
    rhythm = sorted(rng.choice(slots, size=int(rng.integers(3, 7)), replace=False).tolist())
    if 0 not in rhythm:
        rhythm = [0] + rhythm[:-1]
    chord_len = Fraction(int(rng.choice([1, 2, 4])))  # beats per chord stroke

    notes: list[NoteEvent] = []

    def vel(spread=6):
        return int(np.clip(base_vel + rng.integers(-spread, spread + 1), 1, 127))

    for b in range(n_bars):
        root, quality = progression[b % len(progression)]
        start = Fraction(b * BEATS_PER_BAR)
        tones = [(root + i) % 12 for i in QUALITIES[quality]]
        t = Fraction(0)
        while t < BEATS_PER_BAR:
            for pc in tones:
                notes.append(NoteEvent(start + t, chord_len, 60 + pc, vel(), harmony))
            t += chord_len
        for slot in rhythm:
            notes.append(NoteEvent(start + Fraction(slot, 12), Fraction(1, 2), 36 + root, vel(), bass))
        if lead is not None:
            for slot in rhythm[::2]:
                pc = tones[int(rng.integers(len(tones)))]
                notes.append(NoteEvent(start + Fraction(slot, 12), Fraction(1), 72 + pc, vel(10), lead))
        if drums:
            for beat in range(BEATS_PER_BAR):
                pitch = 36 if beat % 2 == 0 else 38
                notes.append(NoteEvent(start + beat, Fraction(1, 4), pitch, vel(), DRUM_PROGRAM, True))
    notes.sort(key=lambda n: (n.onset, n.program, n.pitch))
    return notes, TempoCurve(((Fraction(0), bpm),))


def synth_corpus(n_songs: int, n_bars: int = 8, seed: int = 0):
    """(bars, labels) for ``n_songs`` generated songs, ids ``song0000``..."""
    rng = np.random.default_rng(seed)
    bars, labels = [], []
    for s in range(n_songs):
        notes, tempo = generate_song(rng, n_bars)
        song_id = f"song{s:04d}"
        song_bars = encode_song(notes, tempo, song_id)
        for bar, bar_notes in zip(song_bars, split_bars(notes)):
            rel = [_shift(n, -bar.bar_index * BEATS_PER_BAR) for n in bar_notes]
            bars.append(bar)
            labels.append(bar_labels(bar, rel))
    return bars, labels


def _shift(n: NoteEvent, beats) -> NoteEvent:
    return NoteEvent(n.onset + beats, n.duration, n.pitch, n.velocity, n.program, n.is_drum)


# -- SMF writing (fixtures only) --------------------------------------------------


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _track(events: list[tuple[int, int, bytes]]) -> bytes:
    # events: (tick, order, payload); order puts note-offs before note-ons at a tick
    body = bytearray()
    now = 0
    for tick, _, payload in sorted(events, key=lambda e: (e[0], e[1])):
        body += _varlen(tick - now) + payload
        now = tick
    body += _varlen(0) + b"\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def smf_bytes(notes: list[NoteEvent], tempo: TempoCurve, ticks_per_beat: int = TICKS_PER_BEAT) -> bytes:
    """Format-1 file: a tempo track plus one track per program."""
    conductor = []
    for beat, bpm in tempo.segments:
        us = int(round(60_000_000 / bpm))
        conductor.append((int(beat * ticks_per_beat), 0, b"\xff\x51\x03" + us.to_bytes(3, "big")))
    programs = sorted({n.program for n in notes})
    channels = {}
    free = [c for c in range(16) if c != DRUM_CHANNEL]
    for p in programs:
        channels[p] = DRUM_CHANNEL if p == DRUM_PROGRAM else free[len(channels) % len(free)]
    tracks = [_track(conductor)]
    for p in programs:
        ch = channels[p]
        evs = []
        if p != DRUM_PROGRAM:
            evs.append((0, 0, bytes([0xC0 | ch, p])))
        for n in notes:
            if n.program != p:
                continue
            on = int(n.onset * ticks_per_beat)
            off = int((n.onset + n.duration) * ticks_per_beat)
            evs.append((on, 2, bytes([0x90 | ch, n.pitch, n.velocity])))
            evs.append((off, 1, bytes([0x80 | ch, n.pitch, 0])))
        tracks.append(_track(evs))
    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(tracks), ticks_per_beat)
    return header + b"".join(tracks)


def write_synth_midi(out_dir, n_songs: int, n_bars: int = 8, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for s in range(n_songs):
        notes, tempo = generate_song(rng, n_bars)
        path = out_dir / f"song{s:04d}.mid"
        path.write_bytes(smf_bytes(notes, tempo))
        paths.append(path)
    return paths
