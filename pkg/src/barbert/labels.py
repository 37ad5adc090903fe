"""Per-bar ground-truth labels for the seven probing metrics.

Chords come from a template-scoring Viterbi over four beat frames. Scores
are computed in integer units (weights x100, time in 1/48 beat) so that
transposing a bar permutes the score table exactly; ties are broken in a
bass-relative state order so the chosen path transposes with the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import _kernels
from .midi import NoteEvent
from .remi import BEATS_PER_BAR, N_POSITIONS, BarTokens, build_vocab, decode_bar

ROOT_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
QUALITIES = {
    "maj": (0, 4, 7),
    "min": (0, 3, 7),
    "dim": (0, 3, 6),
    "aug": (0, 4, 8),
    "dom7": (0, 4, 7, 10),
    "maj7": (0, 4, 7, 11),
    "min7": (0, 3, 7, 10),
}
QUALITY_NAMES = tuple(QUALITIES)
N_CHORDS = 12 * len(QUALITIES)
NO_CHORD = N_CHORDS
N_STATES = N_CHORDS + 1
N_INSTRUMENTS = 129

FRAMES_PER_BAR = BEATS_PER_BAR
FRAME_UNITS = 48  # chroma resolution per beat frame
WEIGHT_SCALE = 100


class EmptyBar(ValueError):
    """Mean velocity / duration are undefined for a bar without notes."""


@dataclass(frozen=True)
class ChordConfig:
    match: float = 1.0
    non_chord: float = -0.3
    root_bonus: float = 0.5
    missing: float = -0.3
    no_chord: float = 1.0
    switch_penalty: float = 0.2

    def units(self) -> dict[str, int]:
        return {k: int(round(v * WEIGHT_SCALE)) for k, v in self.__dict__.items()}


DEFAULT_CHORDS = ChordConfig()


@dataclass(frozen=True)
class ChordTemplate:
    root: int
    quality: str

    @property
    def index(self) -> int:
        return self.root * len(QUALITIES) + QUALITY_NAMES.index(self.quality)

    @property
    def pitch_classes(self) -> frozenset[int]:
        return frozenset((self.root + i) % 12 for i in QUALITIES[self.quality])

    @property
    def name(self) -> str:
        return f"{ROOT_NAMES[self.root]}:{self.quality}"


TEMPLATES = [ChordTemplate(r, q) for r in range(12) for q in QUALITY_NAMES]
CHORD_NAMES = [t.name for t in TEMPLATES]
_TEMPLATE_MASK = np.zeros((N_CHORDS, 12), dtype=np.int64)
_TEMPLATE_ROOT = np.zeros(N_CHORDS, dtype=np.int64)
for _t in TEMPLATES:
    _TEMPLATE_MASK[_t.index, list(_t.pitch_classes)] = 1
    _TEMPLATE_ROOT[_t.index] = _t.root


def chord_name(index: int) -> str:
    return CHORD_NAMES[index]


def chord_index(name: str) -> int:
    return CHORD_NAMES.index(name)


@dataclass
class BarLabels:
    song_id: str
    bar_index: int
    chords: list[int] = field(default_factory=list)
    groove: int = 0
    instruments: int = 0
    tempo_class: int = 0
    mean_velocity: float | None = None
    mean_duration: float | None = None


# -- chords -------------------------------------------------------------------


def beat_chroma(notes: list[NoteEvent], backend: str | None = None) -> np.ndarray:
    """(4, 12) integer chroma: per-beat sounding time in 1/48 beat, clipped to one beat."""
    pitched = [n for n in notes if not n.is_drum]
    bar_end = BEATS_PER_BAR * FRAME_UNITS
    onsets = [min(max(round(Fraction(n.onset) * FRAME_UNITS), 0), bar_end) for n in pitched]
    offsets = [min(max(round(Fraction(n.onset + n.duration) * FRAME_UNITS), 0), bar_end) for n in pitched]
    pcs = [n.pitch % 12 for n in pitched]
    return _kernels.beat_chroma(onsets, offsets, pcs, FRAMES_PER_BAR, FRAME_UNITS, backend=backend)


def chord_scores(chroma: np.ndarray, config: ChordConfig = DEFAULT_CHORDS) -> np.ndarray:
    """Integer emission scores, shape (frames, 85); column 84 is no-chord."""
    w = config.units()
    chroma = np.asarray(chroma, dtype=np.int64)
    in_chord = chroma @ _TEMPLATE_MASK.T  # (F, 84) chord-tone time
    absent = (FRAME_UNITS - chroma) @ _TEMPLATE_MASK.T  # missing chord-tone time
    total = chroma.sum(axis=1, keepdims=True)
    out_chord = total - in_chord
    root = chroma[:, _TEMPLATE_ROOT]
    scores = np.empty((chroma.shape[0], N_STATES), dtype=np.int64)
    scores[:, :N_CHORDS] = (
        w["match"] * in_chord + w["missing"] * absent + w["non_chord"] * out_chord + w["root_bonus"] * root
    )
    scores[:, NO_CHORD] = w["no_chord"] * FRAME_UNITS
    return scores


def bass_relative_order(bass_pc: int) -> np.ndarray:
    """Permutation listing states by (root - bass) mod 12, quality; no-chord last."""
    order = [((r + bass_pc) % 12) * len(QUALITIES) + q for r in range(12) for q in range(len(QUALITIES))]
    return np.array(order + [NO_CHORD], dtype=np.int64)


def _bass_pc(notes: list[NoteEvent]) -> int:
    pitched = [n.pitch for n in notes if not n.is_drum]
    return min(pitched) % 12 if pitched else 0


def viterbi_paths(scores: np.ndarray, switch_units: int, orders: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Decode a batch of (n, frames, 85) score tables; ``orders`` gives each bar's state order."""
    permuted = np.take_along_axis(scores, orders[:, None, :], axis=2)
    local = _kernels.viterbi_batch(permuted, switch_units, backend=backend)
    return np.take_along_axis(orders, local, axis=1)


def extract_chords(
    bar_notes: list[NoteEvent], config: ChordConfig = DEFAULT_CHORDS, backend: str | None = None
) -> set[int]:
    """Distinct chord classes on the optimal 4-frame path (no-chord dropped)."""
    return extract_chords_batch([bar_notes], config, backend)[0]


def extract_chords_batch(
    bars: list[list[NoteEvent]], config: ChordConfig = DEFAULT_CHORDS, backend: str | None = None
) -> list[set[int]]:
    if not bars:
        return []
    scores = np.stack([chord_scores(beat_chroma(b), config) for b in bars])
    orders = np.stack([bass_relative_order(_bass_pc(b)) for b in bars])
    paths = viterbi_paths(scores, config.units()["switch_penalty"] * FRAME_UNITS, orders, backend)
    return [{int(s) for s in path if s != NO_CHORD} for path in paths]


# -- token-level labels -------------------------------------------------------


def extract_groove(bar: BarTokens) -> int:
    vocab = build_vocab()
    off = vocab.offsets["position"]
    bits = 0
    for t in bar.ids:
        if off <= t < off + N_POSITIONS:
            bits |= 1 << (t - off)
    return bits


def extract_scalars(bar: BarTokens, notes: list[NoteEvent] | None = None):
    """(instruments bitvector, tempo class, mean velocity, mean duration).

    With ``notes`` given, the means use the raw values; otherwise they use
    the decoded bin representatives. Raises EmptyBar when there are no notes.
    """
    vocab = build_vocab()
    off = vocab.offsets["instrument"]
    instruments = 0
    for t in bar.ids:
        if off <= t < off + N_INSTRUMENTS:
            instruments |= 1 << (t - off)
    tempo_class = vocab.lookup(bar.ids[1])[1]
    if notes is None:
        notes, _ = decode_bar(bar)
    if not notes:
        raise EmptyBar(f"bar {bar.bar_index} of {bar.song_id!r} has no notes")
    mv = float(np.mean([n.velocity for n in notes]))
    md = float(np.mean([float(n.duration) for n in notes]))
    return instruments, tempo_class, mv, md


def bar_labels(bar: BarTokens, notes: list[NoteEvent] | None = None, config: ChordConfig = DEFAULT_CHORDS) -> BarLabels:
    """All labels for one bar. ``notes`` are bar-relative raw notes if available."""
    if notes is None:
        notes, _ = decode_bar(bar)
    labels = BarLabels(bar.song_id, bar.bar_index, groove=extract_groove(bar))
    labels.chords = sorted(extract_chords(notes, config))
    try:
        labels.instruments, labels.tempo_class, labels.mean_velocity, labels.mean_duration = extract_scalars(bar, notes)
    except EmptyBar:
        vocab = build_vocab()
        labels.tempo_class = vocab.lookup(bar.ids[1])[1]
    return labels


def bits_to_array(value: int, width: int) -> np.ndarray:
    return np.array([(value >> i) & 1 for i in range(width)], dtype=np.int8)

