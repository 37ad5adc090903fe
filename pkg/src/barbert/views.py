"""Training views: MLM masking and the positive partners for contrastive pairs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .remi import N_VELOCITY, BarTokens, build_vocab

IGNORE = -100

SELECT_PROB = 0.15
MASK_FRACTION = 0.8
RANDOM_FRACTION = 0.1
PITCH_SHIFT_RANGE = 6
# in 32-bin velocity units, not raw MIDI velocity
VELOCITY_SHIFT_RANGE = 3


class SingletonSong(LookupError):
    """The anchor's song has no other bar to serve as a neighbor."""


@dataclass
class MaskedView:
    input_ids: np.ndarray
    mlm_targets: np.ndarray
    selected_positions: np.ndarray


@dataclass
class PairBatch:
    """Side a is always masked; side b is empty for plain MLM training."""

    view_a: list[MaskedView]
    view_b: list[np.ndarray] = field(default_factory=list)
    anchors: list[BarTokens] = field(default_factory=list)
    partners: list[BarTokens] = field(default_factory=list)

    def __post_init__(self):
        if self.view_b and len(self.view_b) != len(self.view_a):
            raise ValueError("view_a and view_b must pair up one-to-one")


def mlm_mask(ids, rng: np.random.Generator) -> MaskedView:
    vocab = build_vocab()
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    select = rng.random(n) < SELECT_PROB
    action = rng.random(n)
    random_ids = rng.integers(0, vocab.musical_size, size=n)
    inputs = ids.copy()
    to_mask = select & (action < MASK_FRACTION)
    to_random = select & (action >= MASK_FRACTION) & (action < MASK_FRACTION + RANDOM_FRACTION)
    inputs[to_mask] = vocab.mask
    inputs[to_random] = random_ids[to_random]
    targets = np.where(select, ids, IGNORE)
    return MaskedView(inputs, targets, np.flatnonzero(select))


def pitch_velocity_shift(
    bar: BarTokens,
    rng: np.random.Generator | None = None,
    pitch_offset: int | None = None,
    velocity_offset: int | None = None,
) -> BarTokens:
    """Transpose every pitched note and shift every velocity by one drawn offset each.

    Drum pitches are left alone. Shifted values clamp at the category edges.
    """
    if pitch_offset is None:
        pitch_offset = int(rng.integers(-PITCH_SHIFT_RANGE, PITCH_SHIFT_RANGE + 1))
    if velocity_offset is None:
        velocity_offset = int(rng.integers(-VELOCITY_SHIFT_RANGE, VELOCITY_SHIFT_RANGE + 1))
    vocab = build_vocab()
    p0, v0 = vocab.offsets["pitch"], vocab.offsets["velocity"]
    ids = np.asarray(bar.ids, dtype=np.int64)
    out = ids.copy()
    is_pitch = (ids >= p0) & (ids < p0 + 128)
    is_vel = (ids >= v0) & (ids < v0 + N_VELOCITY)
    out[is_pitch] = p0 + np.clip(ids[is_pitch] - p0 + pitch_offset, 0, 127)
    out[is_vel] = v0 + np.clip(ids[is_vel] - v0 + velocity_offset, 0, N_VELOCITY - 1)
    return BarTokens(bar.song_id, bar.bar_index, tuple(int(t) for t in out))


def index_by_song(bars: list[BarTokens]) -> dict[str, list[BarTokens]]:
    index: dict[str, list[BarTokens]] = {}
    for bar in bars:
        index.setdefault(bar.song_id, []).append(bar)
    for song in index.values():
        song.sort(key=lambda b: b.bar_index)
    return index


def sample_neighbor(
    corpus_index: dict[str, list[BarTokens]], anchor: BarTokens, rng: np.random.Generator
) -> BarTokens:
    song = corpus_index.get(anchor.song_id, [])
    candidates = [b for b in song if b.bar_index != anchor.bar_index]
    if not candidates:
        raise SingletonSong(f"song {anchor.song_id!r} has no bar besides {anchor.bar_index}")
    return candidates[int(rng.integers(len(candidates)))]


def dropout_twin(view: MaskedView) -> tuple[MaskedView, MaskedView]:
    # the two members differ only through independent dropout draws downstream
    return view, view
