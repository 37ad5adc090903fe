"""JSON-lines corpora and label files, aligned one record per bar."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .labels import CHORD_NAMES, N_CHORDS, N_INSTRUMENTS, BarLabels, bits_to_array, chord_index
from .remi import N_POSITIONS, BarTokens

GROOVE_HEX = (N_POSITIONS + 3) // 4
INSTRUMENT_HEX = (N_INSTRUMENTS + 3) // 4


def _dumps(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"), sort_keys=False)


def write_corpus(path, bars: list[BarTokens]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for bar in bars:
            fh.write(_dumps({"song_id": bar.song_id, "bar_index": bar.bar_index, "ids": list(bar.ids)}) + "\n")


def read_corpus(path) -> list[BarTokens]:
    bars = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                bars.append(BarTokens(str(rec["song_id"]), int(rec["bar_index"]), tuple(rec["ids"])))
    return bars


def labels_to_record(lab: BarLabels) -> dict:
    return {
        "song_id": lab.song_id,
        "bar_index": lab.bar_index,
        "chords": [CHORD_NAMES[c] for c in lab.chords],
        "groove": f"{lab.groove:0{GROOVE_HEX}x}",
        "instruments": f"{lab.instruments:0{INSTRUMENT_HEX}x}",
        "tempo_class": lab.tempo_class,
        "mean_velocity": lab.mean_velocity,
        "mean_duration": lab.mean_duration,
    }


def record_to_labels(rec: dict) -> BarLabels:
    return BarLabels(
        song_id=str(rec["song_id"]),
        bar_index=int(rec["bar_index"]),
        chords=sorted(chord_index(c) for c in rec["chords"]),
        groove=int(rec["groove"], 16),
        instruments=int(rec["instruments"], 16),
        tempo_class=int(rec["tempo_class"]),
        mean_velocity=rec["mean_velocity"],
        mean_duration=rec["mean_duration"],
    )


def write_labels(path, labels: list[BarLabels]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lab in labels:
            fh.write(_dumps(labels_to_record(lab)) + "\n")


def read_labels(path) -> list[BarLabels]:
    with open(path, encoding="utf-8") as fh:
        return [record_to_labels(json.loads(line)) for line in fh if line.strip()]


def check_aligned(bars: list[BarTokens], labels: list[BarLabels]) -> None:
    if len(bars) != len(labels):
        raise ValueError(f"corpus has {len(bars)} bars but labels have {len(labels)} records")
    for bar, lab in zip(bars, labels):
        if (bar.song_id, bar.bar_index) != (lab.song_id, lab.bar_index):
            raise ValueError(f"label record {lab.song_id}/{lab.bar_index} misaligned with bar {bar.song_id}/{bar.bar_index}")


def label_matrices(labels: list[BarLabels]) -> dict[str, np.ndarray]:
    """Dense per-metric targets. MV/MD are NaN for empty bars."""
    n = len(labels)
    chords = np.zeros((n, N_CHORDS), dtype=np.int8)
    for i, lab in enumerate(labels):
        chords[i, lab.chords] = 1
    return {
        "C": chords,
        "GP": np.stack([bits_to_array(l.groove, N_POSITIONS) for l in labels]) if n else np.zeros((0, N_POSITIONS)),
        "I": np.stack([bits_to_array(l.instruments, N_INSTRUMENTS) for l in labels]) if n else np.zeros((0, N_INSTRUMENTS)),
        "T": np.array([l.tempo_class for l in labels], dtype=np.int64),
        "MV": np.array([np.nan if l.mean_velocity is None else l.mean_velocity for l in labels]),
        "MD": np.array([np.nan if l.mean_duration is None else l.mean_duration for l in labels]),
        "SC": np.array([l.song_id for l in labels], dtype=object),
    }


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()

