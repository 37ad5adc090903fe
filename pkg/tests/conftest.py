import struct

import numpy as np
import pytest

from barbert._kernels import HAVE_NUMBA
from barbert.encoder import ModelConfig

BACKENDS = ["numpy"] + (["numba"] if HAVE_NUMBA else [])


def chunk(tag: bytes, body: bytes) -> bytes:
    return tag + struct.pack(">I", len(body)) + body


def header(fmt=0, ntracks=1, division=96) -> bytes:
    return chunk(b"MThd", struct.pack(">HHH", fmt, ntracks, division))


# One quarter-note C4 at velocity 64 on program 0, tempo 500000 us/quarter, 96 ticks per quarter.
# Track bytes, decoded by hand:
#   00 FF 51 03 07 A1 20   delta 0, set tempo 0x07A120 = 500000
#   00 C0 00               delta 0, program change ch0 -> 0
#   00 90 3C 40            delta 0, note-on ch0 pitch 60 vel 64
#   60 80 3C 40            delta 96, note-off ch0 pitch 60
#   00 FF 2F 00            end of track
ONE_NOTE_TRACK = bytes.fromhex("00FF510307A120" "00C000" "00903C40" "60803C40" "00FF2F00")
ONE_NOTE_SMF = header(0, 1, 96) + chunk(b"MTrk", ONE_NOTE_TRACK)


@pytest.fixture
def one_note_smf() -> bytes:
    return ONE_NOTE_SMF


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(num_layers=2, hidden_size=16, num_heads=2, ffn_size=32, max_seq_len=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion -> [(passed, seconds, detail)], one entry per test run; filled by test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, float, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        runs = ACCEPTANCE[n]
        ok = all(r[0] for r in runs)
        secs = max(r[1] for r in runs)
        detail = "; ".join(r[2] for r in runs if r[2])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} (slowest run {secs:.1f} s) {detail}")
