import os
from pathlib import Path

import numpy as np
import pytest

from ghostsgd.data import DatasetNotFound, MNIST_FILES, _find, resolve_data_dir

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
REFERENCE = os.environ.get("GHOSTSGD_REFERENCE") == "1"

# (criterion number, passed, detail) lines printed after the run
ACCEPTANCE_LINES: list[tuple[int, str, str]] = []


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def numgrad(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def idx_mutations(raw: bytes) -> list[bytes]:
    """Twenty corrupted variants of a valid IDX file: bad magics, wrong dims, truncations."""
    bad = []
    for magic in (0x805, 0x802, 0x800, 0x1801, 0x0803_0000, 0xFFFFFFFF, 0x0, 0x08):
        bad.append(magic.to_bytes(4, "big") + raw[4:])
    for cut in (0, 3, 7, len(raw) // 2, len(raw) - 1):
        bad.append(raw[:cut])
    bad.append(raw + b"\x00")
    bad.append(raw + b"\x00" * 100)
    head = bytearray(raw)
    head[7] ^= 0x01  # first dim off by one
    bad.append(bytes(head))
    head = bytearray(raw)
    head[4] = 0xFF  # first dim enormous
    bad.append(bytes(head))
    head = bytearray(raw)
    head[2] = 0x09
    bad.append(bytes(head))
    bad.append(raw[:4] + raw[8:])  # a dimension word removed
    bad.append(raw[:8] + b"\x00\x00\x00\x01" + raw[8:])  # a dimension word inserted
    return bad


def mnist_available() -> bool:
    try:
        for stem in MNIST_FILES.values():
            _find(resolve_data_dir(), stem)
    except DatasetNotFound:
        return False
    return True


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST not found; run `ghostsgd data fetch --checksum`")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_train():
    from ghostsgd.data import load_mnist
    if not mnist_available():
        pytest.skip("MNIST not available")
    return load_mnist("train")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, status, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {n:2d}: {status} {detail}")
