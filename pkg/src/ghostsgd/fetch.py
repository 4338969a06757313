"""Explicit MNIST download with checksum verification (used by ``ghostsgd data fetch``).

Nothing else in the package touches the network.
"""
from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
import urllib.request
import zipfile
from pathlib import Path

from .data import MNIST_FILES, parse_idx

log = logging.getLogger(__name__)

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
# The bob.db.mnist source archive on PyPI ships the original gzipped files.
PYPI_ARCHIVE = ("https://pypi.org/pypi/bob.db.mnist/json", "bob.db.mnist-2.1.0.zip")

GZ_MD5 = {
    "train-images-idx3-ubyte": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte": "ec29112dd5afa0611ce80d1b7f02629c",
}
RAW_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


class ChecksumError(ValueError):
    pass


def _get(url: str, timeout: float) -> bytes:
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return resp.read()


def _from_mirrors(stem: str, timeout: float) -> bytes | None:
    for base in MIRRORS:
        try:
            return _get(base + stem + ".gz", timeout)
        except OSError as err:
            log.info("mirror %s failed: %s", base, err)
    return None


def _from_pypi(timeout: float) -> dict[str, bytes]:
    meta = json.loads(_get(PYPI_ARCHIVE[0], timeout))
    url = next(f["url"] for files in meta["releases"].values() for f in files
               if f["filename"] == PYPI_ARCHIVE[1])
    archive = zipfile.ZipFile(io.BytesIO(_get(url, timeout)))
    out = {}
    for name in archive.namelist():
        base = name.rsplit("/", 1)[-1]
        if base.endswith(".gz") and base[:-3] in GZ_MD5:
            out[base[:-3]] = archive.read(name)
    return out


def _verify(stem: str, gz: bytes, checksum: bool) -> bytes:
    if checksum and hashlib.md5(gz).hexdigest() != GZ_MD5[stem]:
        raise ChecksumError(f"{stem}.gz: md5 mismatch")
    raw = gzip.decompress(gz)
    if checksum and hashlib.sha256(raw).hexdigest() != RAW_SHA256[stem]:
        raise ChecksumError(f"{stem}: sha256 mismatch after decompression")
    parse_idx(raw)
    return raw


def fetch_mnist(dest: Path, checksum: bool = True, timeout: float = 60.0) -> list[Path]:
    """Download the four MNIST files into ``dest`` as raw IDX files."""
    dest.mkdir(parents=True, exist_ok=True)
    written, fallback = [], None
    for stem in MNIST_FILES.values():
        target = dest / stem
        if target.exists() and (not checksum or
                                hashlib.sha256(target.read_bytes()).hexdigest() == RAW_SHA256[stem]):
            written.append(target)
            continue
        gz = _from_mirrors(stem, timeout)
        if gz is None:
            if fallback is None:
                log.info("official mirrors unreachable, trying the PyPI archive")
                fallback = _from_pypi(timeout)
            gz = fallback[stem]
        target.write_bytes(_verify(stem, gz, checksum))
        written.append(target)
    return written
