"""Manifest + blob container used by datasets and checkpoints.

A directory holds a UTF-8 ``manifest.txt`` whose first line is a magic
header, followed by whitespace-separated records, and one binary blob.
Every blob-backed record carries ``offset nbytes crc32`` so truncation and
corruption are caught and located.
"""

from __future__ import annotations

import zlib
from pathlib import Path


class FormatError(ValueError):
    """A manifest or blob failed validation; message names file and offset."""

    def __init__(self, path, offset, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: offset {offset}: {message}")


def crc32(data: bytes) -> str:
    return f"{zlib.crc32(data) & 0xFFFFFFFF:08x}"


class BlobWriter:
    def __init__(self):
        self._chunks: list[bytes] = []
        self.offset = 0

    def append(self, data: bytes) -> tuple[int, int, str]:
        start = self.offset
        self._chunks.append(data)
        self.offset += len(data)
        return start, len(data), crc32(data)

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)


def write_container(directory, magic: str, lines: list[str], blob: bytes, blob_name: str) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    text = "\n".join([magic, *lines]) + "\n"
    (d / "manifest.txt").write_text(text, encoding="utf-8")
    (d / blob_name).write_bytes(blob)


def read_container(directory, magic: str, blob_name: str) -> tuple[list[list[str]], bytes, Path]:
    """Return tokenized manifest records (line number kept as first token), blob bytes, manifest path."""
    d = Path(directory)
    mpath = d / "manifest.txt"
    bpath = d / blob_name
    if not mpath.exists():
        raise FormatError(mpath, 0, "manifest missing")
    if not bpath.exists():
        raise FormatError(bpath, 0, "blob missing")
    raw = mpath.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(mpath, exc.start, "manifest is not UTF-8") from None
    lines = text.split("\n")
    if lines[0] != magic:
        raise FormatError(mpath, 0, f"corrupt header {lines[0][:40]!r}, expected {magic!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line.strip():
            records.append([str(lineno), *line.split()])
    return records, bpath.read_bytes(), mpath


def read_chunk(blob: bytes, blob_path: Path, manifest_path: Path, lineno: str,
               offset: int, nbytes: int, checksum: str) -> bytes:
    if offset < 0 or nbytes < 0:
        raise FormatError(manifest_path, f"line {lineno}", "negative offset or length")
    end = offset + nbytes
    if end > len(blob):
        raise FormatError(blob_path, offset,
                          f"length error: record at manifest line {lineno} needs bytes up to {end}, blob has {len(blob)}")
    chunk = blob[offset:end]
    got = crc32(chunk)
    if got != checksum:
        raise FormatError(blob_path, offset,
                          f"checksum mismatch for manifest line {lineno}: expected {checksum}, got {got}")
    return chunk
