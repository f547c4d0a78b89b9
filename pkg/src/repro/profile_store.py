"""On-disk format and I/O for random profiles.

A random profile is the ordered log of every entropy request one process made
to one source: either reads of the /dev/urandom device or calls to getrandom.
Recording writes one profile per source under a profile directory; replaying
reads them back in strict order.

The files keep the historical names ``urandom.conf`` and ``getrandom.conf``
but their content is binary, little-endian throughout:

    header:  magic "RRPF" (4 bytes) | format_version u16 | source u8
    record:  seq u64 | requested_len u64 | returned_len u64 | flags u32
             | payload (returned_len bytes)

Records carry no checksum; the framing is validated strictly instead (exact
magic/version/source, consecutive seq starting at 0, returned_len bounded by
requested_len and by the remaining file length, no trailing bytes).  The same
format is produced and consumed by the C preload shim, so any change here must
be mirrored in ``interposer/preload.c``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

MAGIC = b"RRPF"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHB")
_RECORD_HEADER = struct.Struct("<QQQI")

HEADER_LEN = _HEADER.size            # 7
RECORD_HEADER_LEN = _RECORD_HEADER.size  # 28

_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1


class Source(enum.IntEnum):
    """Entropy source a profile belongs to.

    The numeric values are part of the on-disk format.
    """

    URANDOM_READ = 0
    GETRANDOM = 1

    @property
    def filename(self) -> str:
        return "urandom.conf" if self is Source.URANDOM_READ else "getrandom.conf"


class ProfileError(Exception):
    """Base class for profile-store failures."""


class MissingProfileError(ProfileError):
    """The profile file for the requested source does not exist."""


class CorruptProfileError(ProfileError):
    """The profile file exists but its header or framing is invalid."""


@dataclass(frozen=True)
class RandomRecord:
    """One intercepted entropy request and the bytes that were served."""

    seq: int
    source: Source
    requested_len: int
    returned_len: int
    flags: int
    data: bytes

    def __post_init__(self) -> None:
        if not 0 <= self.seq <= _U64_MAX:
            raise ValueError(f"seq out of range: {self.seq}")
        if not 0 <= self.requested_len <= _U64_MAX:
            raise ValueError(f"requested_len out of range: {self.requested_len}")
        if not 0 <= self.flags <= _U32_MAX:
            raise ValueError(f"flags out of range: {self.flags:#x}")
        if self.returned_len != len(self.data):
            raise ValueError(
                f"returned_len {self.returned_len} != payload length {len(self.data)}"
            )
        if self.returned_len > self.requested_len:
            raise ValueError(
                f"returned_len {self.returned_len} exceeds requested_len {self.requested_len}"
            )


@dataclass(frozen=True)
class RandomProfile:
    """A parsed profile: header plus the ordered record log."""

    source: Source
    records: tuple[RandomRecord, ...] = ()
    format_version: int = FORMAT_VERSION

    @property
    def record_count(self) -> int:
        return len(self.records)

    def to_bytes(self) -> bytes:
        out = bytearray(_HEADER.pack(MAGIC, self.format_version, int(self.source)))
        for rec in self.records:
            out += _RECORD_HEADER.pack(
                rec.seq, rec.requested_len, rec.returned_len, rec.flags
            )
            out += rec.data
        return bytes(out)


def parse_profile(data: bytes, expected_source: Optional[Source] = None) -> RandomProfile:
    """Parse a full profile image, validating header and framing strictly.

    Raises CorruptProfileError on any framing violation; a truncated or
    bit-flipped header/framing byte must never be silently read as different
    entropy.
    """
    if len(data) < HEADER_LEN:
        raise CorruptProfileError(
            f"file too short for header: {len(data)} bytes, need {HEADER_LEN}"
        )
    magic, version, source_byte = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptProfileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CorruptProfileError(
            f"unsupported format version {version}, expected {FORMAT_VERSION}"
        )
    try:
        source = Source(source_byte)
    except ValueError:
        raise CorruptProfileError(f"unknown source byte {source_byte}") from None
    if expected_source is not None and source is not expected_source:
        raise CorruptProfileError(
            f"profile source is {source.name}, expected {expected_source.name}"
        )

    records: list[RandomRecord] = []
    off = HEADER_LEN
    index = 0
    while off < len(data):
        if len(data) - off < RECORD_HEADER_LEN:
            raise CorruptProfileError(
                f"truncated record header at offset {off} (record {index})"
            )
        seq, requested, returned, flags = _RECORD_HEADER.unpack_from(data, off)
        off += RECORD_HEADER_LEN
        if seq != index:
            raise CorruptProfileError(
                f"record {index} carries seq {seq}; seqs must be consecutive from 0"
            )
        if returned > requested:
            raise CorruptProfileError(
                f"record {index}: returned_len {returned} exceeds requested_len {requested}"
            )
        if len(data) - off < returned:
            raise CorruptProfileError(
                f"truncated record payload at offset {off} (record {index}, "
                f"need {returned} bytes, have {len(data) - off})"
            )
        records.append(
            RandomRecord(
                seq=seq,
                source=source,
                requested_len=requested,
                returned_len=returned,
                flags=flags,
                data=bytes(data[off : off + returned]),
            )
        )
        off += returned
        index += 1
    return RandomProfile(source=source, records=tuple(records), format_version=version)


class ProfileWriter:
    """Append-only writer for one source's profile.

    The file is created (or truncated) and the header written immediately.
    Writes are unbuffered so a record is durable against a crash of the
    recorded process as soon as append() returns.  Not thread-safe; callers
    serialize access externally.
    """

    def __init__(self, directory: Path | str, source: Source):
        self.source = source
        self.path = Path(directory) / source.filename
        self._next_seq = 0
        self._fh: Optional[BinaryIO] = open(self.path, "wb", buffering=0)
        self._fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, int(source)))

    def append(self, requested_len: int, flags: int, data: bytes) -> int:
        """Persist one record; returns the seq it was assigned."""
        if self._fh is None:
            raise ProfileError(f"writer for {self.path} is closed")
        if len(data) > requested_len:
            raise ValueError(
                f"payload of {len(data)} bytes exceeds requested_len {requested_len}"
            )
        if not 0 <= flags <= _U32_MAX:
            raise ValueError(f"flags out of range: {flags:#x}")
        seq = self._next_seq
        self._fh.write(
            _RECORD_HEADER.pack(seq, requested_len, len(data), flags) + data
        )
        self._next_seq += 1
        return seq

    @property
    def record_count(self) -> int:
        return self._next_seq

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "ProfileWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class ProfileReader:
    """Strictly-ordered reader over one source's profile.

    The whole file is parsed and validated at open time, so a corrupt profile
    fails before any record is served.  next_record() returns None once the
    log is exhausted; exhaustion is a signal for the caller, not an error.
    """

    def __init__(self, directory: Path | str, source: Source):
        self.source = source
        self.path = Path(directory) / source.filename
        if not self.path.is_file():
            raise MissingProfileError(f"no profile file at {self.path}")
        self.profile = parse_profile(self.path.read_bytes(), expected_source=source)
        self._pos = 0

    def next_record(self) -> Optional[RandomRecord]:
        if self._pos >= len(self.profile.records):
            return None
        rec = self.profile.records[self._pos]
        self._pos += 1
        return rec

    @property
    def remaining(self) -> int:
        return len(self.profile.records) - self._pos

    def __iter__(self) -> Iterator[RandomRecord]:
        while (rec := self.next_record()) is not None:
            yield rec


def create_writer(directory: Path | str, source: Source) -> ProfileWriter:
    """Create/truncate the profile for `source` under `directory`."""
    return ProfileWriter(directory, source)


def open_reader(directory: Path | str, source: Source) -> ProfileReader:
    """Open the profile for `source`, positioned at record 0."""
    return ProfileReader(directory, source)


def read_profile(directory: Path | str, source: Source) -> RandomProfile:
    """Parse the whole profile for `source` in one call."""
    return open_reader(directory, source).profile
