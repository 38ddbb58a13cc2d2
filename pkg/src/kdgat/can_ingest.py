"""Parsing CAN traces into :class:`CanMessage` streams.

Three on-disk shapes are understood:

* canonical CSV, ``timestamp,ID_hex4,DLC,byte0,...,flag`` with flag R/T/U;
* candump logs, ``(ts) iface ID#HEXPAYLOAD``;
* benchmark CSVs as published with the public CAN IDS datasets. Both the
  R/T-flagged layout (``ts,id,dlc,b0..b{dlc-1}[,flag]``), the attack-free
  ``Timestamp: ... ID: ... DLC: ...`` text layout, and header-led CSVs with
  ``timestamp,arbitration_id,data_field,attack`` columns are accepted.
"""
from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import (
    BadByte,
    DlcMismatch,
    IdOutOfRange,
    MalformedLine,
    NonMonotonicTimestamp,
    OddHexLength,
    ParseError,
    TraceIoError,
    UnsupportedFormat,
)

log = logging.getLogger(__name__)

MAX_ID = 0x7FF


class Label(enum.Enum):
    BENIGN = "R"
    ATTACK = "T"
    UNKNOWN = "U"


@dataclass(frozen=True)
class CanMessage:
    timestamp: float
    can_id: int
    dlc: int
    payload: tuple[int, ...]
    label: Label = Label.UNKNOWN

    def __post_init__(self):
        if not 0 <= self.can_id <= MAX_ID:
            raise IdOutOfRange(f"CAN id {self.can_id:#x} outside 11-bit range")
        if not 0 <= self.dlc <= 8:
            raise DlcMismatch(f"dlc {self.dlc} outside [0, 8]")
        if len(self.payload) != self.dlc:
            raise DlcMismatch(f"dlc {self.dlc} but {len(self.payload)} payload bytes")
        if any(not 0 <= b <= 255 for b in self.payload):
            raise BadByte(f"payload byte outside [0, 255]: {self.payload}")
        if self.timestamp < 0:
            raise MalformedLine(f"negative timestamp {self.timestamp}")

    @property
    def is_attack(self) -> bool:
        return self.label is Label.ATTACK


class TraceFormat(enum.Enum):
    BENCHMARK_CSV = "benchmark"
    CANDUMP_TEXT = "candump"
    CANONICAL_CSV = "canonical"


@dataclass(frozen=True)
class TraceSource:
    format: TraceFormat
    path: Path
    has_labels: bool = True


@dataclass
class Diagnostic:
    line_no: int
    message: str


@dataclass
class TraceResult:
    messages: list[CanMessage]
    parsed: int = 0
    skipped: int = 0
    diagnostics: list[Diagnostic] = field(default_factory=list)

    def __iter__(self) -> Iterator[CanMessage]:
        return iter(self.messages)

    def __len__(self) -> int:
        return len(self.messages)


# -- shared token parsing ------------------------------------------------------

def _parse_id(token: str) -> int:
    try:
        value = int(token, 16)
    except ValueError:
        raise MalformedLine(f"bad CAN id {token!r}") from None
    if not 0 <= value <= MAX_ID:
        raise IdOutOfRange(f"CAN id {token!r} exceeds 0x7FF")
    return value


def _parse_byte(token: str) -> int:
    token = token.strip()
    if not token or len(token) > 2 or not all(c in "0123456789abcdefABCDEF" for c in token):
        raise BadByte(f"bad payload byte {token!r}")
    return int(token, 16)


def _parse_ts(token: str) -> float:
    try:
        ts = float(token)
    except ValueError:
        raise MalformedLine(f"bad timestamp {token!r}") from None
    if not ts >= 0 or ts == float("inf"):
        raise MalformedLine(f"timestamp out of range {token!r}")
    return ts


def _parse_dlc(token: str) -> int:
    try:
        dlc = int(token)
    except ValueError:
        raise MalformedLine(f"bad dlc {token!r}") from None
    if not 0 <= dlc <= 8:
        raise DlcMismatch(f"dlc {dlc} outside [0, 8]")
    return dlc


# -- canonical ---------------------------------------------------------------

_FLAGS = {"R": Label.BENIGN, "T": Label.ATTACK, "U": Label.UNKNOWN}


def format_canonical_line(m: CanMessage) -> str:
    fields = [f"{m.timestamp:.6f}", f"{m.can_id:04X}", str(m.dlc)]
    fields += [f"{b:02X}" for b in m.payload]
    fields.append(m.label.value)
    return ",".join(fields)


def parse_canonical_line(line: str) -> CanMessage:
    parts = line.strip().split(",")
    if len(parts) < 4:
        raise MalformedLine(f"too few fields: {line!r}")
    ts = _parse_ts(parts[0])
    dlc = _parse_dlc(parts[2])
    flag = parts[-1].strip()
    byte_tokens = parts[3:-1]
    if flag not in _FLAGS:
        if all(_is_hex_byte(t) for t in parts[3:]):
            raise DlcMismatch(f"missing flag or dlc {dlc} vs {len(parts) - 3} bytes: {line!r}")
        raise MalformedLine(f"unknown flag {flag!r}")
    if len(byte_tokens) != dlc:
        raise DlcMismatch(f"dlc {dlc} but {len(byte_tokens)} bytes: {line!r}")
    can_id = _parse_id(parts[1])
    payload = tuple(_parse_byte(t) for t in byte_tokens)
    return CanMessage(ts, can_id, dlc, payload, _FLAGS[flag])


def _is_hex_byte(token: str) -> bool:
    token = token.strip()
    return 0 < len(token) <= 2 and all(c in "0123456789abcdefABCDEF" for c in token)


# -- candump -------------------------------------------------------------------

_CANDUMP = re.compile(r"^\s*\(\s*([0-9.]+)\s*\)\s+(\S+)\s+([0-9A-Fa-f]+)#([0-9A-Fa-f]*)\s*$")


def parse_candump_line(line: str) -> CanMessage:
    match = _CANDUMP.match(line)
    if match is None:
        raise MalformedLine(f"not a candump line: {line!r}")
    ts_tok, _iface, id_tok, data = match.groups()
    ts = _parse_ts(ts_tok)
    can_id = _parse_id(id_tok)
    if len(data) % 2:
        raise OddHexLength(f"odd hex payload length {len(data)}: {line!r}")
    payload = tuple(int(data[i:i + 2], 16) for i in range(0, len(data), 2))
    if len(payload) > 8:
        raise DlcMismatch(f"{len(payload)} payload bytes exceeds classic CAN")
    return CanMessage(ts, can_id, len(payload), payload, Label.UNKNOWN)


# -- benchmark -----------------------------------------------------------------

_ATTACK_FREE = re.compile(
    r"Timestamp:\s*([0-9.]+)\s+ID:\s*([0-9A-Fa-f]+)\s+\S+\s+DLC:\s*(\d+)\s*(.*)$")


def parse_benchmark_line(line: str, columns: dict[str, int] | None = None) -> CanMessage:
    """Parse one line of a public-benchmark trace.

    ``columns`` maps header names to positions for header-led CSVs
    (timestamp, arbitration_id, data_field, attack).
    """
    text = line.strip()
    if columns is not None:
        parts = [p.strip() for p in text.split(",")]
        try:
            ts = _parse_ts(parts[columns["timestamp"]])
            can_id = _parse_id(parts[columns["arbitration_id"]])
            data = parts[columns["data_field"]]
        except (IndexError, KeyError):
            raise MalformedLine(f"missing column: {line!r}") from None
        if len(data) % 2:
            raise OddHexLength(f"odd hex payload length: {line!r}")
        payload = tuple(_parse_byte(data[i:i + 2]) for i in range(0, len(data), 2))
        label = Label.UNKNOWN
        if "attack" in columns and columns["attack"] < len(parts):
            flag = parts[columns["attack"]]
            if flag not in ("0", "1"):
                raise MalformedLine(f"attack column must be 0/1: {line!r}")
            label = Label.ATTACK if flag == "1" else Label.BENIGN
        return CanMessage(ts, can_id, len(payload), payload, label)

    match = _ATTACK_FREE.match(text)
    if match:
        ts_tok, id_tok, dlc_tok, rest = match.groups()
        dlc = _parse_dlc(dlc_tok)
        tokens = rest.split()
        if len(tokens) != dlc:
            raise DlcMismatch(f"dlc {dlc} but {len(tokens)} bytes: {line!r}")
        return CanMessage(_parse_ts(ts_tok), _parse_id(id_tok), dlc,
                          tuple(_parse_byte(t) for t in tokens), Label.BENIGN)

    parts = [p.strip() for p in text.split(",")]
    if len(parts) < 3:
        raise MalformedLine(f"too few fields: {line!r}")
    ts = _parse_ts(parts[0])
    can_id = _parse_id(parts[1])
    dlc = _parse_dlc(parts[2])
    rest = parts[3:]
    label = Label.UNKNOWN
    if len(rest) == dlc + 1 and rest[-1].upper() in ("R", "T"):
        label = Label.ATTACK if rest[-1].upper() == "T" else Label.BENIGN
        rest = rest[:-1]
    if len(rest) != dlc:
        raise DlcMismatch(f"dlc {dlc} but {len(rest)} bytes: {line!r}")
    return CanMessage(ts, can_id, dlc, tuple(_parse_byte(t) for t in rest), label)


def _benchmark_header(line: str) -> dict[str, int] | None:
    names = [p.strip().lower() for p in line.split(",")]
    if "arbitration_id" in names and "data_field" in names:
        return {name: i for i, name in enumerate(names)}
    return None


# -- reading whole traces --------------------------------------------------------

def _parse_lines(lines: Iterable[str], fmt: TraceFormat, result: TraceResult) -> None:
    columns: dict[str, int] | None = None
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        try:
            if fmt is TraceFormat.CANONICAL_CSV:
                msg = parse_canonical_line(raw)
            elif fmt is TraceFormat.CANDUMP_TEXT:
                msg = parse_candump_line(raw)
            else:
                if columns is None and result.parsed == 0 and result.skipped == 0:
                    header = _benchmark_header(raw)
                    if header is not None:
                        columns = header
                        continue
                    if raw.strip().lower().startswith("timestamp,"):
                        continue
                msg = parse_benchmark_line(raw, columns)
        except ParseError as exc:
            result.skipped += 1
            result.diagnostics.append(Diagnostic(line_no, str(exc)))
            log.debug("line %d skipped: %s", line_no, exc)
            continue
        result.messages.append(msg)
        result.parsed += 1


def read_trace(source: TraceSource, strict: bool = False) -> TraceResult:
    """Parse a trace file, skipping malformed lines with a diagnostic.

    Lenient mode stable-sorts by timestamp; strict mode raises
    NonMonotonicTimestamp on the first out-of-order message.
    """
    if not isinstance(source.format, TraceFormat):
        raise UnsupportedFormat(f"unsupported trace format {source.format!r}")
    try:
        with open(source.path, encoding="utf-8", errors="replace") as fh:
            result = TraceResult(messages=[])
            _parse_lines(fh, source.format, result)
    except OSError as exc:
        raise TraceIoError(f"cannot read {source.path}: {exc}") from exc

    msgs = result.messages
    if not source.has_labels:
        msgs = [CanMessage(m.timestamp, m.can_id, m.dlc, m.payload, Label.UNKNOWN) for m in msgs]
    for prev, cur in zip(msgs, msgs[1:]):
        if cur.timestamp < prev.timestamp:
            if strict:
                raise NonMonotonicTimestamp(
                    f"{source.path}: timestamp {cur.timestamp} after {prev.timestamp}")
            msgs = sorted(msgs, key=lambda m: m.timestamp)
            break
    result.messages = msgs
    if result.skipped:
        log.warning("%s: %d parsed, %d malformed lines skipped", source.path, result.parsed, result.skipped)
    return result


def write_canonical(messages: Iterable[CanMessage], path: Path | str, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for m in messages:
            fh.write(format_canonical_line(m))
            fh.write("\n")


def trace_format(name: str) -> TraceFormat:
    try:
        return TraceFormat(name)
    except ValueError:
        raise UnsupportedFormat(f"unknown trace format {name!r}") from None
