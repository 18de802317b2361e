"""Classic pcap reader (and a small writer used to build test captures).

Only the classic libpcap format is handled, in both byte orders and in the
microsecond and nanosecond variants. Link types 1 (Ethernet II) and
101 (raw IP) are decoded down to the TCP/UDP header. Packets that cannot be
decoded to a 5-tuple are skipped and counted by reason, never raised.
"""
from __future__ import annotations

import enum
import socket
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

from .errors import TruncatedHeader, TruncatedRecord, UnknownMagic, UnsupportedLinkType

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D

ETH_P_IP = 0x0800
ETH_P_IPV6 = 0x86DD
ETH_P_8021Q = 0x8100

# IPv6 extension headers we walk past before reaching the transport header
_IPV6_EXT = {0, 43, 60}
_IPV6_FRAGMENT = 44


class Protocol(enum.IntEnum):
    """Transport protocol vocabulary; the integer value is the one-hot slot."""

    TCP = 0
    UDP = 1
    OTHER = 2

    @classmethod
    def from_ip_proto(cls, number: int) -> "Protocol":
        if number == 6:
            return cls.TCP
        if number == 17:
            return cls.UDP
        return cls.OTHER


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20
    ECE = 0x40
    CWR = 0x80


@dataclass(frozen=True)
class CaptureHeader:
    magic: int
    endianness: str  # "little" | "big"
    time_resolution: str  # "microsecond" | "nanosecond"
    link_type: int
    snaplen: int
    version: tuple = (2, 4)

    @property
    def ticks_per_second(self) -> int:
        return 10**9 if self.time_resolution == "nanosecond" else 10**6


@dataclass(frozen=True)
class PacketRecord:
    """Decoded per-packet facts.

    The timestamp is kept as integer seconds plus an integer fraction in
    capture ticks so that no precision is lost below the capture resolution.
    """

    ts_sec: int
    ts_frac: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: Protocol
    tcp_flags: TcpFlags = TcpFlags(0)
    wire_len: int = 0
    resolution: int = 10**6

    @property
    def ts_ns(self) -> int:
        return self.ts_sec * 10**9 + self.ts_frac * (10**9 // self.resolution)

    @property
    def ts(self) -> float:
        return self.ts_sec + self.ts_frac / self.resolution

    @classmethod
    def at(cls, seconds, src_ip, dst_ip, src_port, dst_port, protocol, tcp_flags=TcpFlags(0), wire_len=60):
        """Build a record from a (possibly fractional) time in seconds, microsecond resolution."""
        usec = round(seconds * 10**6)
        return cls(usec // 10**6, usec % 10**6, src_ip, dst_ip, src_port, dst_port,
                   Protocol(protocol), TcpFlags(tcp_flags), wire_len)


def _ip_str(raw: bytes) -> str:
    family = socket.AF_INET if len(raw) == 4 else socket.AF_INET6
    return socket.inet_ntop(family, raw)


class CaptureStream:
    """Sequential reader over one classic pcap file. Not shareable across threads."""

    def __init__(self, fh: BinaryIO, header: CaptureHeader, path=None):
        self._fh = fh
        self.header = header
        self.path = path
        self.packets_read = 0
        self.records_seen = 0
        self.skipped: Counter = Counter()
        self._prefix = "<" if header.endianness == "little" else ">"
        self._rec = struct.Struct(self._prefix + "IIII")
        self._tick_ns = 10**9 // header.ticks_per_second

    # context manager / iteration
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __iter__(self) -> Iterator[PacketRecord]:
        while True:
            pkt = self.next_packet()
            if pkt is None:
                return
            yield pkt

    def close(self):
        self._fh.close()

    @property
    def records_skipped(self) -> int:
        return sum(self.skipped.values())

    def report(self) -> dict:
        return {
            "path": str(self.path) if self.path is not None else None,
            "link_type": self.header.link_type,
            "time_resolution": self.header.time_resolution,
            "records": self.records_seen,
            "packets_read": self.packets_read,
            "skipped": dict(sorted(self.skipped.items())),
        }

    def next_packet(self) -> Optional[PacketRecord]:
        while True:
            raw = self._fh.read(RECORD_HEADER_LEN)
            if not raw:
                return None
            if len(raw) < RECORD_HEADER_LEN:
                raise TruncatedRecord(
                    f"record header cut short after {self.packets_read} packets", self.packets_read)
            ts_sec, ts_frac, incl_len, orig_len = self._rec.unpack(raw)
            data = self._fh.read(incl_len)
            if len(data) < incl_len:
                raise TruncatedRecord(
                    f"record claims {incl_len} bytes, {len(data)} remain "
                    f"(after {self.packets_read} packets)", self.packets_read)
            self.records_seen += 1
            pkt = self._decode(ts_sec, ts_frac, data, orig_len)
            if pkt is not None:
                self.packets_read += 1
                return pkt

    def _decode(self, ts_sec, ts_frac, data, orig_len):
        if self.header.link_type == LINKTYPE_ETHERNET:
            if len(data) < 14:
                self.skipped["truncated"] += 1
                return None
            ethertype = int.from_bytes(data[12:14], "big")
            offset = 14
            if ethertype == ETH_P_8021Q:
                if len(data) < 18:
                    self.skipped["truncated"] += 1
                    return None
                ethertype = int.from_bytes(data[16:18], "big")
                offset = 18
            if ethertype == ETH_P_IP:
                version = 4
            elif ethertype == ETH_P_IPV6:
                version = 6
            else:
                self.skipped["non_ip"] += 1
                return None
        else:
            offset = 0
            if not data:
                self.skipped["truncated"] += 1
                return None
            version = data[0] >> 4
            if version not in (4, 6):
                self.skipped["non_ip"] += 1
                return None

        if version == 4:
            parsed = self._ipv4(data, offset)
        else:
            parsed = self._ipv6(data, offset)
        if parsed is None:
            return None
        src, dst, proto_num, l4 = parsed
        proto = Protocol.from_ip_proto(proto_num)
        sport = dport = 0
        flags = TcpFlags(0)
        if proto is Protocol.TCP:
            if len(data) - l4 < 20:
                self.skipped["truncated"] += 1
                return None
            sport, dport = struct.unpack_from(">HH", data, l4)
            flags = TcpFlags(data[l4 + 13])
        elif proto is Protocol.UDP:
            if len(data) - l4 < 8:
                self.skipped["truncated"] += 1
                return None
            sport, dport = struct.unpack_from(">HH", data, l4)
        return PacketRecord(ts_sec, ts_frac, _ip_str(src), _ip_str(dst), sport, dport, proto,
                            flags, orig_len, self.header.ticks_per_second)

    def _ipv4(self, data, off):
        if len(data) - off < 20:
            self.skipped["truncated"] += 1
            return None
        if data[off] >> 4 != 4:
            self.skipped["bad_ip_header"] += 1
            return None
        ihl = (data[off] & 0x0F) * 4
        if ihl < 20 or len(data) - off < ihl:
            self.skipped["bad_ip_header"] += 1
            return None
        frag_offset = int.from_bytes(data[off + 6:off + 8], "big") & 0x1FFF
        if frag_offset:
            self.skipped["fragment"] += 1
            return None
        return data[off + 12:off + 16], data[off + 16:off + 20], data[off + 9], off + ihl

    def _ipv6(self, data, off):
        if len(data) - off < 40:
            self.skipped["truncated"] += 1
            return None
        if data[off] >> 4 != 6:
            self.skipped["bad_ip_header"] += 1
            return None
        nxt = data[off + 6]
        src, dst = data[off + 8:off + 24], data[off + 24:off + 40]
        pos = off + 40
        while nxt in _IPV6_EXT or nxt == _IPV6_FRAGMENT:
            if len(data) - pos < 8:
                self.skipped["truncated"] += 1
                return None
            if nxt == _IPV6_FRAGMENT:
                if int.from_bytes(data[pos + 2:pos + 4], "big") >> 3:
                    self.skipped["fragment"] += 1
                    return None
                nxt, pos = data[pos], pos + 8
            else:
                nxt, pos = data[pos], pos + 8 * (data[pos + 1] + 1)
        return src, dst, nxt, pos


def parse_global_header(raw: bytes) -> CaptureHeader:
    if len(raw) < GLOBAL_HEADER_LEN:
        raise TruncatedHeader(f"global header needs {GLOBAL_HEADER_LEN} bytes, got {len(raw)}")
    for prefix, endianness in (("<", "little"), (">", "big")):
        magic = struct.unpack(prefix + "I", raw[:4])[0]
        if magic in (MAGIC_USEC, MAGIC_NSEC):
            break
    else:
        raise UnknownMagic(f"not a classic pcap file (magic {raw[:4].hex()})")
    major, minor, _zone, _sigfigs, snaplen, link_type = struct.unpack(prefix + "HHiIII", raw[4:24])
    if link_type not in (LINKTYPE_ETHERNET, LINKTYPE_RAW):
        raise UnsupportedLinkType(f"link type {link_type} (supported: 1 Ethernet, 101 raw IP)")
    return CaptureHeader(
        magic=magic,
        endianness=endianness,
        time_resolution="nanosecond" if magic == MAGIC_NSEC else "microsecond",
        link_type=link_type,
        snaplen=snaplen,
        version=(major, minor),
    )


def open_capture(path) -> CaptureStream:
    """Open a classic pcap file positioned after its global header."""
    fh = open(path, "rb")
    try:
        header = parse_global_header(fh.read(GLOBAL_HEADER_LEN))
    except Exception:
        fh.close()
        raise
    return CaptureStream(fh, header, path=Path(path))


def next_packet(stream: CaptureStream) -> Optional[PacketRecord]:
    return stream.next_packet()


def read_packets(path) -> list:
    with open_capture(path) as stream:
        return list(stream)


# -- writer ---------------------------------------------------------------

def build_frame(pkt: PacketRecord, link_type: int = LINKTYPE_ETHERNET, payload: bytes = b"") -> bytes:
    """Assemble Ethernet/raw-IP + IPv4/IPv6 + TCP/UDP bytes for ``pkt``.

    OTHER packets are emitted as ICMP (v4) or ICMPv6 echo requests.
    """
    v6 = ":" in pkt.src_ip
    if pkt.protocol is Protocol.TCP:
        l4 = struct.pack(">HHIIBBHHH", pkt.src_port, pkt.dst_port, 0, 0, 5 << 4,
                         int(pkt.tcp_flags) & 0xFF, 65535, 0, 0)
        proto_num = 6
    elif pkt.protocol is Protocol.UDP:
        l4 = struct.pack(">HHHH", pkt.src_port, pkt.dst_port, 8 + len(payload), 0)
        proto_num = 17
    else:
        l4 = struct.pack(">BBHHH", 128 if v6 else 8, 0, 0, 0, 0)
        proto_num = 58 if v6 else 1
    l4 += payload
    if v6:
        ip = struct.pack(">IHBB", 6 << 28, len(l4), proto_num, 64)
        ip += socket.inet_pton(socket.AF_INET6, pkt.src_ip) + socket.inet_pton(socket.AF_INET6, pkt.dst_ip)
        ethertype = ETH_P_IPV6
    else:
        ip = struct.pack(">BBHHHBBH", 0x45, 0, 20 + len(l4), 0, 0, 64, proto_num, 0)
        ip += socket.inet_aton(pkt.src_ip) + socket.inet_aton(pkt.dst_ip)
        ethertype = ETH_P_IP
    frame = ip + l4
    if link_type == LINKTYPE_ETHERNET:
        frame = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack(">H", ethertype) + frame
        if pkt.wire_len > len(frame):
            frame += b"\x00" * (pkt.wire_len - len(frame))
    return frame


@dataclass
class PcapWriter:
    """Write frames to a classic pcap file."""

    path: object
    link_type: int = LINKTYPE_ETHERNET
    nanosecond: bool = False
    big_endian: bool = False
    snaplen: int = 65535
    _fh: Optional[BinaryIO] = field(default=None, repr=False)

    def __enter__(self):
        prefix = ">" if self.big_endian else "<"
        magic = MAGIC_NSEC if self.nanosecond else MAGIC_USEC
        self._fh = open(self.path, "wb")
        self._fh.write(struct.pack(prefix + "IHHiIII", magic, 2, 4, 0, 0, self.snaplen, self.link_type))
        return self

    def __exit__(self, *exc):
        self._fh.close()

    def write_raw(self, ts_sec: int, ts_frac: int, frame: bytes, orig_len: Optional[int] = None):
        prefix = ">" if self.big_endian else "<"
        orig = len(frame) if orig_len is None else orig_len
        self._fh.write(struct.pack(prefix + "IIII", ts_sec, ts_frac, len(frame), orig))
        self._fh.write(frame)

    def write(self, pkt: PacketRecord):
        frame = build_frame(pkt, self.link_type)
        ticks = 10**9 if self.nanosecond else 10**6
        frac = pkt.ts_ns % 10**9 // (10**9 // ticks)
        self.write_raw(pkt.ts_sec, frac, frame, max(pkt.wire_len, len(frame)))


def write_pcap(path, packets, **kwargs):
    with PcapWriter(path, **kwargs) as writer:
        for pkt in packets:
            writer.write(pkt)
