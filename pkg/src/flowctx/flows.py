"""Bidirectional flow aggregation with per-source-host context.

Packets are grouped under a direction-blind 5-tuple. Each flow carries nine
flow-level statistics; the host that sent a flow's first packet (the
initiator) owns four cumulative contextual counters that are snapshotted into
the flow's record when the flow is emitted.
"""
from __future__ import annotations

import csv
import heapq
import io
import math
import socket
from dataclasses import dataclass, field
from decimal import Decimal
from functools import lru_cache
from typing import Iterable, List, NamedTuple, Optional

import numpy as np

from .pcap import PacketRecord, Protocol, TcpFlags, open_capture
from .errors import TruncatedRecord

NS = 10**9

CONTINUOUS_FEATURES = (
    "flow_dur", "iat_mean", "iat_std", "fin_num", "syn_num", "rst_num", "pkt_num",
    "pkts_per_sec", "num_s_port", "num_d_ip", "num_d_port", "con_per_sec",
)
FEATURE_NAMES = ("protocol",) + CONTINUOUS_FEATURES
METADATA_COLUMNS = ("src_ip", "dst_ip", "src_port", "dst_port", "first_ts")
CSV_COLUMNS = FEATURE_NAMES + METADATA_COLUMNS
_INTEGER_COLUMNS = {"fin_num", "syn_num", "rst_num", "pkt_num", "num_s_port", "num_d_ip", "num_d_port"}


@lru_cache(maxsize=65536)
def _addr_bytes(ip: str) -> bytes:
    family = socket.AF_INET6 if ":" in ip else socket.AF_INET
    return socket.inet_pton(family, ip)


class FlowKey(NamedTuple):
    """Canonical 5-tuple with the (address, port) endpoints in byte order."""

    ip_a: str
    port_a: int
    ip_b: str
    port_b: int
    protocol: Protocol

    @classmethod
    def of(cls, pkt: PacketRecord) -> "FlowKey":
        a = (_addr_bytes(pkt.src_ip), pkt.src_port)
        b = (_addr_bytes(pkt.dst_ip), pkt.dst_port)
        if a <= b:
            return cls(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port, pkt.protocol)
        return cls(pkt.dst_ip, pkt.dst_port, pkt.src_ip, pkt.src_port, pkt.protocol)

    def sort_key(self):
        return (_addr_bytes(self.ip_a), self.port_a, _addr_bytes(self.ip_b), self.port_b, int(self.protocol))


@dataclass
class FlowRecord:
    key: FlowKey
    initiator_ip: str
    initiator_port: int
    responder_ip: str
    responder_port: int
    protocol: Protocol
    first_ns: int
    last_ns: int
    pkt_num: int = 1
    syn_num: int = 0
    fin_num: int = 0
    rst_num: int = 0
    gap_sum: int = 0
    gap_sumsq: int = 0
    serial: int = 0

    def add(self, pkt: PacketRecord):
        ts = pkt.ts_ns
        if ts > self.last_ns:
            gap = ts - self.last_ns
            self.gap_sum += gap
            self.gap_sumsq += gap * gap
            self.last_ns = ts
        self.first_ns = min(self.first_ns, ts)
        self.pkt_num += 1
        self._count_flags(pkt.tcp_flags)

    def _count_flags(self, flags: TcpFlags):
        if flags & TcpFlags.SYN:
            self.syn_num += 1
        if flags & TcpFlags.FIN:
            self.fin_num += 1
        if flags & TcpFlags.RST:
            self.rst_num += 1


@dataclass
class HostContext:
    """Cumulative behaviour of one source IP since its first initiated flow."""

    first_seen_ns: int
    src_ports: set = field(default_factory=set)
    dst_ips: set = field(default_factory=set)
    dst_ports: set = field(default_factory=set)
    flows_initiated: int = 0

    def observe(self, pkt: PacketRecord):
        self.src_ports.add(pkt.src_port)
        self.dst_ips.add(pkt.dst_ip)
        self.dst_ports.add(pkt.dst_port)
        self.flows_initiated += 1


@dataclass
class RawFeatureRecord:
    """The 13 flow features plus metadata that is never vectorized."""

    protocol: Protocol
    flow_dur: float
    iat_mean: float
    iat_std: float
    fin_num: int
    syn_num: int
    rst_num: int
    pkt_num: int
    pkts_per_sec: float
    num_s_port: int
    num_d_ip: int
    num_d_port: int
    con_per_sec: float
    src_ip: str = ""
    dst_ip: str = ""
    src_port: int = 0
    dst_port: int = 0
    first_ts_ns: int = 0
    label: Optional[str] = None

    def continuous(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in CONTINUOUS_FEATURES], dtype=np.float64)

    @property
    def first_ts(self) -> float:
        return self.first_ts_ns / NS


def _seconds(ns: int) -> float:
    return ns / NS


def emit_record(flow: FlowRecord, ctx: HostContext, duration_floor: float = 1e-3) -> RawFeatureRecord:
    dur = _seconds(flow.last_ns - flow.first_ns)
    gaps = flow.pkt_num - 1
    if gaps > 0:
        iat_mean = flow.gap_sum / gaps / NS
        # population variance in exact integer arithmetic (ns^2)
        var_num = gaps * flow.gap_sumsq - flow.gap_sum * flow.gap_sum
        iat_std = math.sqrt(max(var_num, 0) / (gaps * gaps)) / NS
    else:
        iat_mean = iat_std = 0.0
    host_elapsed = _seconds(flow.last_ns - ctx.first_seen_ns)
    return RawFeatureRecord(
        protocol=flow.protocol,
        flow_dur=dur,
        iat_mean=iat_mean,
        iat_std=iat_std,
        fin_num=flow.fin_num,
        syn_num=flow.syn_num,
        rst_num=flow.rst_num,
        pkt_num=flow.pkt_num,
        pkts_per_sec=flow.pkt_num / max(dur, duration_floor),
        num_s_port=len(ctx.src_ports),
        num_d_ip=len(ctx.dst_ips),
        num_d_port=len(ctx.dst_ports),
        con_per_sec=ctx.flows_initiated / max(host_elapsed, duration_floor),
        src_ip=flow.initiator_ip,
        dst_ip=flow.responder_ip,
        src_port=flow.initiator_port,
        dst_port=flow.responder_port,
        first_ts_ns=flow.first_ns,
    )


class FlowTable:
    """Live flows plus per-host context. Single writer.

    A flow is emitted once a later packet arrives more than ``idle_timeout``
    seconds after its last packet, or more than ``active_timeout`` seconds
    after its first. FIN and RST are only counted; they never close a flow.
    """

    def __init__(self, idle_timeout: float = 120.0, active_timeout: float = 3600.0,
                 duration_floor: float = 1e-3):
        self.idle_ns = round(idle_timeout * NS)
        self.active_ns = round(active_timeout * NS)
        self.duration_floor = duration_floor
        self.live: dict = {}
        self.hosts: dict = {}
        self._deadlines: list = []
        self._serial = 0
        self.packets_assigned = 0

    def _deadline(self, flow: FlowRecord) -> int:
        return min(flow.last_ns + self.idle_ns, flow.first_ns + self.active_ns)

    def _emit(self, flows: List[FlowRecord]) -> List[RawFeatureRecord]:
        flows.sort(key=lambda f: (f.first_ns, f.key.sort_key()))
        return [emit_record(f, self.hosts[f.initiator_ip], self.duration_floor) for f in flows]

    def expire(self, now_ns: int) -> List[RawFeatureRecord]:
        expired = []
        heap = self._deadlines
        while heap and heap[0][0] < now_ns:
            _, serial, key = heapq.heappop(heap)
            flow = self.live.get(key)
            if flow is None or flow.serial != serial:
                continue
            deadline = self._deadline(flow)
            if deadline < now_ns:
                del self.live[key]
                expired.append(flow)
            else:
                heapq.heappush(heap, (deadline, serial, key))
        return self._emit(expired)

    def assign(self, pkt: PacketRecord) -> List[RawFeatureRecord]:
        ts = pkt.ts_ns
        out = self.expire(ts)
        key = FlowKey.of(pkt)
        flow = self.live.get(key)
        self.packets_assigned += 1
        if flow is not None:
            flow.add(pkt)
            return out
        self._serial += 1
        flow = FlowRecord(key, pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port, pkt.protocol,
                          first_ns=ts, last_ns=ts, serial=self._serial)
        flow._count_flags(pkt.tcp_flags)
        self.live[key] = flow
        heapq.heappush(self._deadlines, (self._deadline(flow), self._serial, key))
        ctx = self.hosts.get(pkt.src_ip)
        if ctx is None:
            ctx = self.hosts[pkt.src_ip] = HostContext(first_seen_ns=ts)
        ctx.observe(pkt)
        return out

    def finalize(self) -> List[RawFeatureRecord]:
        remaining = list(self.live.values())
        self.live.clear()
        self._deadlines.clear()
        return self._emit(remaining)


def assign_packet(table: FlowTable, pkt: PacketRecord) -> List[RawFeatureRecord]:
    return table.assign(pkt)


def finalize(table: FlowTable) -> List[RawFeatureRecord]:
    return table.finalize()


def aggregate(packets: Iterable[PacketRecord], **table_kwargs) -> List[RawFeatureRecord]:
    table = FlowTable(**table_kwargs)
    records = []
    for pkt in packets:
        records.extend(table.assign(pkt))
    records.extend(table.finalize())
    return records


def extract_pcaps(paths, allow_truncated=False, **table_kwargs):
    """Run every capture in ``paths`` through one flow table.

    Returns ``(records, reports)`` with one ingest report per capture.
    """
    table = FlowTable(**table_kwargs)
    records, reports = [], []
    for path in paths:
        with open_capture(path) as stream:
            try:
                for pkt in stream:
                    records.extend(table.assign(pkt))
                error = None
            except TruncatedRecord as exc:
                if not allow_truncated:
                    raise
                error = str(exc)
            report = stream.report()
            report["error"] = error
            reports.append(report)
    records.extend(table.finalize())
    return records, reports


# -- CSV interchange -------------------------------------------------------

def format_real(value: float) -> str:
    return f"{value:.9g}"


def format_ts(ns: int) -> str:
    return f"{ns // NS}.{ns % NS:09d}"


def parse_ts(text: str) -> int:
    return int(Decimal(text) * NS)


def record_row(rec: RawFeatureRecord) -> list:
    row = [rec.protocol.name]
    for name in CONTINUOUS_FEATURES:
        value = getattr(rec, name)
        row.append(str(int(value)) if name in _INTEGER_COLUMNS else format_real(value))
    row += [rec.src_ip, rec.dst_ip, str(rec.src_port), str(rec.dst_port), format_ts(rec.first_ts_ns)]
    return row


def write_flows_csv(records, dest, with_labels: Optional[bool] = None):
    """Write records as CSV to a path or text stream.

    A trailing ``label`` column is added when ``with_labels`` is true (by
    default: when every record carries a label).
    """
    if with_labels is None:
        with_labels = bool(records) and all(r.label is not None for r in records)
    own = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
    fh = open(dest, "w", newline="") if own else dest
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(CSV_COLUMNS) + (["label"] if with_labels else []))
        for rec in records:
            writer.writerow(record_row(rec) + ([rec.label] if with_labels else []))
    finally:
        if own:
            fh.close()


def iter_flows_csv(source):
    own = isinstance(source, (str, bytes)) or hasattr(source, "__fspath__")
    fh = open(source, newline="") if own else source
    try:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"flow CSV missing columns: {missing}")
        has_label = "label" in reader.fieldnames
        for row in reader:
            kwargs = {"protocol": Protocol[row["protocol"]]}
            for name in CONTINUOUS_FEATURES:
                kwargs[name] = int(row[name]) if name in _INTEGER_COLUMNS else float(row[name])
            yield RawFeatureRecord(
                **kwargs,
                src_ip=row["src_ip"], dst_ip=row["dst_ip"],
                src_port=int(row["src_port"]), dst_port=int(row["dst_port"]),
                first_ts_ns=parse_ts(row["first_ts"]),
                label=row["label"] if has_label else None,
            )
    finally:
        if own:
            fh.close()


def read_flows_csv(source) -> List[RawFeatureRecord]:
    return list(iter_flows_csv(source))


def flows_csv_text(records) -> str:
    buf = io.StringIO()
    write_flows_csv(records, buf)
    return buf.getvalue()
