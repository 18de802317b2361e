"""Synthetic traffic: ordinary clients talking to a few servers, plus scanners.

Used by the tests and the ``synth`` CLI command. Ground truth for the
scanner hosts is returned alongside the packets so contextual features can
be checked exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pcap import PacketRecord, Protocol, TcpFlags

SYN, ACK, FIN, RST, PSH = TcpFlags.SYN, TcpFlags.ACK, TcpFlags.FIN, TcpFlags.RST, TcpFlags.PSH


@dataclass
class Corpus:
    packets: list
    scanners: list
    label_spec: str
    n_flows: int


def _tcp_session(rng, t, client, cport, server, sport, pkts):
    out = [PacketRecord.at(t, client, server, cport, sport, Protocol.TCP, SYN, 74)]
    t += rng.exponential(0.02)
    out.append(PacketRecord.at(t, server, client, sport, cport, Protocol.TCP, SYN | ACK, 74))
    t += rng.exponential(0.005)
    out.append(PacketRecord.at(t, client, server, cport, sport, Protocol.TCP, ACK, 66))
    for k in range(pkts):
        t += rng.exponential(0.05)
        if k % 2:
            out.append(PacketRecord.at(t, server, client, sport, cport, Protocol.TCP, PSH | ACK,
                                       int(rng.integers(200, 1500))))
        else:
            out.append(PacketRecord.at(t, client, server, cport, sport, Protocol.TCP, PSH | ACK,
                                       int(rng.integers(80, 600))))
    t += rng.exponential(0.05)
    out.append(PacketRecord.at(t, client, server, cport, sport, Protocol.TCP, FIN | ACK, 66))
    t += rng.exponential(0.02)
    out.append(PacketRecord.at(t, server, client, sport, cport, Protocol.TCP, FIN | ACK, 66))
    return out


def _udp_exchange(rng, t, client, cport, server, sport):
    reply = t + rng.exponential(0.01)
    return [PacketRecord.at(t, client, server, cport, sport, Protocol.UDP, wire_len=80),
            PacketRecord.at(reply, server, client, sport, cport, Protocol.UDP, wire_len=200)]


def scan_packets(src="10.66.0.1", target="10.9.0.1", n_ports=50, duration=10.0, start=0.0, first_port=1):
    """One SYN per destination port, evenly spaced so the last lands at ``start + duration``."""
    step = duration / (n_ports - 1) if n_ports > 1 else 0.0
    return [PacketRecord.at(start + k * step, src, target, 40000 + k, first_port + k, Protocol.TCP, SYN, 60)
            for k in range(n_ports)]


def make_corpus(n_flows=50_000, malicious_fraction=0.2, duration=600.0, seed=0) -> Corpus:
    """Generate roughly ``n_flows`` flows, sorted by time.

    Benign clients run TCP sessions and DNS-style UDP exchanges against a
    small server pool. Scanners sweep SYNs over many hosts and ports; a share
    of the probes draws a RST back.
    """
    rng = np.random.default_rng(seed)
    n_mal = int(round(n_flows * malicious_fraction))
    n_ben = n_flows - n_mal
    servers = [f"192.0.2.{i}" for i in range(1, 41)] + [f"2001:db8::{i:x}" for i in range(1, 11)]
    n_clients = max(1, n_ben // 80)
    clients = [f"10.1.{i // 250}.{i % 250 + 1}" for i in range(n_clients)]
    v6_clients = {c: f"2001:db8:1::{i + 1:x}" for i, c in enumerate(clients)}
    packets = []

    favourites = {c: rng.choice(40, size=int(rng.integers(2, 6)), replace=False) for c in clients}
    owner = rng.integers(0, n_clients, size=n_ben)
    starts = np.sort(rng.uniform(0, duration, size=n_ben))
    next_port = {c: int(rng.integers(20000, 50000)) for c in clients}
    for t, k in zip(starts, owner):
        client = clients[k]
        cport = next_port[client]
        next_port[client] = 1024 + (cport - 1024 + 1) % 60000
        kind = rng.random()
        if kind < 0.1:
            # some clients also reach v6 servers from their v6 address
            server = servers[40 + int(rng.integers(0, 10))]
            packets += _tcp_session(rng, t, v6_clients[client], cport, server, 443, int(rng.integers(2, 12)))
        elif kind < 0.35:
            server = servers[int(rng.choice(favourites[client]))]
            packets += _udp_exchange(rng, t, client, cport, server, 53)
        else:
            server = servers[int(rng.choice(favourites[client]))]
            sport = 443 if rng.random() < 0.7 else 80
            packets += _tcp_session(rng, t, client, cport, server, sport, int(rng.integers(2, 30)))

    n_scanners = max(1, n_mal // 1000)
    scanners = [f"10.66.{i // 250}.{i % 250 + 1}" for i in range(n_scanners)]
    per = np.full(n_scanners, n_mal // n_scanners)
    per[: n_mal % n_scanners] += 1
    for s, count in zip(scanners, per):
        begin = rng.uniform(0, duration * 0.5)
        span = rng.uniform(duration * 0.1, duration * 0.5)
        times = np.sort(rng.uniform(begin, begin + span, size=count))
        sport = int(rng.integers(30000, 60000))
        for j, t in enumerate(times):
            target = f"198.51.100.{int(rng.integers(1, 255))}"
            dport = int(rng.integers(1, 65536))
            cport = 30000 + (sport + j) % 30000
            packets.append(PacketRecord.at(t, s, target, cport, dport, Protocol.TCP, SYN, 60))
            if rng.random() < 0.3:
                packets.append(PacketRecord.at(t + rng.exponential(0.01), target, s, dport, cport,
                                               Protocol.TCP, RST | ACK, 60))

    packets.sort(key=lambda p: p.ts_ns)
    spec = "src_ip,dst_ip,src_port,dst_port,protocol,label\n" + "".join(
        f"{s},*,*,*,*,malicious\n" for s in scanners)
    return Corpus(packets, scanners, spec, n_flows)
