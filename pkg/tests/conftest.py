import socket
import struct

import numpy as np
import pytest

from flowctx.flows import RawFeatureRecord
from flowctx.pcap import Protocol


# Hand-assembled frames. Kept independent of flowctx.pcap.build_frame on purpose.

def ipv4_tcp_frame(src, dst, sport, dport, flags, pad_to=60, ethertype=0x0800, vlan=None):
    tcp = struct.pack(">HHIIBBHHH", sport, dport, 1, 0, 0x50, flags, 1024, 0, 0)
    ip = struct.pack(">BBHHHBBH4s4s", 0x45, 0, 20 + len(tcp), 1, 0, 64, 6, 0,
                     socket.inet_aton(src), socket.inet_aton(dst))
    eth = bytes.fromhex("001122334455") + bytes.fromhex("66778899aabb")
    if vlan is not None:
        eth += struct.pack(">HH", 0x8100, vlan)
    frame = eth + struct.pack(">H", ethertype) + ip + tcp
    return frame + b"\x00" * max(0, pad_to - len(frame))


def ipv4_icmp_frame(src, dst):
    icmp = struct.pack(">BBHHH", 8, 0, 0, 7, 1)
    ip = struct.pack(">BBHHHBBH4s4s", 0x45, 0, 20 + len(icmp), 2, 0, 64, 1, 0,
                     socket.inet_aton(src), socket.inet_aton(dst))
    frame = bytes(6) + bytes(6) + b"\x08\x00" + ip + icmp
    return frame + b"\x00" * (60 - len(frame))


def arp_frame():
    body = struct.pack(">HHBBH6s4s6s4s", 1, 0x0800, 6, 4, 1, bytes(6), socket.inet_aton("10.0.0.1"),
                       bytes(6), socket.inet_aton("10.0.0.2"))
    frame = b"\xff" * 6 + bytes(6) + b"\x08\x06" + body
    return frame + b"\x00" * (60 - len(frame))


def pcap_bytes(records, magic=0xA1B2C3D4, endian="<", link_type=1):
    """``records`` is a list of ``(ts_sec, ts_frac, frame)``."""
    out = struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, link_type)
    for sec, frac, frame in records:
        out += struct.pack(endian + "IIII", sec, frac, len(frame), len(frame)) + frame
    return out


def make_record(protocol=Protocol.TCP, **kw):
    values = dict(flow_dur=0.0, iat_mean=0.0, iat_std=0.0, fin_num=0, syn_num=0, rst_num=0, pkt_num=1,
                  pkts_per_sec=1000.0, num_s_port=1, num_d_ip=1, num_d_port=1, con_per_sec=1000.0,
                  src_ip="10.0.0.1", dst_ip="10.0.0.2", src_port=1234, dst_port=80)
    values.update(kw)
    return RawFeatureRecord(protocol=protocol, **values)


def gaussian_blobs(n_per=100, k=3, dim=15, sigma=0.05, seed=1):
    rng = np.random.default_rng(seed)
    centers = np.zeros((k, dim))
    for c in range(k):
        centers[c, c] = 1.0  # unit-apart axes: pairwise distance sqrt(2) = 28 sigma
    X = np.concatenate([centers[c] + sigma * rng.standard_normal((n_per, dim)) for c in range(k)])
    y = np.repeat(np.arange(k), n_per)
    return X.astype(np.float32), y


@pytest.fixture(scope="session")
def small_corpus():
    from flowctx.flows import aggregate
    from flowctx.preprocess import LabelSpec, join_labels
    from flowctx.synth import make_corpus

    corpus = make_corpus(n_flows=3000, seed=5)
    records = join_labels(aggregate(corpus.packets), LabelSpec.parse(corpus.label_spec))
    return corpus, records
