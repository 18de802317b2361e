"""Flow features with per-host context, DBSCAN pseudo-labels, a contrastive
embedding and a frozen-embedding detector."""

__version__ = "0.1.0"

from .bundle import ModelBundle, load_model, save_model
from .cluster import DBSCAN, dbscan
from .errors import *  # noqa: F401,F403
from .flows import RawFeatureRecord, aggregate, extract_pcaps, read_flows_csv, write_flows_csv
from .pcap import PacketRecord, Protocol, TcpFlags, open_capture, read_packets, write_pcap
from .preprocess import FlowVectorizer, LabelSpec, downsample, join_labels, split_folds
from .training import ContextFlowDetector, ContrastiveEmbedder, FrozenEmbeddingClassifier

__all__ = [
    "ContextFlowDetector", "ContrastiveEmbedder", "DBSCAN", "FlowVectorizer", "FrozenEmbeddingClassifier",
    "LabelSpec", "ModelBundle", "PacketRecord", "Protocol", "RawFeatureRecord", "TcpFlags", "aggregate",
    "dbscan", "downsample", "extract_pcaps", "join_labels", "load_model", "open_capture", "read_flows_csv",
    "read_packets", "save_model", "split_folds", "write_flows_csv", "write_pcap",
]
