"""Exception types raised across the pipeline.

Class names are stable: the CLI prints them on standard error and scripts
match on them.
"""


class FlowctxError(Exception):
    """Base class for data errors (CLI exit code 2)."""


# capture ingest
class PcapError(FlowctxError):
    pass


class UnknownMagic(PcapError):
    pass


class UnsupportedLinkType(PcapError):
    pass


class TruncatedHeader(PcapError):
    pass


class TruncatedRecord(PcapError):
    def __init__(self, message, packets_read=0):
        super().__init__(message)
        self.packets_read = packets_read


# preprocessing
class EmptyTrainingSet(FlowctxError):
    pass


class MalformedRule(FlowctxError):
    pass


class TooFewRecords(FlowctxError):
    pass


# clustering
class NoisePairRejected(FlowctxError):
    pass


# networks and training
class BatchTooSmallForTrainMode(FlowctxError):
    pass


class ShapeMismatch(FlowctxError):
    pass


class InsufficientClusters(FlowctxError):
    pass


class SingleClassDataset(FlowctxError):
    pass


class CorruptModelFile(FlowctxError):
    pass


# evaluation
class LengthMismatch(FlowctxError):
    pass
