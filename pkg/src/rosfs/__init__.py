"""rosfs: time-indexed, per-topic append-only storage for timestamped
robot messages, with range queries that work while a recording is still
being written, and a request/reply network interface."""

from .bag import convert_bag_to_container, open_bag, write_bag
from .container import (
    ContainerMetadata,
    ContainerReader,
    ContainerWriter,
    Message,
    create_container,
    open_container,
    read_metadata,
)
from .errors import RosfsError
from .netproto import QueryServer, request, serve, throttle_link
from .query import BandwidthEstimate, QueryEngine, QueryResult, open_engine
from .recorder import (
    DurabilityPolicy,
    RecordSession,
    record,
    recover_container,
    start_session,
)
from .synth import SynthSource, TopicSpec, generate, load_workload
from .timeindex import IndexCache, IndexEntry, IndexKey, TimeIndexReader, TimeIndexWriter
from .topics import TopicManager

__version__ = "0.1.0"

__all__ = [
    "BandwidthEstimate",
    "ContainerMetadata",
    "ContainerReader",
    "ContainerWriter",
    "DurabilityPolicy",
    "IndexCache",
    "IndexEntry",
    "IndexKey",
    "Message",
    "QueryEngine",
    "QueryResult",
    "QueryServer",
    "RecordSession",
    "RosfsError",
    "SynthSource",
    "TimeIndexReader",
    "TimeIndexWriter",
    "TopicManager",
    "TopicSpec",
    "convert_bag_to_container",
    "create_container",
    "generate",
    "load_workload",
    "open_bag",
    "open_container",
    "open_engine",
    "read_metadata",
    "record",
    "recover_container",
    "request",
    "serve",
    "start_session",
    "throttle_link",
    "write_bag",
]
