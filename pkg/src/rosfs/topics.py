"""Topic lookup tables: name <-> id and id -> brick path.

Ids are dense integers assigned in first-seen order during recording and
rebuilt from metadata order on open, so they are stable across reopen.
Mutated only by the recorder thread; concurrent readers see consistent
snapshots (single-assignment dict updates under the GIL).
"""

from __future__ import annotations

from pathlib import Path

from .container import ContainerMetadata, ContainerWriter, brick_path
from .errors import UnknownTopic


class TopicManager:
    def __init__(self, root: Path | str, writer: ContainerWriter | None = None):
        self.root = Path(root)
        self._writer = writer
        self._name_to_id: dict[str, int] = {}
        self._id_to_path: dict[int, Path] = {}
        self._types: dict[int, str] = {}
        self.next_id = 0

    @classmethod
    def from_metadata(cls, root: Path | str, meta: ContainerMetadata) -> "TopicManager":
        mgr = cls(root)
        mgr.load(meta)
        return mgr

    def load(self, meta: ContainerMetadata) -> None:
        """Rebuild tables from metadata (ids follow metadata order)."""
        for info in meta.topics[self.next_id :]:
            self._name_to_id[info.topic_name] = info.topic_id
            self._id_to_path[info.topic_id] = brick_path(self.root, info.topic_id)
            self._types[info.topic_id] = info.message_type
            self.next_id = info.topic_id + 1

    def register(self, topic_name: str, message_type: str = "unknown") -> int:
        """Idempotent: an existing name returns its existing id."""
        tid = self._name_to_id.get(topic_name)
        if tid is not None:
            return tid
        if self._writer is None:
            raise UnknownTopic(f"read-only topic table cannot register {topic_name!r}")
        tid = self._writer.add_topic(topic_name, message_type)
        assert tid == self.next_id
        self._name_to_id[topic_name] = tid
        self._id_to_path[tid] = brick_path(self.root, tid)
        self._types[tid] = message_type
        self.next_id = tid + 1
        return tid

    def lookup(self, topic_name: str) -> int:
        try:
            return self._name_to_id[topic_name]
        except KeyError:
            raise UnknownTopic(f"unknown topic {topic_name!r}") from None

    def lookup_path(self, topic_id: int) -> Path:
        try:
            return self._id_to_path[topic_id]
        except KeyError:
            raise UnknownTopic(f"unknown topic id {topic_id}") from None

    def message_type(self, topic_id: int) -> str:
        try:
            return self._types[topic_id]
        except KeyError:
            raise UnknownTopic(f"unknown topic id {topic_id}") from None

    def names(self) -> list[str]:
        return [name for name, _ in sorted(self._name_to_id.items(), key=lambda kv: kv[1])]

    def __contains__(self, topic_name: str) -> bool:
        return topic_name in self._name_to_id

    def __len__(self) -> int:
        return len(self._name_to_id)
