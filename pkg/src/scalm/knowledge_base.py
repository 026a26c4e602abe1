"""Labeled bad-practice snippet corpus: ingestion, persistence and lookup.

A knowledge-base directory holds three files:

``vectors.scvd``
    the vector store (see :mod:`scalm.vector_store`)
``entries.jsonl``
    one ``{entry_ref, snippet, swc_labels, project, source_path, vector_id}`` per line
``kb.json``
    embedder identity, build stats and a schema version
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from ._util import write_atomic
from .embedding import EmbeddingProviderConfig, get_embedder
from .errors import BatchError, KbMismatch, ManifestError, NotFound, ScalmError
from .swc import SwcId, parse_swc_id
from .vector_store import VectorStore

log = logging.getLogger(__name__)

KB_SCHEMA_VERSION = 1
VECTORS_FILE = "vectors.scvd"
ENTRIES_FILE = "entries.jsonl"
HEADER_FILE = "kb.json"


@dataclass(frozen=True)
class KnowledgeEntry:
    entry_ref: str
    snippet: str
    swc_labels: tuple[SwcId, ...]
    project: str
    source_path: str
    vector_id: int

    def to_dict(self) -> dict:
        return {
            "entry_ref": self.entry_ref,
            "snippet": self.snippet,
            "swc_labels": [str(s) for s in self.swc_labels],
            "project": self.project,
            "source_path": self.source_path,
            "vector_id": self.vector_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> KnowledgeEntry:
        return cls(
            entry_ref=d["entry_ref"],
            snippet=d["snippet"],
            swc_labels=tuple(parse_swc_id(s) for s in d["swc_labels"]),
            project=d["project"],
            source_path=d["source_path"],
            vector_id=int(d["vector_id"]),
        )


@dataclass
class ManifestRecord:
    swc_labels: list[str]
    project: str = ""
    source_path: str = ""
    inline_snippet: str | None = None
    snippet_file: str | None = None

    def to_dict(self) -> dict:
        d = {"swc_labels": self.swc_labels, "project": self.project, "source_path": self.source_path}
        if self.inline_snippet is not None:
            d["inline_snippet"] = self.inline_snippet
        else:
            d["snippet_file"] = self.snippet_file
        return d


@dataclass
class CorpusManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)
    # populated by import_dappscan: annotation rows that could not be sliced
    skipped: list[dict] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | Path) -> CorpusManifest:
        path = Path(path)
        records = []
        with path.open(encoding="utf-8") as f:
            for row_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"invalid JSON: {exc.msg}", row_no) from exc
                records.append(_manifest_record(obj, row_no))
        return cls(records, base_dir=path.parent)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in self.records)

    def save(self, path: str | Path) -> None:
        write_atomic(path, self.to_jsonl())


def _manifest_record(obj, row_no: int) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestError("record must be a JSON object", row_no)
    has_file, has_inline = "snippet_file" in obj, "inline_snippet" in obj
    if has_file == has_inline:
        raise ManifestError("exactly one of snippet_file / inline_snippet is required", row_no)
    labels = obj.get("swc_labels", [])
    if not isinstance(labels, list) or not all(isinstance(s, str) for s in labels):
        raise ManifestError("swc_labels must be a list of strings", row_no)
    return ManifestRecord(
        swc_labels=labels,
        project=str(obj.get("project", "")),
        source_path=str(obj.get("source_path", "")),
        inline_snippet=obj.get("inline_snippet"),
        snippet_file=obj.get("snippet_file"),
    )


@dataclass
class BuildStats:
    ingested: int = 0
    skipped_unlabeled: int = 0
    skipped_duplicate: int = 0
    failed: int = 0
    failures: list[dict] = field(default_factory=list)

    def fail(self, index: int, reason: str) -> None:
        self.failed += 1
        self.failures.append({"record": index, "reason": reason})

    def to_dict(self) -> dict:
        return asdict(self)


def snippet_hash(snippet: str) -> str:
    return hashlib.sha256(snippet.encode("utf-8")).hexdigest()[:16]


class KnowledgeBase:
    def __init__(self, embedder: EmbeddingProviderConfig, store: VectorStore | None = None):
        self.embedder = embedder
        self.store = store if store is not None else VectorStore()
        self.entries: dict[str, KnowledgeEntry] = {}
        self.stats = BuildStats()
        self._by_hash: dict[str, list[str]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def get_entry(self, entry_ref: str) -> KnowledgeEntry:
        try:
            return self.entries[entry_ref]
        except KeyError:
            raise NotFound(entry_ref) from None

    def label_filter(self, swc: SwcId):
        return lambda ref: swc in self.entries[ref].swc_labels

    def label_histogram(self) -> dict[str, int]:
        counts = Counter(str(s) for e in self.entries.values() for s in e.swc_labels)
        return dict(sorted(counts.items(), key=lambda kv: int(kv[0].split("-")[1])))

    def _find_duplicate(self, snippet: str) -> str | None:
        for ref in self._by_hash.get(snippet_hash(snippet), []):
            if self.entries[ref].snippet == snippet:
                return ref
        return None

    def _add(self, snippet, labels, project, source_path, vector) -> KnowledgeEntry:
        digest = snippet_hash(snippet)
        bucket = self._by_hash.setdefault(digest, [])
        ref = f"{digest}-{len(bucket)}"
        vector_id = self.store.insert(vector, ref)
        entry = KnowledgeEntry(ref, snippet, tuple(labels), project, source_path, vector_id)
        self.entries[ref] = entry
        bucket.append(ref)
        return entry

    def check_embedder(self, config: EmbeddingProviderConfig) -> None:
        if config.header() != self.embedder.header():
            raise KbMismatch(
                f"knowledge base was built with {self.embedder.header()}, query embedder is {config.header()}"
            )

    # persistence

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.store.save(directory / VECTORS_FILE)
        entries = sorted(self.entries.values(), key=lambda e: e.vector_id)
        write_atomic(
            directory / ENTRIES_FILE,
            "".join(json.dumps(e.to_dict(), ensure_ascii=False) + "\n" for e in entries),
        )
        header = {
            "schema_version": KB_SCHEMA_VERSION,
            "embedder": self.embedder.header(),
            "stats": self.stats.to_dict(),
        }
        write_atomic(directory / HEADER_FILE, json.dumps(header, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, embedder: EmbeddingProviderConfig | None = None) -> KnowledgeBase:
        """Load a KB; when ``embedder`` is given it must match the one used to build it."""
        directory = Path(directory)
        header_path = directory / HEADER_FILE
        if not header_path.is_file():
            raise FileNotFoundError(f"{header_path} not found; is {directory} a knowledge base?")
        header = json.loads(header_path.read_text("utf-8"))
        if header.get("schema_version") != KB_SCHEMA_VERSION:
            raise KbMismatch(f"unsupported knowledge-base schema {header.get('schema_version')}")
        emb = header["embedder"]
        built_with = EmbeddingProviderConfig(
            provider_id=emb["provider_id"], dim=emb["dim"], model_name=emb.get("model_name")
        )
        kb = cls(built_with, VectorStore.load(directory / VECTORS_FILE))
        if embedder is not None:
            kb.check_embedder(embedder)
            kb.embedder = embedder
        stats = header.get("stats", {})
        kb.stats = BuildStats(**stats)
        with (directory / ENTRIES_FILE).open(encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    entry = KnowledgeEntry.from_dict(json.loads(line))
                    kb.entries[entry.entry_ref] = entry
                    kb._by_hash.setdefault(entry.entry_ref.rsplit("-", 1)[0], []).append(entry.entry_ref)
        if len(kb.entries) != len(kb.store):
            raise KbMismatch(f"{len(kb.entries)} entries but {len(kb.store)} vectors")
        for entry in kb.entries.values():
            if kb.store.entry_ref(entry.vector_id) != entry.entry_ref:
                raise KbMismatch(f"entry {entry.entry_ref} does not match vector {entry.vector_id}")
        return kb


def _read_snippet(record: ManifestRecord, base_dir: Path) -> str:
    if record.inline_snippet is not None:
        return record.inline_snippet
    path = Path(record.snippet_file)
    if not path.is_absolute():
        path = base_dir / path
    return path.read_text(encoding="utf-8")


def ingest_corpus(
    manifest: CorpusManifest,
    embedder: EmbeddingProviderConfig | None = None,
    store: VectorStore | None = None,
    kb: KnowledgeBase | None = None,
    batch_size: int = 64,
) -> KnowledgeBase:
    """Embed and store every labeled, non-duplicate manifest record.

    Per-record problems (unreadable file, bad label, embedding failure) are
    counted in ``kb.stats`` rather than raised.  Ids follow manifest order.
    """
    if kb is None:
        kb = KnowledgeBase(embedder or EmbeddingProviderConfig(), store)
    provider = get_embedder(kb.embedder)
    stats = kb.stats
    pending: list[tuple[int, str, tuple[SwcId, ...], ManifestRecord]] = []
    pending_text: dict[str, int] = {}

    def flush() -> None:
        if not pending:
            return
        texts = [p[1] for p in pending]
        try:
            vectors = provider.embed_batch(texts)
        except ScalmError:
            vectors = []
            for idx, text, _, _ in pending:
                try:
                    vectors.append(provider.embed(text))
                except ScalmError as exc:
                    vectors.append(exc)
        for (idx, text, labels, rec), vec in zip(pending, vectors):
            if isinstance(vec, Exception):
                stats.fail(idx, f"embedding failed: {vec}")
                continue
            kb._add(text, labels, rec.project, rec.source_path, vec)
            stats.ingested += 1
        pending.clear()
        pending_text.clear()

    for idx, rec in enumerate(manifest.records):
        if not rec.swc_labels:
            stats.skipped_unlabeled += 1
            continue
        try:
            labels = tuple(dict.fromkeys(parse_swc_id(s) for s in rec.swc_labels))
        except ScalmError as exc:
            stats.fail(idx, f"bad label: {exc}")
            continue
        try:
            snippet = _read_snippet(rec, manifest.base_dir)
        except (OSError, UnicodeDecodeError) as exc:
            stats.fail(idx, f"unreadable snippet: {exc}")
            continue
        if not snippet.strip():
            stats.fail(idx, "empty snippet")
            continue
        if kb._find_duplicate(snippet) is not None or snippet in pending_text:
            stats.skipped_duplicate += 1
            continue
        pending_text[snippet] = idx
        pending.append((idx, snippet, labels, rec))
        if len(pending) >= batch_size:
            flush()
    flush()
    log.info("ingested %d records (%d duplicate, %d unlabeled, %d failed)",
             stats.ingested, stats.skipped_duplicate, stats.skipped_unlabeled, stats.failed)
    return kb


# --- DAppSCAN-style annotations ------------------------------------------------


def _annotation_rows(path: Path) -> Iterable[tuple[int, dict]]:
    if path.suffix.lower() == ".csv":
        with path.open(encoding="utf-8", newline="") as f:
            for row_no, row in enumerate(csv.DictReader(f), start=2):
                yield row_no, row
        return
    with path.open(encoding="utf-8") as f:
        for row_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield row_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", row_no) from exc


def _parse_annotation(row, row_no: int) -> tuple[str, int, int, list[str]]:
    if not isinstance(row, dict):
        raise ManifestError("annotation must be an object", row_no)
    try:
        file = str(row["path"])
        start, end = int(row["start_line"]), int(row["end_line"])
        swc = row["swc"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed annotation ({exc})", row_no) from exc
    labels = swc if isinstance(swc, list) else [s for s in str(swc).replace(";", ",").split(",") if s.strip()]
    if start < 1 or end < start:
        raise ManifestError(f"bad line range {start}-{end}", row_no)
    try:
        labels = [str(parse_swc_id(s)) for s in labels]
    except ScalmError as exc:
        raise ManifestError(str(exc), row_no) from exc
    return file, start, end, labels


def _keep_lines(text: str) -> list[str]:
    # "\n" only, matching SourceUnit line numbering
    parts = text.split("\n")
    out = [p + "\n" for p in parts[:-1]]
    if parts[-1]:
        out.append(parts[-1])
    return out


def import_dappscan(root_dir: str | Path, annotation_file: str | Path) -> CorpusManifest:
    """Slice annotated line ranges out of a source tree into an inline-snippet manifest.

    Annotations are JSONL (or CSV with the same columns): ``path`` relative to
    ``root_dir``, ``start_line``, ``end_line`` (1-based inclusive) and ``swc``
    (one id, a list, or a comma/semicolon separated string).  Rows naming the
    same file and range are merged.  Missing files and out-of-range spans are
    listed in ``manifest.skipped``; malformed rows raise ManifestError.
    """
    root = Path(root_dir)
    grouped: dict[tuple[str, int, int], list[str]] = {}
    skipped: list[dict] = []
    lines_cache: dict[str, list[str] | None] = {}
    for row_no, row in _annotation_rows(Path(annotation_file)):
        file, start, end, labels = _parse_annotation(row, row_no)
        if file not in lines_cache:
            try:
                lines_cache[file] = _keep_lines((root / file).read_bytes().decode("utf-8"))
            except (OSError, UnicodeDecodeError):
                lines_cache[file] = None
        lines = lines_cache[file]
        if lines is None:
            skipped.append({"row": row_no, "path": file, "reason": "missing file"})
            continue
        if end > len(lines):
            skipped.append({"row": row_no, "path": file, "reason": f"line {end} beyond end of file"})
            continue
        key = (file, start, end)
        merged = grouped.setdefault(key, [])
        merged.extend(l for l in labels if l not in merged)

    records = []
    for (file, start, end), labels in grouped.items():
        lines = lines_cache[file]
        records.append(
            ManifestRecord(
                swc_labels=labels,
                project=Path(file).parts[0] if len(Path(file).parts) > 1 else "",
                source_path=file,
                inline_snippet="".join(lines[start - 1 : end]),
            )
        )
    return CorpusManifest(records, base_dir=root, skipped=skipped)
