"""Per-fragment retrieval, two-stage step-back prompting and report assembly."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any

from . import __version__
from .chunker import ChunkConfig, CodeFragment, FragmentKind, SourceUnit, chunk
from .embedding import EmbeddingProviderConfig, get_embedder
from .errors import KbMismatch, ScalmError
from .knowledge_base import KnowledgeBase, KnowledgeEntry
from .llm import ChatProvider, ChatRequest, Message
from .swc import SwcId, lookup, parse_swc_id

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
RISK_LEVELS = ("Low", "Medium", "High", "Critical")
FINDING_FIELDS = (
    "bad_practice_id",
    "title",
    "type",
    "bad_code_block",
    "location",
    "risk_level",
    "reason",
    "suggestions",
    "line",
)

SYSTEM_PROMPT = (
    "You are an experienced Solidity security auditor. You review smart contract code for "
    "bad practices catalogued in the Smart Contract Weakness Classification (SWC) registry "
    "and answer precisely, citing only code you were shown."
)
STEP_BACK_QUESTION = "What are the potential risks with this implementation?"
EXAMPLES_HEADER = "## Known bad-practice examples"


@dataclass(frozen=True)
class AuditConfig:
    k: int = 5
    rag_enabled: bool = True
    min_score: float = 0.0
    chunk: ChunkConfig = field(default_factory=ChunkConfig)
    model_name: str = "default"
    temperature: float = 0.0
    max_tokens: int = 2048
    max_context_chars: int = 12_000
    embedder: EmbeddingProviderConfig = field(default_factory=EmbeddingProviderConfig)
    parallelism: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.min_score <= 1.0:
            raise ValueError("min_score must lie in [0, 1]")

    def snapshot(self) -> dict:
        """Settings that influence report content (parallelism deliberately excluded)."""
        return {
            "k": self.k,
            "rag_enabled": self.rag_enabled,
            "min_score": self.min_score,
            "chunk": asdict(self.chunk),
            "model_name": self.model_name,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "max_context_chars": self.max_context_chars,
            "embedder": self.embedder.header(),
        }


@dataclass(frozen=True)
class RetrievedSnippet:
    entry: KnowledgeEntry
    score: float


@dataclass(frozen=True)
class Location:
    source_path: str
    start_line: int
    end_line: int


@dataclass(frozen=True)
class AuditFinding:
    bad_practice_id: SwcId
    title: str
    type: str
    bad_code_block: str
    location: Location
    risk_level: str
    reason: str
    suggestions: str
    line: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bad_practice_id"] = str(self.bad_practice_id)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AuditFinding:
        return cls(
            bad_practice_id=parse_swc_id(d["bad_practice_id"]),
            title=d["title"],
            type=d["type"],
            bad_code_block=d["bad_code_block"],
            location=Location(**d["location"]),
            risk_level=d["risk_level"],
            reason=d["reason"],
            suggestions=d["suggestions"],
            line=d["line"],
        )


@dataclass(frozen=True)
class RetrievalHit:
    entry_ref: str
    score: float
    swc_labels: tuple[str, ...]


@dataclass
class FragmentDiagnostics:
    index: int
    kind: str
    start_line: int
    end_line: int
    hits: list[RetrievalHit] = field(default_factory=list)
    truncations: int = 0
    findings: int = 0
    dropped_objects: int = 0
    drop_reasons: list[str] = field(default_factory=list)
    parse_failure: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hits"] = [{**asdict(h), "swc_labels": list(h.swc_labels)} for h in self.hits]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FragmentDiagnostics:
        d = dict(d)
        d["hits"] = [RetrievalHit(h["entry_ref"], h["score"], tuple(h["swc_labels"])) for h in d["hits"]]
        return cls(**d)


@dataclass
class AuditReport:
    audited_path: str
    config: dict
    findings: list[AuditFinding] = field(default_factory=list)
    fragments: list[FragmentDiagnostics] = field(default_factory=list)
    tool_version: str = __version__
    schema_version: int = REPORT_SCHEMA_VERSION

    def errors(self) -> list[FragmentDiagnostics]:
        return [f for f in self.fragments if f.error is not None]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "tool_version": self.tool_version,
            "audited_path": self.audited_path,
            "config": self.config,
            "findings": [f.to_dict() for f in self.findings],
            "fragments": [f.to_dict() for f in self.fragments],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> AuditReport:
        return cls(
            audited_path=d["audited_path"],
            config=d["config"],
            findings=[AuditFinding.from_dict(f) for f in d["findings"]],
            fragments=[FragmentDiagnostics.from_dict(f) for f in d["fragments"]],
            tool_version=d["tool_version"],
            schema_version=d["schema_version"],
        )

    @classmethod
    def from_json(cls, text: str) -> AuditReport:
        return cls.from_dict(json.loads(text))


# --- prompts -----------------------------------------------------------------


def _lines(text: str) -> list[str]:
    # split on "\n" only so numbering agrees with SourceUnit line spans
    return text[:-1].split("\n") if text.endswith("\n") else text.split("\n")


def numbered(text: str) -> str:
    lines = _lines(text)
    width = len(str(len(lines)))
    return "\n".join(f"{i:>{width}} | {line}" for i, line in enumerate(lines, start=1))


def _fence(code: str) -> str:
    return f"```solidity\n{code.rstrip(chr(10))}\n```"


def _snippet_block(n: int, snip: RetrievedSnippet, text: str | None = None) -> str:
    labels = ", ".join(f"{s} {lookup(s).title}" for s in snip.entry.swc_labels)
    body = snip.entry.snippet if text is None else text
    return f"### Example {n} ({labels}; similarity {snip.score:.4f})\n{_fence(body)}"


OUTPUT_INSTRUCTIONS = """\
## Output format
Answer with a JSON array and nothing else. Each element describes one bad practice and has exactly these keys:
- "bad_practice_id": the SWC id, e.g. "SWC-107"
- "title": the SWC title
- "type": a short category such as "security", "gas" or "maintainability"
- "bad_code_block": the offending code, copied exactly from the fragment
- "location": {"start_line": <int>, "end_line": <int>} using the fragment's line numbers
- "risk_level": one of "Low", "Medium", "High", "Critical"
- "reason": why this is a problem
- "suggestions": how to fix it
- "line": the single most relevant line number in the fragment
If the fragment contains no bad practice, answer with [] exactly."""


class PromptPair:
    """The abstraction request plus a builder for the reasoning request.

    The reasoning request can only be built once the abstraction answer is
    known; building it also applies the context budget to the retrieved
    snippets and records how many were dropped or cut in ``truncations``.
    """

    def __init__(self, fragment: CodeFragment, retrieved: list[RetrievedSnippet], config: AuditConfig):
        if not config.rag_enabled and retrieved:
            raise ValueError("retrieved snippets supplied with RAG disabled")
        self.fragment = fragment
        self.retrieved = sorted(retrieved, key=lambda r: (-r.score, r.entry.vector_id))
        self.config = config
        self.truncations = 0
        self.abstraction_request = self._request(
            f"Solidity code under review ({fragment.source_path}, lines "
            f"{fragment.start_line}-{fragment.end_line}):\n\n{_fence(fragment.text)}\n\n"
            f"Step back from the individual statements first. {STEP_BACK_QUESTION} "
            "Describe the general principles, design patterns and classes of weakness this "
            "code touches (for example access control, external calls, arithmetic, time and "
            "randomness assumptions, compiler settings). Do not list line-level findings yet."
        )

    def _request(self, content: str) -> ChatRequest:
        return ChatRequest(
            system=SYSTEM_PROMPT,
            messages=(Message("user", content),),
            temperature=self.config.temperature,
            max_tokens=self.config.max_tokens,
            model_name=self.config.model_name,
        )

    def _parts(self, answer: str) -> list[str]:
        return [
            "Audit the Solidity fragment below for bad practices. Line numbers are relative "
            "to the fragment.",
            f"## Code ({self.fragment.source_path}, lines {self.fragment.start_line}-"
            f"{self.fragment.end_line})\n{numbered(self.fragment.text)}",
            f"## Principles from the step-back analysis\n{answer.strip()}",
            "Using those principles, compare the code with known best practices and common bad "
            "practices and report every concrete bad practice you can justify.",
            OUTPUT_INSTRUCTIONS,
        ]

    def reasoning_request(self, answer: str) -> ChatRequest:
        parts = self._parts(answer)
        self.truncations = 0
        if self.config.rag_enabled:
            base = len(SYSTEM_PROMPT) + len("\n\n".join(parts)) + 2
            parts.insert(4, self._examples_section(self.config.max_context_chars - base))
        return self._request("\n\n".join(parts))

    def _examples_section(self, budget: int) -> str:
        intro = (
            f"{EXAMPLES_HEADER}\nThese labeled snippets from the knowledge base are the most "
            "similar to the code under review. Use them as reference patterns, not as findings."
        )
        if not self.retrieved:
            return f"{intro}\n\n(no similar examples were retrieved)"
        room = budget - len(intro)
        kept = list(self.retrieved)
        blocks = [_snippet_block(i, s) for i, s in enumerate(kept, start=1)]

        def size(bs):
            return sum(len(b) + 2 for b in bs)

        while len(kept) > 1 and size(blocks) > room:
            kept.pop()
            blocks.pop()
            self.truncations += 1
        if size(blocks) > room:
            framing = len(_snippet_block(1, kept[0], "")) + 2
            allowed = room - framing
            if allowed > 0:
                blocks = [_snippet_block(1, kept[0], kept[0].entry.snippet[:allowed])]
                self.truncations += 1
            else:
                blocks = []
                self.truncations += 1
        if not blocks:
            return f"{intro}\n\n(all retrieved examples exceeded the context budget)"
        return intro + "".join("\n\n" + b for b in blocks)


def build_stepback_prompts(
    fragment: CodeFragment, retrieved: list[RetrievedSnippet], config: AuditConfig
) -> PromptPair:
    return PromptPair(fragment, retrieved, config)


# --- parsing model output ----------------------------------------------------

_KEY_ALIASES = {
    "id": "bad_practice_id",
    "swc_id": "bad_practice_id",
    "bad_practice": "bad_practice_id",
    "severity": "risk_level",
    "risk": "risk_level",
    "suggestion": "suggestions",
    "code_block": "bad_code_block",
    "bad_code": "bad_code_block",
    "line_number": "line",
}
_SWC_IN_TEXT = re.compile(r"swc[-_ ]?(\d+)", re.IGNORECASE)


@dataclass
class ParseOutcome:
    findings: list[AuditFinding] = field(default_factory=list)
    dropped: int = 0
    drop_reasons: list[str] = field(default_factory=list)
    failure: str | None = None


def _first_array(text: str) -> list | None:
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\[", text):
        try:
            value, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(value, list) and all(isinstance(v, dict) for v in value):
            return value
    return None


def _norm_key(key: str) -> str:
    k = re.sub(r"[\s\-]+", "_", str(key).strip().lower())
    return _KEY_ALIASES.get(k, k)


def _as_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError("boolean is not a line number")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str) and value.strip().isdigit():
        return int(value.strip())
    raise ValueError(f"not an integer: {value!r}")


def _swc_of(value: Any) -> SwcId:
    if isinstance(value, int) and not isinstance(value, bool):
        return parse_swc_id(f"SWC-{value}")
    text = str(value)
    try:
        return parse_swc_id(text)
    except ScalmError:
        m = _SWC_IN_TEXT.search(text)
        if m is None:
            raise
        return parse_swc_id(f"SWC-{m.group(1)}")


def _finding(obj: dict, fragment: CodeFragment) -> AuditFinding:
    obj = {_norm_key(k): v for k, v in obj.items()}
    missing = [f for f in FINDING_FIELDS if f not in obj]
    if missing:
        raise ValueError(f"missing fields: {', '.join(missing)}")
    for name in ("title", "type", "reason", "suggestions", "bad_code_block"):
        if not isinstance(obj[name], str):
            raise ValueError(f"{name} must be a string")
    swc = _swc_of(obj["bad_practice_id"])
    risk = str(obj["risk_level"]).strip().capitalize()
    if risk not in RISK_LEVELS:
        raise ValueError(f"unknown risk level {obj['risk_level']!r}")
    n_lines = fragment.end_line - fragment.start_line + 1
    rel = _as_int(obj["line"])
    if not 1 <= rel <= n_lines:
        raise ValueError(f"line {rel} outside fragment (1-{n_lines})")
    offset = fragment.start_line - 1
    lines = _lines(fragment.text)

    block = obj["bad_code_block"]
    if not block or block not in fragment.text:
        stripped = block.strip()
        block = stripped if stripped and stripped in fragment.text else lines[rel - 1]

    loc = obj["location"]
    span = None
    if isinstance(loc, dict):
        try:
            s, e = _as_int(loc.get("start_line")), _as_int(loc.get("end_line"))
            if 1 <= s <= e <= n_lines:
                span = (s, e)
        except ValueError:
            span = None
    if span is None:
        pos = fragment.text.find(block)
        if block and pos >= 0:
            s = fragment.text.count("\n", 0, pos) + 1
            span = (s, min(n_lines, s + block.rstrip("\n").count("\n")))
        else:
            span = (rel, rel)
    return AuditFinding(
        bad_practice_id=swc,
        title=obj["title"],
        type=obj["type"],
        bad_code_block=block,
        location=Location(fragment.source_path, span[0] + offset, span[1] + offset),
        risk_level=risk,
        reason=obj["reason"],
        suggestions=obj["suggestions"],
        line=rel + offset,
    )


def parse_findings(model_output: str, fragment: CodeFragment) -> ParseOutcome:
    """Extract findings from free-form model output; never raises.

    Line numbers in the output are fragment-relative and come back absolute.
    Only an explicit ``[]`` means "clean": output without any JSON array is
    reported as a parse failure.
    """
    outcome = ParseOutcome()
    array = _first_array(model_output or "")
    if array is None:
        outcome.failure = "no JSON array in model output"
        return outcome
    for i, obj in enumerate(array):
        try:
            outcome.findings.append(_finding(obj, fragment))
        except (ValueError, ScalmError, TypeError, IndexError) as exc:
            outcome.dropped += 1
            outcome.drop_reasons.append(f"object {i}: {exc}")
    return outcome


# --- orchestration -----------------------------------------------------------


def _process_fragment(fragment, kb, config, provider, embedder):
    diag = FragmentDiagnostics(fragment.index, fragment.kind.value, fragment.start_line, fragment.end_line)
    try:
        retrieved: list[RetrievedSnippet] = []
        if config.rag_enabled and kb is not None and len(kb):
            query = embedder.embed(fragment.text)
            for hit in kb.store.top_k(query, config.k):
                if hit.score < config.min_score:
                    continue
                entry = kb.get_entry(hit.entry_ref)
                retrieved.append(RetrievedSnippet(entry, hit.score))
                diag.hits.append(
                    RetrievalHit(hit.entry_ref, hit.score, tuple(str(s) for s in entry.swc_labels))
                )
        prompts = build_stepback_prompts(fragment, retrieved, config)
        abstraction = provider.complete(prompts.abstraction_request)
        reasoning = provider.complete(prompts.reasoning_request(abstraction.content))
        diag.truncations = prompts.truncations
    except Exception as exc:  # fault isolation: one bad fragment must not sink the audit
        log.warning("fragment %d (%s) failed: %s", fragment.index, fragment.kind.value, exc)
        diag.error = f"{type(exc).__name__}: {exc}"
        return diag, []
    outcome = parse_findings(reasoning.content, fragment)
    diag.findings = len(outcome.findings)
    diag.dropped_objects = outcome.dropped
    diag.drop_reasons = outcome.drop_reasons
    diag.parse_failure = outcome.failure
    return diag, outcome.findings


def audit(
    source: SourceUnit,
    kb: KnowledgeBase | None,
    config: AuditConfig,
    provider: ChatProvider,
) -> AuditReport:
    """Run the detection phase over one source unit.

    Lexing errors and a knowledge base built with a different embedder are
    fatal; anything that goes wrong inside a single fragment is recorded in
    that fragment's diagnostics and the fragment is skipped.
    """
    if config.rag_enabled:
        if kb is None:
            raise KbMismatch("RAG is enabled but no knowledge base was given")
        kb.check_embedder(config.embedder)
    fragments = chunk(source, config.chunk)
    embedder = get_embedder(config.embedder) if config.rag_enabled else None

    def work(fragment):
        return _process_fragment(fragment, kb, config, provider, embedder)

    if config.parallelism > 1 and len(fragments) > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            results = list(pool.map(work, fragments))
    else:
        results = [work(f) for f in fragments]

    report = AuditReport(audited_path=source.path, config=config.snapshot())
    seen_split: set[tuple[int, int]] = set()
    for fragment, (diag, findings) in zip(fragments, results):
        report.fragments.append(diag)
        for finding in findings:
            if fragment.kind is FragmentKind.SIZE_SPLIT:
                key = (finding.bad_practice_id.number, finding.line)
                if key in seen_split:
                    continue
                seen_split.add(key)
            report.findings.append(finding)
    return report
