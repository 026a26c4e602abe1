"""``scalm`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 fatal pipeline error.  With
``--json`` stdout carries exactly one JSON document; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from ._util import write_atomic
from .audit import AuditConfig, AuditReport, audit
from .chunker import ChunkConfig, SourceUnit, chunk
from .embedding import EmbeddingProviderConfig, get_embedder
from .errors import ScalmError
from .evaluation import load_dataset, load_predictions, run_eval
from .knowledge_base import CorpusManifest, KnowledgeBase, ingest_corpus
from .llm import FixtureProvider, RecordingProvider, RemoteChatConfig, RemoteChatProvider, load_fixtures
from .swc import all_categories, parse_swc_id

log = logging.getLogger("scalm")

DEFAULT_SWC = "SWC-101,SWC-104,SWC-107,SWC-112,SWC-116"

# built-in defaults; the config file overrides these and flags override both
DEFAULTS = {
    "k": 5,
    "min_score": 0.0,
    "max_context_chars": 12_000,
    "max_fragment_chars": 4000,
    "overlap_lines": 2,
    "provider": "remote",
    "model": "gpt-4o",
    "endpoint_url": "https://api.openai.com/v1/chat/completions",
    "api_key_env": "OPENAI_API_KEY",
    "requests_per_minute": None,
    "timeout_ms": 120_000,
    "embedder": None,
    "embed_dim": None,
    "embed_url": None,
    "embed_model": None,
    "embed_api_key_env": None,
    "parallelism": min(8, os.cpu_count() or 1),
    "swc": DEFAULT_SWC,
    "tool_name": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    p.add_argument("--config", help="JSON file with defaults keyed by flag name")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--parallelism", type=int, help="max concurrent fragments/contracts")
    return p


def _embedder_opts(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("embedder")
    g.add_argument("--embedder", choices=["local", "remote"])
    g.add_argument("--embed-dim", type=int)
    g.add_argument("--embed-url")
    g.add_argument("--embed-model")
    g.add_argument("--embed-api-key-env")


def _audit_opts(p: argparse.ArgumentParser, provider_choice: bool = True) -> None:
    p.add_argument("--kb", help="knowledge-base directory")
    p.add_argument("--no-rag", action="store_true", help="disable retrieval (ablation)")
    p.add_argument("-k", type=int, help="snippets retrieved per fragment")
    p.add_argument("--min-score", type=float)
    p.add_argument("--max-context-chars", type=int)
    p.add_argument("--max-fragment-chars", type=int)
    p.add_argument("--overlap-lines", type=int)
    if provider_choice:
        p.add_argument("--provider", choices=["fixture", "remote"])
    p.add_argument("--fixtures", help="fixture JSONL for the fixture provider")
    p.add_argument("--model")
    p.add_argument("--endpoint-url")
    p.add_argument("--api-key-env", help="name of the env var holding the API key")
    p.add_argument("--requests-per-minute", type=int)
    p.add_argument("--timeout-ms", type=int)
    _embedder_opts(p)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="scalm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"scalm {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    swc = sub.add_parser("swc", help="SWC registry").add_subparsers(dest="action", parser_class=_Parser)
    swc.add_parser("list", parents=[common], help="list the 35 categories")

    p = sub.add_parser("chunk", parents=[common], help="split a Solidity file into fragments")
    p.add_argument("file")
    p.add_argument("--max-fragment-chars", type=int)
    p.add_argument("--overlap-lines", type=int)
    p.add_argument("--no-preamble", action="store_true")

    p = sub.add_parser("embed", parents=[common], help="embed a text")
    p.add_argument("--text", required=True)
    p.add_argument("--provider", dest="embedder", choices=["local", "remote"])
    p.add_argument("--dim", dest="embed_dim", type=int)
    p.add_argument("--embed-url")
    p.add_argument("--embed-model")
    p.add_argument("--embed-api-key-env")

    kb = sub.add_parser("kb", help="knowledge base").add_subparsers(dest="action", parser_class=_Parser)
    p = kb.add_parser("build", parents=[common], help="ingest a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _embedder_opts(p)
    p = kb.add_parser("stats", parents=[common], help="build stats and label histogram")
    p.add_argument("kb_dir")
    p = kb.add_parser("query", parents=[common], help="retrieve similar snippets")
    p.add_argument("--kb", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("-k", type=int)
    _embedder_opts(p)

    p = sub.add_parser("audit", parents=[common], help="audit a file or directory")
    p.add_argument("target")
    p.add_argument("--out")
    _audit_opts(p)

    p = sub.add_parser("eval", parents=[common], help="per-SWC Acc/Recall/F1")
    p.add_argument("--dataset")
    p.add_argument("--swc", help="comma-separated SWC ids")
    p.add_argument("--predictions", help="external tool predictions JSONL")
    p.add_argument("--tool-name")
    p.add_argument("--out")
    _audit_opts(p)

    fx = sub.add_parser("fixtures", help="record or list provider fixtures").add_subparsers(
        dest="action", parser_class=_Parser
    )
    p = fx.add_parser("record", parents=[common], help="audit through the remote provider, recording replies")
    p.add_argument("target")
    p.add_argument("--out")
    _audit_opts(p, provider_choice=False)
    p = fx.add_parser("ls", parents=[common], help="list recorded fixtures")
    p.add_argument("fixture_file")
    return parser


def _apply_config(args: argparse.Namespace) -> None:
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}", None) from exc
        if not isinstance(file_values, dict):
            raise UsageError("config file must hold a JSON object", None)
    for key, value in file_values.items():
        key = key.replace("-", "_")
        if hasattr(args, key) and (getattr(args, key) is None or getattr(args, key) is False):
            setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)


def _emit(args, payload, human: str | None = None) -> None:
    if args.json or human is None:
        sys.stdout.write(json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
    else:
        sys.stdout.write(human)


def _embedder_config(args, kb_embedder: EmbeddingProviderConfig | None = None) -> EmbeddingProviderConfig:
    kind = args.embedder or (kb_embedder.provider_id if kb_embedder else "local")
    dim = args.embed_dim or (kb_embedder.dim if kb_embedder else 256)
    if kind == "remote":
        if not args.embed_url:
            raise UsageError("the remote embedder needs --embed-url", None)
        return EmbeddingProviderConfig(
            provider_id="remote",
            dim=dim,
            endpoint_url=args.embed_url,
            model_name=args.embed_model or (kb_embedder.model_name if kb_embedder else None),
            api_key_env=args.embed_api_key_env,
        )
    return EmbeddingProviderConfig(provider_id=kind, dim=dim)


# --- commands ------------------------------------------------------------------


def cmd_swc_list(args) -> int:
    cats = all_categories()
    human = "".join(f"{c.id}\t{c.title}\n" for c in cats)
    _emit(args, [c.to_dict() for c in cats], human)
    return 0


def cmd_chunk(args) -> int:
    source = SourceUnit.from_file(args.file, display_path=args.file)
    cfg = ChunkConfig(args.max_fragment_chars, args.overlap_lines, not args.no_preamble)
    frags = chunk(source, cfg)
    human = "".join(f"{f.index}\t{f.kind.value}\t{f.start_line}-{f.end_line}\n" for f in frags)
    _emit(args, [f.to_dict() for f in frags], human)
    return 0


def cmd_embed(args) -> int:
    vec = get_embedder(_embedder_config(args)).embed(args.text)
    _emit(args, {"provider_id": vec.provider_id, "dim": vec.dim, "values": list(vec.values)})
    return 0


def cmd_kb_build(args) -> int:
    manifest = CorpusManifest.load(args.manifest)
    kb = ingest_corpus(manifest, _embedder_config(args))
    kb.save(args.out)
    stats = kb.stats.to_dict()
    human = (
        f"ingested {kb.stats.ingested}, duplicates {kb.stats.skipped_duplicate}, "
        f"unlabeled {kb.stats.skipped_unlabeled}, failed {kb.stats.failed} -> {args.out}\n"
    )
    _emit(args, stats, human)
    return 0


def cmd_kb_stats(args) -> int:
    kb = KnowledgeBase.load(args.kb_dir)
    _emit(
        args,
        {
            "entries": len(kb),
            "embedder": kb.embedder.header(),
            "stats": kb.stats.to_dict(),
            "label_histogram": kb.label_histogram(),
        },
    )
    return 0


def cmd_kb_query(args) -> int:
    kb = KnowledgeBase.load(args.kb)
    emb = _embedder_config(args, kb.embedder)
    kb.check_embedder(emb)
    query = get_embedder(emb).embed(args.text)
    hits = []
    for hit in kb.store.top_k(query, args.k):
        entry = kb.get_entry(hit.entry_ref)
        hits.append(
            {
                "id": hit.id,
                "score": hit.score,
                "entry_ref": hit.entry_ref,
                "swc_labels": [str(s) for s in entry.swc_labels],
                "project": entry.project,
                "source_path": entry.source_path,
            }
        )
    _emit(args, hits)
    return 0


def _load_kb_for_audit(args) -> tuple[KnowledgeBase | None, EmbeddingProviderConfig]:
    if args.no_rag:
        kb = KnowledgeBase.load(args.kb) if args.kb else None
    else:
        if not args.kb:
            raise UsageError("--kb is required unless --no-rag is given", None)
        kb = KnowledgeBase.load(args.kb)
    return kb, _embedder_config(args, kb.embedder if kb else None)


def _audit_config(args, embedder: EmbeddingProviderConfig) -> AuditConfig:
    return AuditConfig(
        k=args.k,
        rag_enabled=not args.no_rag,
        min_score=args.min_score,
        chunk=ChunkConfig(args.max_fragment_chars, args.overlap_lines),
        model_name=args.model,
        max_context_chars=args.max_context_chars,
        embedder=embedder,
        parallelism=args.parallelism,
    )


def _remote_provider(args) -> RemoteChatProvider:
    return RemoteChatProvider(
        RemoteChatConfig(
            endpoint_url=args.endpoint_url,
            api_key_env=args.api_key_env,
            timeout_ms=args.timeout_ms,
            requests_per_minute=args.requests_per_minute,
        )
    )


def _provider(args):
    if args.provider == "fixture":
        if not args.fixtures:
            raise UsageError("--provider fixture needs --fixtures FILE", None)
        return FixtureProvider(args.fixtures)
    return _remote_provider(args)


def _sources(target: str) -> list[Path]:
    path = Path(target)
    if path.is_dir():
        return sorted(p for p in path.rglob("*.sol") if p.is_file())
    if not path.is_file():
        raise FileNotFoundError(f"no such file or directory: {target}")
    return [path]


def _run_audit(args, provider) -> int:
    files = _sources(args.target)
    kb, emb = _load_kb_for_audit(args)
    config = _audit_config(args, emb)
    reports = [audit(SourceUnit.from_file(f, display_path=f.as_posix()), kb, config, provider) for f in files]
    if Path(args.target).is_dir():
        payload = {"schema_version": 1, "reports": [r.to_dict() for r in reports]}
    else:
        payload = reports[0].to_dict()
    text = json.dumps(payload, indent=2, ensure_ascii=False) + "\n"
    if args.out:
        write_atomic(args.out, text)
    if args.json:
        sys.stdout.write(text)
    else:
        sys.stdout.write(_summarize(reports))
    return 0


def _summarize(reports: list[AuditReport]) -> str:
    out = []
    for r in reports:
        out.append(f"{r.audited_path}: {len(r.findings)} finding(s), {len(r.fragments)} fragment(s)\n")
        for f in r.findings:
            out.append(f"  line {f.line}: [{f.bad_practice_id}] {f.risk_level} {f.title}\n")
        for d in r.fragments:
            if d.error:
                out.append(f"  fragment {d.index} failed: {d.error}\n")
            elif d.parse_failure:
                out.append(f"  fragment {d.index}: {d.parse_failure}\n")
    return "".join(out)


def cmd_audit(args) -> int:
    _sources(args.target)
    return _run_audit(args, _provider(args))


def cmd_fixtures_record(args) -> int:
    if not args.fixtures:
        raise UsageError("--fixtures FILE is required", None)
    _sources(args.target)
    return _run_audit(args, RecordingProvider(_remote_provider(args), args.fixtures))


def cmd_fixtures_ls(args) -> int:
    fixtures = load_fixtures(args.fixture_file)
    if not Path(args.fixture_file).exists():
        raise FileNotFoundError(args.fixture_file)
    rows = [{"digest": d, "chars": len(c)} for d, c in fixtures.items()]
    human = "".join(
        f"{d}  {len(c):>6}  {(c.strip().splitlines() or [''])[0][:60]}\n" for d, c in fixtures.items()
    )
    _emit(args, rows, human)
    return 0


def cmd_eval(args) -> int:
    if not args.dataset:
        raise UsageError("--dataset is required", None)
    swc_list = [parse_swc_id(s) for s in args.swc.split(",") if s.strip()]
    dataset = load_dataset(args.dataset)
    base = Path(args.dataset).parent
    if args.predictions:
        result = run_eval(
            dataset, swc_list, tool_name=args.tool_name or Path(args.predictions).stem,
            predictions=load_predictions(args.predictions),
        )
    elif not swc_list:
        result = run_eval(dataset, swc_list, tool_name=args.tool_name or "scalm", predictions={})
    else:
        kb, emb = _load_kb_for_audit(args)
        config = _audit_config(args, emb)
        provider = _provider(args)

        def auditor(contract):
            source = SourceUnit.from_file(base / contract.path, display_path=contract.path)
            return audit(source, kb, config, provider)

        tool = args.tool_name or ("scalm-no-rag" if args.no_rag else "scalm")
        result = run_eval(dataset, swc_list, tool_name=tool, auditor=auditor, parallelism=args.parallelism)
    payload = {**result.to_dict(), "table": result.render()}
    if args.out:
        write_atomic(args.out, json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
    _emit(args, payload, result.render())
    return 0


COMMANDS = {
    ("swc", "list"): cmd_swc_list,
    ("chunk", None): cmd_chunk,
    ("embed", None): cmd_embed,
    ("kb", "build"): cmd_kb_build,
    ("kb", "stats"): cmd_kb_stats,
    ("kb", "query"): cmd_kb_query,
    ("audit", None): cmd_audit,
    ("eval", None): cmd_eval,
    ("fixtures", "record"): cmd_fixtures_record,
    ("fixtures", "ls"): cmd_fixtures_ls,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        key = (args.command, getattr(args, "action", None))
        if key not in COMMANDS:
            raise UsageError("missing or incomplete subcommand", parser)
        _apply_config(args)
    except UsageError as exc:
        message, which = exc.args
        sys.stderr.write(f"scalm: error: {message}\n")
        (which or parser).print_help(sys.stderr)
        return 1
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[key](args)
    except UsageError as exc:
        sys.stderr.write(f"scalm: error: {exc.args[0]}\n")
        parser.print_usage(sys.stderr)
        return 1
    except (ScalmError, OSError, UnicodeDecodeError, ValueError) as exc:
        sys.stderr.write(f"scalm: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
