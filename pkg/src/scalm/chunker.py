"""Comment/string-aware Solidity lexer and structural, size-bounded chunker.

The chunker does not parse Solidity.  It tracks brace nesting over a token
stream in which comments and string literals are opaque, which is enough to
find contract bodies and function bodies in any language version.
"""

from __future__ import annotations

import bisect
import enum
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import LexError, UnbalancedBraces


class TokenKind(str, enum.Enum):
    KEYWORD = "keyword"
    IDENTIFIER = "identifier"
    NUMBER = "number"
    VERSION = "version-literal"
    STRING = "string"
    COMMENT = "comment"
    LBRACE = "lbrace"
    RBRACE = "rbrace"
    LPAREN = "lparen"
    RPAREN = "rparen"
    LBRACKET = "lbracket"
    RBRACKET = "rbracket"
    SEMICOLON = "semicolon"
    COMMA = "comma"
    OPERATOR = "operator"


KEYWORDS = frozenset(
    """
    abstract address anonymous as assembly bool break byte bytes calldata catch
    constant constructor continue contract default delete do else emit enum
    error event external fallback false for function if immutable import
    indexed interface internal is library mapping memory modifier new override
    payable pragma private public pure receive return returns revert storage
    string struct true try type unchecked using var view virtual while
    """.split()
)

_CONTAINER_KEYWORDS = {"contract", "library", "interface"}
_CALLABLE_KEYWORDS = {"function", "modifier", "constructor", "fallback", "receive"}

_PUNCT = {
    "{": TokenKind.LBRACE,
    "}": TokenKind.RBRACE,
    "(": TokenKind.LPAREN,
    ")": TokenKind.RPAREN,
    "[": TokenKind.LBRACKET,
    "]": TokenKind.RBRACKET,
    ";": TokenKind.SEMICOLON,
    ",": TokenKind.COMMA,
}

_WS = re.compile(r"\s+")
_IDENT = re.compile(r"[A-Za-z_$][A-Za-z0-9_$]*")
_NUMBER = re.compile(
    r"0[xX][0-9a-fA-F_]*|(?:\d[\d_]*(?:\.\d[\d_]*)?|\.\d[\d_]*)(?:[eE][-+]?\d[\d_]*)?"
)
_OPERATOR = re.compile(
    r">>>=|<<=|>>=|>>>|\*\*|&&|\|\||==|!=|<=|>=|<<|>>|\+\+|--|\+=|-=|\*=|/=|%=|&=|\|=|\^=|=>|->|:=|[-+*/%<>=!&|^~?:.@#]"
)


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str
    start: int
    end: int
    line: int
    end_line: int


class SourceUnit:
    """A source file plus the offsets (into ``text``) at which each line starts."""

    def __init__(self, text: str, path: str = "<memory>"):
        self.path = path
        self.text = text
        starts = [0]
        for m in re.finditer("\n", text):
            if m.end() < len(text):
                starts.append(m.end())
        self.line_index = starts

    @classmethod
    def from_file(cls, path: str | Path, display_path: str | None = None) -> SourceUnit:
        raw = Path(path).read_bytes()
        return cls(raw.decode("utf-8"), display_path if display_path is not None else str(path))

    @property
    def total_lines(self) -> int:
        return len(self.line_index) if self.text else 0

    def line_of(self, offset: int) -> int:
        return bisect.bisect_right(self.line_index, offset)

    def slice_lines(self, start_line: int, end_line: int) -> str:
        begin = self.line_index[start_line - 1]
        stop = self.line_index[end_line] if end_line < len(self.line_index) else len(self.text)
        return self.text[begin:stop]


class FragmentKind(str, enum.Enum):
    FILE_PREAMBLE = "FilePreamble"
    CONTRACT_HEADER = "ContractHeader"
    FUNCTION = "Function"
    MODIFIER = "Modifier"
    CONTRACT_REMAINDER = "ContractRemainder"
    SIZE_SPLIT = "SizeSplit"


@dataclass(frozen=True)
class CodeFragment:
    source_path: str
    kind: FragmentKind
    text: str
    start_line: int
    end_line: int
    index: int

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "start_line": self.start_line,
            "end_line": self.end_line,
            "index": self.index,
            "text": self.text,
        }


@dataclass(frozen=True)
class ChunkConfig:
    max_fragment_chars: int = 4000
    overlap_lines: int = 2
    include_preamble: bool = True

    def __post_init__(self):
        if self.max_fragment_chars < 200:
            raise ValueError("max_fragment_chars must be >= 200")
        if self.overlap_lines < 0:
            raise ValueError("overlap_lines must be >= 0")


def tokenize(source: SourceUnit) -> list[Token]:
    text = source.text
    n = len(text)
    pos = 0
    tokens: list[Token] = []

    def emit(kind: TokenKind, start: int, end: int) -> None:
        tokens.append(
            Token(kind, text[start:end], start, end, source.line_of(start), source.line_of(end - 1))
        )

    while pos < n:
        m = _WS.match(text, pos)
        if m:
            pos = m.end()
            continue
        ch = text[pos]
        if text.startswith("//", pos):
            end = text.find("\n", pos)
            end = n if end < 0 else end
            emit(TokenKind.COMMENT, pos, end)
            pos = end
        elif text.startswith("/*", pos):
            end = text.find("*/", pos + 2)
            if end < 0:
                raise LexError("unterminated block comment", source.line_of(pos))
            emit(TokenKind.COMMENT, pos, end + 2)
            pos = end + 2
        elif ch in "\"'":
            end = _scan_string(text, pos)
            if end < 0:
                raise LexError("unterminated string literal", source.line_of(pos))
            emit(TokenKind.STRING, pos, end)
            pos = end
        elif ch in _PUNCT:
            emit(_PUNCT[ch], pos, pos + 1)
            pos += 1
        elif _pragma_value_follows(tokens):
            end = text.find(";", pos)
            end = n if end < 0 else end
            stop = end
            while stop > pos and text[stop - 1].isspace():
                stop -= 1
            emit(TokenKind.VERSION, pos, stop)
            pos = end
        elif (m := _IDENT.match(text, pos)) is not None:
            kind = TokenKind.KEYWORD if m.group() in KEYWORDS else TokenKind.IDENTIFIER
            emit(kind, pos, m.end())
            pos = m.end()
        elif (m := _NUMBER.match(text, pos)) is not None and m.end() > pos:
            emit(TokenKind.NUMBER, pos, m.end())
            pos = m.end()
        elif (m := _OPERATOR.match(text, pos)) is not None:
            emit(TokenKind.OPERATOR, pos, m.end())
            pos = m.end()
        else:
            # stray characters (e.g. bidi controls) are kept as one-char operators
            emit(TokenKind.OPERATOR, pos, pos + 1)
            pos += 1
    return tokens


def _scan_string(text: str, pos: int) -> int:
    quote = text[pos]
    i = pos + 1
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\\":
            i += 2
            continue
        if c == quote:
            return i + 1
        if c == "\n":
            return -1
        i += 1
    return -1


def _pragma_value_follows(tokens: list[Token]) -> bool:
    code = [t for t in tokens[-3:] if t.kind is not TokenKind.COMMENT]
    return (
        len(code) >= 2
        and code[-2].kind is TokenKind.KEYWORD
        and code[-2].text == "pragma"
        and code[-1].kind is TokenKind.IDENTIFIER
    )


# --- structure -------------------------------------------------------------


@dataclass
class _Member:
    kind: str  # "container" | "callable" | "decl"
    first: int  # index into the code-token list
    last: int
    body_open: int | None = None
    keyword: str = ""
    members: list[_Member] = field(default_factory=list)


def _match_braces(code: list[Token]) -> dict[int, int]:
    stack: list[int] = []
    match: dict[int, int] = {}
    for i, tok in enumerate(code):
        if tok.kind is TokenKind.LBRACE:
            stack.append(i)
        elif tok.kind is TokenKind.RBRACE:
            if not stack:
                raise UnbalancedBraces("unmatched '}'", tok.line)
            match[stack.pop()] = i
    if stack:
        raise UnbalancedBraces("unmatched '{'", code[stack[-1]].line)
    return match


def _scan_members(code: list[Token], lo: int, hi: int, braces: dict[int, int]) -> list[_Member]:
    members: list[_Member] = []
    i = lo
    while i < hi:
        first = i
        head = code[i]
        paren = 0
        body_open = None
        while i < hi:
            tok = code[i]
            if tok.kind is TokenKind.LPAREN:
                paren += 1
            elif tok.kind is TokenKind.RPAREN:
                paren -= 1
            elif tok.kind is TokenKind.LBRACE:
                close = braces[i]
                if paren <= 0:
                    body_open = i
                    i = close
                    break
                i = close
            elif tok.kind is TokenKind.SEMICOLON and paren <= 0:
                break
            i += 1
        last = min(i, hi - 1)
        members.append(_classify(code, first, last, body_open, head))
        i = last + 1
    return members


def _classify(code, first, last, body_open, head) -> _Member:
    word = head.text if head.kind is TokenKind.KEYWORD else ""
    nxt = code[first + 1] if first + 1 <= last else None
    if word == "abstract" and nxt is not None and nxt.text in _CONTAINER_KEYWORDS:
        word = nxt.text
    if word in _CONTAINER_KEYWORDS and body_open is not None:
        return _Member("container", first, last, body_open, word)
    if word in _CALLABLE_KEYWORDS and body_open is not None:
        if word in ("fallback", "receive") and (nxt is None or nxt.kind is not TokenKind.LPAREN):
            return _Member("decl", first, last)
        return _Member("callable", first, last, body_open, word)
    return _Member("decl", first, last)


def _group_decls(members: list[_Member]) -> list[list[_Member]]:
    groups: list[list[_Member]] = []
    current: list[_Member] = []
    for m in members:
        if m.kind == "decl":
            current.append(m)
        elif current:
            groups.append(current)
            current = []
    if current:
        groups.append(current)
    return groups


def chunk(source: SourceUnit, config: ChunkConfig | None = None) -> list[CodeFragment]:
    """Split ``source`` into ordered fragments.

    Produces a FilePreamble for leading pragma/import lines, one ContractHeader
    per contract/library/interface, one Function or Modifier fragment per
    callable with a body, and ContractRemainder fragments for declarations that
    follow the first callable.  Fragments longer than ``max_fragment_chars`` are
    re-split on line boundaries into overlapping SizeSplit pieces.
    """
    config = config or ChunkConfig()
    tokens = tokenize(source)
    code = [t for t in tokens if t.kind is not TokenKind.COMMENT]
    if not code:
        return []
    braces = _match_braces(code)
    top = _scan_members(code, 0, len(code), braces)

    spans: list[tuple[FragmentKind, int, int]] = []
    structural = [m for m in top if m.kind != "decl"]
    first_structural_line = code[structural[0].first].line if structural else None

    for group in _group_decls(top):
        start = code[group[0].first].line
        end = code[group[-1].last].line
        if first_structural_line is None or start < first_structural_line:
            # leading preamble runs from the top of the file
            end = first_structural_line - 1 if first_structural_line else source.total_lines
            start = 1
        if config.include_preamble and end >= start:
            spans.append((FragmentKind.FILE_PREAMBLE, start, end))

    for m in structural:
        if m.kind == "callable":
            spans.append((_callable_kind(m), code[m.first].line, code[m.last].line))
            continue
        decl_line = code[m.first].line
        inner = _scan_members(code, m.body_open + 1, m.last, braces)
        callables = [c for c in inner if c.kind == "callable"]
        if callables:
            header_end = max(decl_line, code[callables[0].first].line - 1)
        else:
            header_end = code[m.last].line
        spans.append((FragmentKind.CONTRACT_HEADER, decl_line, header_end))
        if not callables:
            continue
        after_first = inner[inner.index(callables[0]):]
        for c in after_first:
            if c.kind == "callable":
                spans.append((_callable_kind(c), code[c.first].line, code[c.last].line))
        for group in _group_decls(after_first):
            spans.append(
                (FragmentKind.CONTRACT_REMAINDER, code[group[0].first].line, code[group[-1].last].line)
            )

    spans.sort(key=lambda s: s[1])
    unsafe = _unsafe_cuts(tokens)
    pieces: list[tuple[FragmentKind, int, int]] = []
    for kind, start, end in spans:
        if len(source.slice_lines(start, end)) > config.max_fragment_chars:
            pieces.extend(
                (FragmentKind.SIZE_SPLIT, s, e)
                for s, e in _size_split(source, start, end, config, unsafe)
            )
        else:
            pieces.append((kind, start, end))
    pieces.sort(key=lambda s: s[1])
    return [
        CodeFragment(source.path, kind, source.slice_lines(s, e), s, e, idx)
        for idx, (kind, s, e) in enumerate(pieces)
    ]


def _callable_kind(m: _Member) -> FragmentKind:
    return FragmentKind.MODIFIER if m.keyword == "modifier" else FragmentKind.FUNCTION


def _unsafe_cuts(tokens: list[Token]) -> set[int]:
    """Lines after which a cut would land inside a multi-line comment or string."""
    unsafe: set[int] = set()
    for t in tokens:
        if t.end_line > t.line:
            unsafe.update(range(t.line, t.end_line))
    return unsafe


def _size_split(
    source: SourceUnit, start: int, end: int, config: ChunkConfig, unsafe: set[int]
) -> list[tuple[int, int]]:
    budget = config.max_fragment_chars
    lengths = {ln: len(source.slice_lines(ln, ln)) for ln in range(start, end + 1)}
    out: list[tuple[int, int]] = []
    s = start
    while True:
        size = 0
        e = s
        while e <= end and size + lengths[e] <= budget:
            size += lengths[e]
            e += 1
        e = max(s, e - 1)
        if e >= end:
            out.append((s, end))
            return out
        cut = e
        while cut >= s and cut in unsafe:
            cut -= 1
        if cut < s:
            cut = e
            while cut < end and cut in unsafe:
                cut += 1
        out.append((s, cut))
        if cut >= end:
            return out
        nxt = max(cut - config.overlap_lines + 1, s + 1)
        # never start inside a multi-line token: back up to its first line, or skip past it
        back = nxt
        while back - 1 in unsafe and back - 1 >= start:
            back -= 1
        if back > s:
            nxt = back
        else:
            while nxt - 1 in unsafe and nxt <= cut:
                nxt += 1
        s = nxt


def locate(fragment: CodeFragment) -> tuple[int, int]:
    return fragment.start_line, fragment.end_line
