"""Recursive-descent parser producing a :class:`SpecAst`.

Fields inside each block must appear in grammar order. Declarations may appear
in any order at top level.
"""
from __future__ import annotations

from typing import Optional

from ..errors import DuplicateSimulator, MissingSimulator, ParseError
from .ast import (
    MAX,
    PAYLOAD_UNITS,
    PLATFORM_KINDS,
    PROTOCOLS,
    TIME_UNITS_MS,
    CloudDecl,
    DeviceDecl,
    Duration,
    EdgeDeviceDecl,
    PayloadSpec,
    PlatformDecl,
    Ref,
    SimNodeDecl,
    SimulatorDecl,
    Span,
    SpecAst,
)
from .lexer import KEYWORDS, UNITS, WORD_KINDS, Token, tokenize

WORKLOAD_UNITS = ("ms", "s", "m")
DECL_KEYWORDS = ("Cloud", "Simulator", "SimulationNode", "Platform", "EdgeDevice", "Device")


def _describe(tok: Token) -> str:
    if tok.kind == "EOF":
        return "end of input"
    if tok.kind == "STRING":
        return f'string "{tok.text}"'
    return f"'{tok.text}'"


class _Parser:
    def __init__(self, source: str):
        self.toks = tokenize(source)
        self.pos = 0

    # -- token helpers -------------------------------------------------
    @property
    def tok(self) -> Token:
        return self.toks[self.pos]

    def advance(self) -> Token:
        t = self.toks[self.pos]
        if t.kind != "EOF":
            self.pos += 1
        return t

    def fail(self, expected) -> ParseError:
        expected = tuple(expected)
        tok = self.tok
        if tok.kind in WORD_KINDS:
            # a keyword glued to the next word, e.g. "CloudC1": point past the keyword
            words = [e.rstrip(":") for e in expected if e.rstrip(":") in KEYWORDS]
            hits = [w for w in words if tok.text.startswith(w) and len(tok.text) > len(w)]
            if hits:
                word = max(hits, key=len)
                return ParseError(
                    f"expected `:` after `{word}` but found '{tok.text[len(word):]}'",
                    Span(tok.line, tok.column + len(word)),
                    (":",),
                )
        shown = ", ".join(f"`{e}`" for e in expected)
        return ParseError(
            f"expected {shown} but found {_describe(tok)}", tok.span, expected
        )

    def at_kw(self, *words: str) -> bool:
        return self.tok.kind == "KW" and self.tok.text in words

    def expect_kind(self, kind: str, label: str) -> Token:
        if self.tok.kind != kind:
            raise self.fail([label])
        return self.advance()

    def expect_kw(self, word: str, colon: bool = True) -> Token:
        if not self.at_kw(word):
            raise self.fail([word + ":" if colon else word])
        t = self.advance()
        if colon:
            self.expect_kind("COLON", word + ":")
        return t

    def expect_int(self, label: str = "<integer>") -> int:
        return int(self.expect_kind("INT", label).text)

    def ident(self) -> tuple[str, Span]:
        first = self.tok
        if first.kind not in WORD_KINDS and first.kind != "INT":
            raise self.fail(["<ID>"])
        self.advance()
        parts, end = [first.text], first.end
        while (self.tok.kind in WORD_KINDS or self.tok.kind == "INT") and self.tok.offset == end:
            parts.append(self.tok.text)
            end = self.tok.end
            self.advance()
        return "".join(parts), first.span

    def string(self, expected=("<string>",)) -> str:
        if self.tok.kind == "STRING":
            return self.advance().text
        if self.tok.kind in WORD_KINDS or self.tok.kind == "INT":
            start = self.pos
            text = self.ident()[0]
            # a bare keyword or unit must be quoted to be read as text
            if text in KEYWORDS or text in UNITS:
                self.pos = start
                raise self.fail(expected)
            return text
        raise self.fail(expected)

    def ip(self) -> str:
        octets = [self.expect_kind("INT", "<IP>").text]
        for _ in range(3):
            self.expect_kind("DOT", ".")
            octets.append(self.expect_kind("INT", "<integer>").text)
        return ".".join(octets)

    def duration(self, units) -> Duration:
        start = self.tok.span
        magnitude = self.expect_int()
        if self.tok.kind != "UNIT" or self.tok.text not in units:
            raise self.fail(units)
        return Duration(magnitude, self.advance().text, start)

    def ref_list(self) -> tuple[Ref, ...]:
        self.expect_kind("LBRACE", "{")
        refs = [self.ref()]
        while self.tok.kind == "COMMA":
            self.advance()
            refs.append(self.ref())
        self.expect_kind("RBRACE", "}")
        return tuple(refs)

    def ref(self) -> Ref:
        name, span = self.ident()
        self.expect_kind("LBRACK", "[")
        count = self.expect_int()
        self.expect_kind("RBRACK", "]")
        return Ref(name, count, span)

    def header(self, keyword: str) -> tuple[str, Span]:
        self.expect_kw(keyword)
        name, span = self.ident()
        self.expect_kind("LBRACE", "{")
        return name, span

    # -- declarations --------------------------------------------------
    def cloud(self) -> CloudDecl:
        name, span = self.header("Cloud")
        self.expect_kw("IP")
        ip = self.ip()
        port = pub = sub = record = None
        if self.at_kw("port"):
            self.expect_kw("port")
            port = self.expect_int()
        elif self.at_kw("pubTopic"):
            self.expect_kw("pubTopic")
            pub = self.string()
            if self.tok.kind == "COMMA":
                self.advance()
                if not self.at_kw("subTopic"):
                    raise self.fail(["subTopic:"])
            if self.at_kw("subTopic"):
                self.expect_kw("subTopic")
                sub = self.string()
        else:
            raise self.fail(["port:", "pubTopic:"])
        if self.at_kw("Methods"):
            self.expect_kw("Methods")
            self.expect_kind("LBRACE", "{")
            self.expect_kw("Record", colon=False)
            self.expect_kind("LPAREN", "(")
            record = self.ip()
            self.expect_kind("RPAREN", ")")
            self.expect_kind("RBRACE", "}")
        if self.tok.kind != "RBRACE":
            expected = ["}", "Methods:"]
            if pub is not None and sub is None:
                expected.insert(0, "subTopic:")
            raise self.fail(expected)
        self.advance()
        return CloudDecl(name, ip, port, pub, sub, record, span)

    def simulator(self) -> SimulatorDecl:
        span = self.expect_kw("Simulator").span
        self.expect_kind("LBRACE", "{")
        self.expect_kw("duration")
        duration = self.duration(tuple(TIME_UNITS_MS))
        self.expect_kw("step")
        step = self.duration(tuple(TIME_UNITS_MS))
        self.expect_kw("simulationNodes")
        refs = self.ref_list()
        self.expect_kind("RBRACE", "}")
        return SimulatorDecl(duration, step, refs, span)

    def sim_node(self) -> SimNodeDecl:
        name, span = self.header("SimulationNode")
        self.expect_kw("platform")
        pname, pspan = self.ident()
        self.expect_kw("offsetRange")
        pct = self.expect_int()
        self.expect_kind("PERCENT", "%")
        self.expect_kw("EdgeDevices")
        refs = self.ref_list()
        self.expect_kind("RBRACE", "}")
        return SimNodeDecl(name, Ref(pname, None, pspan), pct, refs, span)

    def platform(self) -> PlatformDecl:
        name, span = self.header("Platform")
        self.expect_kw("type")
        if not self.at_kw(*PLATFORM_KINDS):
            raise self.fail(PLATFORM_KINDS)
        kind = self.advance().text
        ip = user = cpu = memory = None
        if self.at_kw("IP"):
            self.expect_kw("IP")
            ip = self.ip()
        if self.at_kw("userName", "username"):
            self.expect_kw(self.tok.text)
            user = self.string()
        if self.at_kw("CPU"):
            self.expect_kw("CPU")
            cpu = self.expect_int()
        if self.at_kw("memory"):
            self.expect_kw("memory")
            memory = self.expect_int()
            if self.tok.kind != "UNIT" or self.tok.text != "G":
                raise self.fail(["G"])
            self.advance()
        if self.tok.kind != "RBRACE":
            raise self.fail(["}"])
        self.advance()
        return PlatformDecl(name, kind, ip, user, cpu, memory, span)

    def edge_device(self) -> EdgeDeviceDecl:
        name, span = self.header("EdgeDevice")
        self.expect_kw("protocol")
        if not self.at_kw(*PROTOCOLS):
            raise self.fail(PROTOCOLS)
        protocol = self.advance().text
        self.expect_kw("speed")
        if self.at_kw(MAX):
            self.advance()
            speed = MAX
        elif self.tok.kind == "INT":
            speed = self.expect_int()
        else:
            raise self.fail(["<integer>", MAX])
        self.expect_kw("cloud")
        cname, cspan = self.ident()
        self.expect_kw("devices")
        refs = self.ref_list()
        workload = None
        if self.at_kw("workload"):
            self.expect_kw("workload")
            workload = self.duration(WORKLOAD_UNITS)
        if self.tok.kind != "RBRACE":
            raise self.fail(["workload:", "}"])
        self.advance()
        return EdgeDeviceDecl(name, protocol, speed, Ref(cname, None, cspan), refs, workload, span)

    def device(self) -> DeviceDecl:
        name, span = self.header("Device")
        self.expect_kw("period")
        period = self.expect_int()
        self.expect_kw("payload")
        pspan = self.tok.span
        if self.tok.kind == "INT":
            size = self.expect_int()
            if self.tok.kind != "UNIT" or self.tok.text not in PAYLOAD_UNITS:
                raise self.fail(tuple(PAYLOAD_UNITS))
            payload = PayloadSpec(size=size, unit=self.advance().text, span=pspan)
        else:
            payload = PayloadSpec(literal=self.string(("<integer>", "<string>")), span=pspan)
        self.expect_kind("RBRACE", "}")
        return DeviceDecl(name, period, payload, span)

    def spec(self) -> SpecAst:
        groups = {k: [] for k in DECL_KEYWORDS}
        simulator: Optional[SimulatorDecl] = None
        handlers = {
            "Cloud": self.cloud,
            "SimulationNode": self.sim_node,
            "Platform": self.platform,
            "EdgeDevice": self.edge_device,
            "Device": self.device,
        }
        while self.tok.kind != "EOF":
            if not self.at_kw(*DECL_KEYWORDS):
                raise self.fail(DECL_KEYWORDS)
            word = self.tok.text
            if word == "Simulator":
                at = self.tok.span
                decl = self.simulator()
                if simulator is not None:
                    raise DuplicateSimulator("more than one Simulator block", at, ())
                simulator = decl
            else:
                groups[word].append(handlers[word]())
        if simulator is None:
            raise MissingSimulator("specification has no Simulator block", self.tok.span, ("Simulator:",))
        return SpecAst(
            clouds=tuple(groups["Cloud"]),
            simulator=simulator,
            sim_nodes=tuple(groups["SimulationNode"]),
            platforms=tuple(groups["Platform"]),
            edge_devices=tuple(groups["EdgeDevice"]),
            devices=tuple(groups["Device"]),
        )


def parse(source: str) -> SpecAst:
    """Parse DSL text; raises :class:`ParseError` or :class:`LexError`."""
    return _Parser(source).spec()
