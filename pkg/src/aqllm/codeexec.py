"""Gate between LLM-written call strings and real effects.

A Code-Execution LLM answers with one call such as
``fetch_history(lat=34.0725, lng=-118.5445, hours=720)``. Nothing runs unless
two independent checks agree:

* ``safety_check``: a rule checker (denylist plus a whole-string shape
  pattern) or an LLM reviewer;
* ``format_check``: a tokenizer/parser that resolves the call against the
  registry and validates every argument.

``approve`` combines both results into an ``ApprovedCall``, the only type
``dispatch`` accepts. Dispatch is a table lookup; strings are never executed.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import (
    ArgumentError,
    CallSyntaxError,
    ConfigurationError,
    ContractViolation,
    MissingParameterError,
    SelectionError,
    UnknownFunctionError,
    UnsafeCallError,
)
from .gateway import Gateway, system, user
from .prompts import instructor_system_prompt, render, template

log = logging.getLogger(__name__)

MAX_CALL_LENGTH = 512

# Words that never appear in an approved call, not even inside string values.
DENYLIST_WORDS = (
    "import", "exec", "eval", "compile", "open", "os", "sys", "subprocess", "system", "popen",
    "shell", "socket", "requests", "urllib", "http", "https", "ftp", "file", "globals", "locals",
    "getattr", "setattr", "delattr", "builtins", "lambda", "del", "rm", "curl", "wget",
)
DENYLIST_SYMBOLS = (";", "/", "\\", "`", "$", "|", "&", ">", "<", "~", "{", "}", "[", "]", "@", "#", "!", "\n", "\r")

_DENY_WORD_RE = re.compile(r"(?i)(?<![A-Za-z0-9])(" + "|".join(DENYLIST_WORDS) + r")(?![A-Za-z0-9])")
_UNDERSCORE_IDENT_RE = re.compile(r"(?<![A-Za-z0-9_])(_\w*)")
_SHAPE_NUMBER = r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?"
_SHAPE_STRING = r"\"[A-Za-z0-9 _.:,-]*\"|'[A-Za-z0-9 _.:,-]*'"
_SHAPE_VALUE = rf"(?:{_SHAPE_NUMBER}|{_SHAPE_STRING}|True|False)"
_SHAPE_KWARG = rf"[A-Za-z][A-Za-z0-9_]*\s*=\s*{_SHAPE_VALUE}"
_SHAPE_RE = re.compile(rf"\s*[A-Za-z][A-Za-z0-9_]*\s*\(\s*(?:{_SHAPE_KWARG}(?:\s*,\s*{_SHAPE_KWARG})*)?\s*\)\s*")


class Verdict(str, enum.Enum):
    PASS = "pass"
    REJECT = "reject"


class CheckerKind(str, enum.Enum):
    RULE = "rule"
    LLM = "llm"


@dataclass(frozen=True)
class CallString:
    raw: str

    @classmethod
    def from_reply(cls, reply: str) -> "CallString":
        """Strip surrounding whitespace and a single Markdown code fence."""
        text = reply.strip()
        m = re.fullmatch(r"```[A-Za-z]*\n?(.*?)\n?```", text, flags=re.S)
        if m:
            text = m.group(1).strip()
        return cls(text)


@dataclass(frozen=True)
class SafetyVerdict:
    verdict: Verdict
    rationale: str
    checker: CheckerKind
    call: str = ""

    def __post_init__(self):
        if self.verdict is Verdict.REJECT and not self.rationale:
            raise ValueError("a rejection needs a rationale")

    @property
    def passed(self) -> bool:
        return self.verdict is Verdict.PASS


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str  # float | int | str | bool
    required: bool = True
    min: float | None = None
    max: float | None = None
    semantic: str = ""

    def __post_init__(self):
        if self.type not in _VALIDATORS:
            raise ConfigurationError(f"parameter {self.name}: unsupported type {self.type!r}")

    def validate(self, value: Any, position: int | None = None) -> Any:
        value = _VALIDATORS[self.type](self, value, position)
        if self.type in ("int", "float"):
            if self.min is not None and value < self.min or self.max is not None and value > self.max:
                raise ArgumentError(f"{self.name}={value} outside [{self.min}, {self.max}]", self.name, position)
        return value


def _as_float(spec: ParamSpec, value, position):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ArgumentError(f"{spec.name} must be a number, got {value!r}", spec.name, position)
    return float(value)


def _as_int(spec: ParamSpec, value, position):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ArgumentError(f"{spec.name} must be an integer, got {value!r}", spec.name, position)
    return value


def _as_str(spec: ParamSpec, value, position):
    if not isinstance(value, str):
        raise ArgumentError(f"{spec.name} must be a string, got {value!r}", spec.name, position)
    return value


def _as_bool(spec: ParamSpec, value, position):
    if not isinstance(value, bool):
        raise ArgumentError(f"{spec.name} must be True or False, got {value!r}", spec.name, position)
    return value


_VALIDATORS = {"float": _as_float, "int": _as_int, "str": _as_str, "bool": _as_bool}


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    doc: str
    params: tuple[ParamSpec, ...]

    @property
    def required(self) -> list[str]:
        return [p.name for p in self.params if p.required]

    def param(self, name: str) -> ParamSpec | None:
        return next((p for p in self.params if p.name == name), None)

    def signature(self) -> str:
        return f"{self.name}(" + ", ".join(f"{p.name}: {p.type}" for p in self.params) + ")"


_IDENT_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*\Z")


class Registry:
    """Immutable set of approved functions and their implementations."""

    def __init__(self, specs: Iterable[FunctionSpec], implementations: Mapping[str, Callable] | None = None):
        self._specs: dict[str, FunctionSpec] = {}
        for spec in specs:
            for ident in [spec.name] + [p.name for p in spec.params]:
                if not _IDENT_RE.match(ident) or _DENY_WORD_RE.search(ident):
                    raise ConfigurationError(f"identifier {ident!r} is not allowed in a registry")
            if spec.name in self._specs:
                raise ConfigurationError(f"duplicate function {spec.name!r}")
            self._specs[spec.name] = spec
        self._impls = dict(implementations or {})
        unknown = set(self._impls) - set(self._specs)
        if unknown:
            raise ConfigurationError(f"implementations without specs: {sorted(unknown)}")

    @classmethod
    def from_manifest(cls, path: str | Path | None = None,
                      implementations: Mapping[str, Callable] | None = None) -> "Registry":
        if path is None:
            text = resources.files("aqllm.data").joinpath("functions.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        specs = []
        for f in json.loads(text):
            params = tuple(
                ParamSpec(p["name"], p["type"], p.get("required", True), p.get("min"), p.get("max"), p.get("semantic", ""))
                for p in f["params"]
            )
            specs.append(FunctionSpec(f["name"], f["doc"], params))
        return cls(specs, implementations)

    def __contains__(self, name: str) -> bool:
        return name in self._specs

    def __iter__(self):
        return iter(self._specs.values())

    def __len__(self) -> int:
        return len(self._specs)

    def get(self, name: str) -> FunctionSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise UnknownFunctionError(f"function {name!r} is not in the registry") from None

    def implementation(self, name: str) -> Callable:
        try:
            return self._impls[name]
        except KeyError:
            raise ConfigurationError(f"function {name!r} has no bound implementation") from None

    @property
    def names(self) -> list[str]:
        return list(self._specs)


# --- safety check -------------------------------------------------------------

class RuleChecker:
    kind = CheckerKind.RULE

    def check(self, call: CallString) -> SafetyVerdict:
        raw = call.raw

        def reject(why: str) -> SafetyVerdict:
            return SafetyVerdict(Verdict.REJECT, why, self.kind, raw)

        if len(raw) > MAX_CALL_LENGTH:
            return reject(f"call string longer than {MAX_CALL_LENGTH} characters")
        bad = next((ch for ch in raw if not (" " <= ch <= "~")), None)
        if bad is not None:
            return reject(f"non-printable or non-ASCII character {bad!r}")
        m = _UNDERSCORE_IDENT_RE.search(raw)
        if m:
            return reject(f"identifier {m.group(1)!r} violates the identifier policy (leading underscore)")
        m = _DENY_WORD_RE.search(raw)
        if m:
            return reject(f"denylisted token {m.group(1)!r}")
        sym = next((s for s in DENYLIST_SYMBOLS if s in raw), None)
        if sym is not None:
            return reject(f"denylisted symbol {sym!r}")
        if not _SHAPE_RE.fullmatch(raw):
            return reject("not a single call of the form name(arg=value, ...)")
        return SafetyVerdict(Verdict.PASS, "", self.kind, raw)


class LlmChecker:
    """Ask a reviewer model whether the string is malicious."""

    kind = CheckerKind.LLM
    PROMPT = ("Examine the following function call string for malicious or unsafe code. "
              "Reply with PASS if it is a single harmless call, otherwise REJECT followed by the reason.")

    def __init__(self, gateway: Gateway, model: str):
        self.gateway = gateway
        self.model = model

    def check(self, call: CallString) -> SafetyVerdict:
        reply = self.gateway.chat(self.model, [system(self.PROMPT), user(call.raw or "(empty)")], tag="safety-llm")
        text = reply.content.strip()
        head = text.split(None, 1)[0].strip(".:,").upper() if text else ""
        if head == "PASS":
            return SafetyVerdict(Verdict.PASS, text, self.kind, call.raw)
        return SafetyVerdict(Verdict.REJECT, text or "empty reviewer reply", self.kind, call.raw)


def safety_check(call: CallString, checker) -> SafetyVerdict:
    if checker is None:
        raise ConfigurationError("no safety checker configured")
    return checker.check(call)


# --- format check ---------------------------------------------------------------

@dataclass(frozen=True)
class ParsedCall:
    name: str
    arguments: Mapping[str, Any]
    raw: str = ""


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ ]+)
  | (?P<number>[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<string>"[A-Za-z0-9 _.:,-]*"|'[A-Za-z0-9 _.:,-]*')
  | (?P<ident>[A-Za-z][A-Za-z0-9_]*)
  | (?P<punct>[(),=])
""", re.X)


def _tokenize(raw: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(raw):
        m = _TOKEN_RE.match(raw, pos)
        if not m:
            raise CallSyntaxError(f"unexpected character {raw[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    return tokens


def _literal(kind: str, text: str, pos: int):
    if kind == "number":
        if re.fullmatch(r"[+-]?\d+", text):
            return int(text)
        return float(text)
    if kind == "string":
        body = text[1:-1]
        m = _DENY_WORD_RE.search(body)
        if m:
            raise ArgumentError(f"reserved word {m.group(1)!r} inside a string value", None, pos)
        return body
    if kind == "ident" and text in ("True", "False"):
        return text == "True"
    raise CallSyntaxError(f"expected a literal value, got {text!r}", pos)


def parse_call(raw: str) -> tuple[str, list[tuple[str, Any, int]]]:
    """Parse ``name(k=v, ...)`` into the name and (key, value, position) triples."""
    if len(raw) > MAX_CALL_LENGTH:
        raise CallSyntaxError(f"call string longer than {MAX_CALL_LENGTH} characters", MAX_CALL_LENGTH)
    tokens = _tokenize(raw)
    if not tokens:
        raise CallSyntaxError("empty call string", 0)
    end = len(raw)

    def expect(i: int, kind: str, text: str | None = None):
        if i >= len(tokens):
            raise CallSyntaxError(f"unexpected end of input, expected {text or kind}", end)
        k, t, p = tokens[i]
        if k != kind or (text is not None and t != text):
            raise CallSyntaxError(f"expected {text or kind}, got {t!r}", p)
        return t, p

    name, _ = expect(0, "ident")
    expect(1, "punct", "(")
    args: list[tuple[str, Any, int]] = []
    i = 2
    if i < len(tokens) and tokens[i][1] == ")":
        i += 1
    else:
        while True:
            key, _ = expect(i, "ident")
            expect(i + 1, "punct", "=")
            if i + 2 >= len(tokens):
                raise CallSyntaxError("unexpected end of input, expected a value", end)
            kind, text, vpos = tokens[i + 2]
            args.append((key, _literal(kind, text, vpos), vpos))
            i += 3
            sep, spos = expect(i, "punct")
            i += 1
            if sep == ")":
                break
            if sep != ",":
                raise CallSyntaxError(f"expected ',' or ')', got {sep!r}", spos)
    if i != len(tokens):
        raise CallSyntaxError("trailing input after the call", tokens[i][2])
    return name, args


def format_check(call: CallString, registry: Registry) -> ParsedCall:
    """Parse the call and validate it against its registry documentation."""
    name, args = parse_call(call.raw)
    spec = registry.get(name)
    values: dict[str, Any] = {}
    for key, value, pos in args:
        param = spec.param(key)
        if param is None:
            raise ArgumentError(f"{name} has no parameter {key!r}", key, pos)
        if key in values:
            raise ArgumentError(f"parameter {key!r} given twice", key, pos)
        values[key] = param.validate(value, pos)
    missing = [p for p in spec.required if p not in values]
    if missing:
        raise MissingParameterError(f"{name} is missing required parameter(s): {', '.join(missing)}", missing)
    return ParsedCall(name, values, call.raw)


# --- approval and dispatch -----------------------------------------------------------

_APPROVAL_KEY = object()


class ApprovedCall:
    """Proof that a call passed both checks. Build it with ``approve``."""

    __slots__ = ("parsed", "verdicts")

    def __init__(self, parsed: ParsedCall, verdicts: tuple[SafetyVerdict, ...], _key=None):
        if _key is not _APPROVAL_KEY:
            raise ContractViolation("ApprovedCall can only be created by approve()")
        self.parsed = parsed
        self.verdicts = verdicts


def approve(parsed: ParsedCall, *verdicts: SafetyVerdict) -> ApprovedCall:
    if not verdicts:
        raise ContractViolation("no safety verdict supplied")
    for v in verdicts:
        if not isinstance(v, SafetyVerdict) or not v.passed:
            raise ContractViolation(f"safety check did not pass: {getattr(v, 'rationale', v)}")
        if v.call != parsed.raw:
            raise ContractViolation("safety verdict belongs to a different call string")
    return ApprovedCall(parsed, tuple(verdicts), _APPROVAL_KEY)


def gate(reply: str | CallString, registry: Registry, checker, shadow: Sequence = ()) -> ApprovedCall:
    """Run both checks on a Code-Execution reply and return the approval.

    ``shadow`` checkers (e.g. an LLM reviewer next to the rule checker) also
    have to pass; their verdicts are logged and kept on the approval.
    """
    call = reply if isinstance(reply, CallString) else CallString.from_reply(reply)
    verdicts = []
    for c in (checker, *shadow):
        v = safety_check(call, c)
        log.info("safety verdict %s by %s: %s", v.verdict.value, v.checker.value, v.rationale or "ok")
        if not v.passed:
            raise UnsafeCallError(f"call rejected by {v.checker.value} checker: {v.rationale}")
        verdicts.append(v)
    parsed = format_check(call, registry)
    return approve(parsed, *verdicts)


@dataclass(frozen=True)
class DispatchResult:
    call: ParsedCall
    value: Any


def dispatch(approved: ApprovedCall, registry: Registry, context: Any = None) -> DispatchResult:
    if not isinstance(approved, ApprovedCall):
        raise ContractViolation(f"dispatch needs an ApprovedCall, got {type(approved).__name__}")
    parsed = approved.parsed
    impl = registry.implementation(parsed.name)
    try:
        value = impl(context, **parsed.arguments)
    except Exception as exc:
        exc.call = parsed
        log.error("dispatch of %s failed: %s", parsed.raw, exc)
        raise
    return DispatchResult(parsed, value)


# --- LLM-facing steps --------------------------------------------------------------

def _split_names(reply: str) -> list[str]:
    names = []
    for part in re.split(r"[,\s]+", reply):
        part = part.strip("`'\"*.-:()[]")
        if part and part not in names:
            names.append(part)
    return names


def select_functions(user_prompt: str, registry: Registry, gateway: Gateway, model: str) -> list[FunctionSpec]:
    """Let the Instructor pick functions from the registry by name."""
    if not len(registry):
        raise ConfigurationError("empty function registry")
    listing = "\n".join(f"- {s.name}: {s.doc}" for s in registry)
    messages = [
        system(instructor_system_prompt()),
        system(render(template("function_selection"), FUNCTIONS=listing)),
        user(user_prompt),
    ]
    reply = gateway.chat(model, messages, tag="instructor-01-select").content
    chosen = []
    for name in _split_names(reply):
        if name in registry:
            chosen.append(registry.get(name))
        else:
            log.warning("instructor selected unknown function %r; dropped", name)
    if not chosen:
        raise SelectionError(f"no valid function selected (reply: {reply!r}); please clarify the request")
    return chosen


def request_call(user_prompt: str, instruction: str, specs: Sequence[FunctionSpec], gateway: Gateway,
                 model: str) -> CallString:
    """Ask the Code-Execution LLM for one call using the chosen functions' docs."""
    messages = [system(template("code_exec_system"))]
    if instruction:
        messages.append(system(instruction))
    messages += [system(f"Function documentation:\n{s.doc}") for s in specs]
    messages.append(user(user_prompt))
    reply = gateway.chat(model, messages, tag="instructor-03-codeexec").content
    return CallString.from_reply(reply)


# --- default registry bindings -------------------------------------------------------

@dataclass
class DataContext:
    client: Any
    end: Any = None


def _fetch_history_impl(ctx: DataContext, lat: float, lng: float, hours: int):
    from .airdata import GeoPoint, fetch_history

    return fetch_history(GeoPoint(lat, lng), hours, ctx.client, end=ctx.end)


def _current_conditions_impl(ctx: DataContext, lat: float, lng: float):
    from .airdata import GeoPoint, current_conditions

    return current_conditions(GeoPoint(lat, lng), ctx.client)


def default_registry() -> Registry:
    return Registry.from_manifest(None, {
        "fetch_history": _fetch_history_impl,
        "current_conditions": _current_conditions_impl,
    })
