"""Decompiler adapters: external tools, chat endpoints, and the built-in
Identity/Mutator adapters that make the pipeline testable without any
licensed decompiler."""

from __future__ import annotations

import hashlib
import json
import os
import re
import shlex
import subprocess
import tempfile
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .corpus import FunctionRecord, OptLevel, ReferenceArtifact
from .errors import EmptyOutput, ParseError, ToolCrash, ToolUnavailable


class AdapterKind(Enum):
    EXTERNAL_COMMAND = "ExternalCommand"
    CHAT_ENDPOINT = "ChatEndpoint"
    IDENTITY = "Identity"
    MUTATOR = "Mutator"


@dataclass(frozen=True)
class PatternRule:
    """One post-processing fix: strip or rewrite a tool-specific pattern.

    Rules are written to be idempotent on their own output.
    """
    pattern: str
    replacement: str = ""
    is_regex: bool = False

    def apply(self, text: str) -> str:
        if self.is_regex:
            return re.sub(self.pattern, self.replacement, text)
        return text.replace(self.pattern, self.replacement)


# Fixes for patterns known to break recompilation of common tool outputs,
# e.g. register-location annotations and nonstandard attributes.
DEFAULT_RULES = [
    PatternRule(r"\s*@\s*zmm\d+", "", is_regex=True),
    PatternRule("__pure", ""),
]


@dataclass(frozen=True)
class GenerationParams:
    max_tokens: int = 8192
    temperature: float = 0.7
    top_p: float = 1.0


@dataclass(frozen=True)
class DecompilerSpec:
    id: str
    kind: AdapterKind
    command_template: str = ""
    endpoint_url: str = ""
    endpoint_model: str = ""
    auth_env_var: str = ""
    prompt_path: str = ""
    refines: str | None = None
    postprocess_rules: tuple = ()
    params: dict = field(default_factory=dict)
    generation: GenerationParams = GenerationParams()

    @classmethod
    def from_json(cls, body: dict) -> "DecompilerSpec":
        try:
            kind = AdapterKind(body["kind"])
            spec_id = body["id"]
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad decompiler spec: {exc}") from exc
        rules = tuple(
            PatternRule(r["pattern"], r.get("replacement", ""),
                        r.get("is_regex", False))
            for r in body.get("postprocess_rules", []))
        gen = body.get("generation", {})
        return cls(
            id=spec_id,
            kind=kind,
            command_template=body.get("command", ""),
            endpoint_url=body.get("endpoint", ""),
            endpoint_model=body.get("model", ""),
            auth_env_var=body.get("auth_env_var", ""),
            prompt_path=body.get("prompt", ""),
            refines=body.get("refines"),
            postprocess_rules=rules,
            params=body.get("params", {}),
            generation=GenerationParams(
                max_tokens=gen.get("max_tokens", 8192),
                temperature=gen.get("temperature", 0.7),
                top_p=gen.get("top_p", 1.0),
            ),
        )


def load_decompiler_specs(path) -> list[DecompilerSpec]:
    try:
        body = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot load decompiler specs {path}: {exc}") from exc
    specs = [DecompilerSpec.from_json(entry)
             for entry in body["decompilers"]]
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise ParseError("decompiler ids must be unique within a run")
    return specs


@dataclass(frozen=True)
class DecompiledCandidate:
    decompiler_id: str
    symbol: str
    level: OptLevel
    code: str
    provenance: str  # sha256 of the raw tool output

    def with_code(self, code: str) -> "DecompiledCandidate":
        return DecompiledCandidate(self.decompiler_id, self.symbol,
                                   self.level, code, self.provenance)


def _provenance(raw: str) -> str:
    return hashlib.sha256(raw.encode()).hexdigest()


# A comparison operator that is not part of <=, <<, or a shift-assign.
_COMPARISON = {
    "<": re.compile(r"(?<![<>=!])<(?![<>=])"),
    ">": re.compile(r"(?<![<>=!-])>(?![<>=])"),
    "<=": re.compile(r"(?<![<>])<="),
    ">=": re.compile(r"(?<![<>])>="),
}


def flip_first_comparison(code: str, operator: str, replacement: str) -> str:
    """Rewrite the first occurrence of ``operator`` used as a comparison,
    skipping preprocessor lines.  No match leaves the code unchanged."""
    try:
        pattern = _COMPARISON[operator]
    except KeyError:
        raise ParseError(f"unsupported mutator operator {operator!r}") from None
    lines = code.split("\n")
    for i, line in enumerate(lines):
        if line.lstrip().startswith("#"):
            continue
        new_line, n = pattern.subn(replacement, line, count=1)
        if n:
            lines[i] = new_line
            return "\n".join(lines)
    return code


def decompile(spec: DecompilerSpec, artifact: ReferenceArtifact,
              symbol: str, record: FunctionRecord = None,
              refined_input: str = None) -> DecompiledCandidate:
    """Produce one decompiled candidate.  The raw tool output is hashed into
    provenance before any post-processing."""
    if spec.kind is AdapterKind.IDENTITY:
        raw = record.source_text()
    elif spec.kind is AdapterKind.MUTATOR:
        raw = flip_first_comparison(
            record.source_text(),
            spec.params.get("operator", "<"),
            spec.params.get("replacement", "<="))
    elif spec.kind is AdapterKind.EXTERNAL_COMMAND:
        raw = _run_external(spec, artifact.so_path, symbol)
    elif spec.kind is AdapterKind.CHAT_ENDPOINT:
        raw = _query_endpoint(spec, artifact, symbol, refined_input)
    else:  # pragma: no cover - enum is closed
        raise ParseError(f"unhandled adapter kind {spec.kind}")
    if not raw.strip():
        raise EmptyOutput(f"{spec.id} produced no code for {symbol}")
    return DecompiledCandidate(spec.id, symbol, artifact.level,
                               code=raw, provenance=_provenance(raw))


def _run_external(spec: DecompilerSpec, binary: Path, symbol: str) -> str:
    with tempfile.TemporaryDirectory(prefix="decomp-") as tmp:
        out = Path(tmp) / "out.c"
        command = spec.command_template.format(
            binary=shlex.quote(str(binary)), symbol=shlex.quote(symbol),
            out=shlex.quote(str(out)))
        try:
            proc = subprocess.run(shlex.split(command), capture_output=True,
                                  text=True, timeout=600)
        except FileNotFoundError as exc:
            raise ToolUnavailable(f"{spec.id}: {exc}") from exc
        if proc.returncode != 0:
            raise ToolCrash(
                f"{spec.id} exited {proc.returncode} on {symbol}",
                output=proc.stdout + proc.stderr)
        if out.is_file():
            return out.read_text()
        return proc.stdout


DEFAULT_PROMPT = (
    "Decompile the following x86-64 function back to compilable C. "
    "Reply with only the C code for the function body.\n\n{input}"
)


def _query_endpoint(spec: DecompilerSpec, artifact: ReferenceArtifact,
                    symbol: str, refined_input: str | None) -> str:
    if refined_input is not None:
        tool_input = refined_input
    else:
        tool_input = _disassemble(artifact.so_path, symbol)
    template = (Path(spec.prompt_path).read_text() if spec.prompt_path
                else DEFAULT_PROMPT)
    prompt = template.format(input=tool_input, symbol=symbol)
    body = {
        "model": spec.endpoint_model,
        "messages": [{"role": "user", "content": prompt}],
        "max_tokens": spec.generation.max_tokens,
        "temperature": spec.generation.temperature,
        "top_p": spec.generation.top_p,
    }
    content = post_chat(spec.endpoint_url, body, who=spec.id,
                        auth_env_var=spec.auth_env_var)
    return strip_code_fences(content)


def post_chat(url: str, body: dict, *, who: str = "endpoint",
              auth_env_var: str = "", timeout: float = 300) -> str:
    """POST a chat-completion request body and return the message text."""
    headers = {"Content-Type": "application/json"}
    if auth_env_var:
        token = os.environ.get(auth_env_var, "")
        if not token:
            raise ToolUnavailable(
                f"{who}: auth token env var {auth_env_var} unset")
        headers["Authorization"] = f"Bearer {token}"
    request = urllib.request.Request(url, data=json.dumps(body).encode(),
                                     headers=headers, method="POST")
    try:
        with urllib.request.urlopen(request, timeout=timeout) as resp:
            payload = json.loads(resp.read().decode())
    except urllib.error.URLError as exc:
        raise ToolUnavailable(f"{who}: endpoint unreachable: {exc}") from exc
    try:
        return payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ToolCrash(f"{who}: unexpected response shape",
                        output=json.dumps(payload)) from exc


def strip_code_fences(text: str) -> str:
    match = re.search(r"```(?:[a-zA-Z]*)\n(.*?)```", text, re.DOTALL)
    return match.group(1).strip() if match else text


def _disassemble(binary: Path, symbol: str) -> str:
    try:
        proc = subprocess.run(
            ["objdump", "-d", f"--disassemble={symbol}", str(binary)],
            capture_output=True, text=True, timeout=60)
    except FileNotFoundError as exc:
        raise ToolUnavailable(f"objdump unavailable: {exc}") from exc
    if proc.returncode != 0:
        raise ToolCrash("objdump failed", output=proc.stderr)
    return proc.stdout


def postprocess(candidate: DecompiledCandidate,
                rules) -> DecompiledCandidate:
    """Apply tool-specific pattern fixes; provenance is preserved."""
    code = candidate.code
    for rule in rules:
        code = rule.apply(code)
    return candidate.with_code(code)
