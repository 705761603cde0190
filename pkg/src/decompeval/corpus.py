"""Manifest loading, corpus validation, reference builds, and harness builds.

The manifest is a JSON file describing pre-extracted (source, deps, seeds)
triples per target function; all paths inside it are relative to the
manifest file.  Compilation shells out to the configured C compiler and
captures build logs verbatim.
"""

from __future__ import annotations

import hashlib
import json
import shlex
import subprocess
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .elf import ElfFile
from .errors import DuplicateSymbol, MissingFile, ParseError, ToolchainError


class OptLevel(Enum):
    O0 = "O0"
    O1 = "O1"
    O2 = "O2"
    O3 = "O3"
    Os = "Os"

    @property
    def flag(self) -> str:
        return f"-{self.value}"

    @classmethod
    def parse(cls, tag: str) -> "OptLevel":
        try:
            return cls[tag]
        except KeyError:
            raise ParseError(f"unknown optimization level {tag!r}") from None


ALL_LEVELS = [OptLevel.O0, OptLevel.O1, OptLevel.O2, OptLevel.O3, OptLevel.Os]

# -fcf-protection=none keeps function prologues free of endbr64 padding so
# the short-function fixture really is shorter than the prologue patch.
DEFAULT_CFLAGS = ("-fcf-protection=none",)


@dataclass(frozen=True)
class ToolchainConfig:
    compiler_command: str = "gcc {cflags} -o {out} {inputs}"
    extra_cflags: tuple = DEFAULT_CFLAGS
    linker_export_dynamic: bool = True
    no_inline: bool = True
    gcov_command: str = "gcov"

    def to_json(self) -> dict:
        return {
            "compiler_command": self.compiler_command,
            "extra_cflags": list(self.extra_cflags),
            "linker_export_dynamic": self.linker_export_dynamic,
            "no_inline": self.no_inline,
            "gcov_command": self.gcov_command,
        }

    @classmethod
    def from_json(cls, body: dict) -> "ToolchainConfig":
        return cls(
            compiler_command=body.get("compiler_command",
                                      cls.compiler_command),
            extra_cflags=tuple(body.get("extra_cflags", DEFAULT_CFLAGS)),
            linker_export_dynamic=body.get("linker_export_dynamic", True),
            no_inline=body.get("no_inline", True),
            gcov_command=body.get("gcov_command", "gcov"),
        )


@dataclass(frozen=True)
class FunctionRecord:
    symbol: str
    source_path: Path
    deps_path: Path
    harness_id: str
    seeds_dir: Path
    # fixture annotation: does the comparison-flip mutant diverge under the
    # shipped seeds?  Used as the oracle for sensitivity testing.
    mutant_divergent: bool | None = None

    def source_text(self) -> str:
        return self.source_path.read_text()

    def deps_text(self) -> str:
        return self.deps_path.read_text()

    def seed_files(self) -> list[Path]:
        return sorted(p for p in self.seeds_dir.iterdir() if p.is_file())


@dataclass(frozen=True)
class Manifest:
    corpus_version: str
    functions: list[FunctionRecord]
    toolchain: ToolchainConfig
    opt_levels: list[OptLevel]
    harness_sources: dict[str, Path]
    root: Path

    def record(self, symbol: str) -> FunctionRecord:
        for rec in self.functions:
            if rec.symbol == symbol:
                return rec
        raise KeyError(symbol)

    def corpus_hash(self) -> str:
        """Stable digest over manifest content and every referenced file."""
        h = hashlib.sha256()
        h.update(self.corpus_version.encode())
        for rec in self.functions:
            h.update(rec.symbol.encode())
            h.update(rec.source_path.read_bytes())
            h.update(rec.deps_path.read_bytes())
            for seed in rec.seed_files():
                h.update(seed.name.encode())
                h.update(seed.read_bytes())
        for hid in sorted(self.harness_sources):
            h.update(hid.encode())
            h.update(self.harness_sources[hid].read_bytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ReferenceArtifact:
    symbol: str
    level: OptLevel
    so_path: Path
    log_path: Path


@dataclass(frozen=True)
class HarnessBinary:
    harness_id: str
    level: OptLevel
    exe_path: Path
    build_dir: Path  # holds the .gcno files the profiler needs


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    try:
        body = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed manifest {path}: {exc}") from exc
    root = path.parent
    try:
        levels = [OptLevel.parse(tag) for tag in body["opt_levels"]]
        toolchain = ToolchainConfig.from_json(body.get("toolchain", {}))
        harnesses = {hid: root / rel
                     for hid, rel in body["harnesses"].items()}
        functions = []
        for fn in body["functions"]:
            functions.append(FunctionRecord(
                symbol=fn["symbol"],
                source_path=root / fn["source"],
                deps_path=root / fn["deps"],
                harness_id=fn["harness"],
                seeds_dir=root / fn["seeds"],
                mutant_divergent=fn.get("mutant_divergent"),
            ))
        manifest = Manifest(
            corpus_version=str(body["corpus_version"]),
            functions=functions,
            toolchain=toolchain,
            opt_levels=levels,
            harness_sources=harnesses,
            root=root,
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"manifest {path} missing field: {exc}") from exc
    if not levels:
        raise ParseError("opt_levels must be non-empty")
    seen = set()
    for rec in manifest.functions:
        if rec.symbol in seen:
            raise DuplicateSymbol(rec.symbol)
        seen.add(rec.symbol)
    _check_files(manifest)
    return manifest


def _check_files(manifest: Manifest) -> None:
    for rec in manifest.functions:
        for p in (rec.source_path, rec.deps_path):
            if not p.is_file():
                raise MissingFile(f"{rec.symbol}: missing {p}")
        if not rec.seeds_dir.is_dir() or not rec.seed_files():
            raise MissingFile(
                f"{rec.symbol}: seeds_dir {rec.seeds_dir} has no seed files")
        if rec.harness_id not in manifest.harness_sources:
            raise MissingFile(
                f"{rec.symbol}: unknown harness {rec.harness_id!r}")
    for hid, src in manifest.harness_sources.items():
        if not src.is_file():
            raise MissingFile(f"harness {hid}: missing {src}")


# --- compilation ---

def run_compiler(cfg: ToolchainConfig, inputs: list[Path], out: Path,
                 cflags: list[str], log_path: Path,
                 cwd: Path = None) -> tuple[bool, str]:
    """Invoke the compiler command template; returns (ok, combined output).

    The verbatim compiler output is always written to ``log_path``.
    """
    command = cfg.compiler_command.format(
        cflags=" ".join(shlex.quote(f) for f in cflags),
        out=shlex.quote(str(out)),
        inputs=" ".join(shlex.quote(str(p)) for p in inputs),
    )
    argv = shlex.split(command)
    try:
        proc = subprocess.run(argv, capture_output=True, text=True,
                              cwd=cwd, timeout=120)
    except FileNotFoundError as exc:
        raise ToolchainError(f"compiler not found: {argv[0]}") from exc
    except subprocess.TimeoutExpired as exc:
        raise ToolchainError(f"compiler timed out: {command}") from exc
    log = proc.stdout + proc.stderr
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text(f"$ {command}\n{log}")
    return proc.returncode == 0, log


def shared_object_cflags(cfg: ToolchainConfig, level: OptLevel) -> list[str]:
    flags = ["-shared", "-fPIC", level.flag]
    if cfg.no_inline:
        flags.append("-fno-inline")
    flags.extend(cfg.extra_cflags)
    return flags


def compile_reference(record: FunctionRecord, level: OptLevel,
                      cfg: ToolchainConfig, out_dir) -> ReferenceArtifact:
    """Compile deps + source into a standalone shared object exporting the
    record's symbol."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src = out_dir / f"{record.symbol}.c"
    src.write_text(record.deps_text() + "\n" + record.source_text() + "\n")
    so_path = out_dir / "ref.so"
    log_path = out_dir / "build.log"
    ok, log = run_compiler(cfg, [src], so_path,
                           shared_object_cflags(cfg, level), log_path)
    if not ok:
        raise ToolchainError(
            f"reference build failed for {record.symbol} at {level.value}; "
            f"see {log_path}\n{log}")
    exported = ElfFile(so_path).dynsym_defines(record.symbol)
    if not exported:
        raise ToolchainError(
            f"{so_path} does not export {record.symbol!r}")
    return ReferenceArtifact(record.symbol, level, so_path, log_path)


def build_dummy_library(cfg: ToolchainConfig, out_dir) -> Path:
    """The placeholder shared library the harness links against; swapped
    for a wrapped candidate at run time."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src = out_dir / "dummy.c"
    src.write_text(
        "/* placeholder fuzz entry point; replaced at run time */\n"
        "__attribute__((weak))\n"
        "int LLVMFuzzerTestOneInput(const unsigned char *data,\n"
        "                           unsigned long size) {\n"
        "    (void)data; (void)size;\n"
        "    return 0;\n"
        "}\n")
    so_path = out_dir / "libdummy.so"
    ok, log = run_compiler(cfg, [src], so_path, ["-shared", "-fPIC"],
                           out_dir / "build.log")
    if not ok:
        raise ToolchainError(f"dummy library build failed:\n{log}")
    return so_path


def harness_cflags(cfg: ToolchainConfig, level: OptLevel,
                   dummy_dir: Path) -> list[str]:
    if not cfg.linker_export_dynamic:
        raise ToolchainError(
            "harness builds require linker_export_dynamic=true")
    flags = [level.flag, "--coverage", "-fno-pie", "-no-pie",
             "-Wl,--export-dynamic", "-Wl,--no-as-needed",
             f"-L{dummy_dir}", "-ldummy",
             f"-Wl,-rpath,{dummy_dir}"]
    if cfg.no_inline:
        flags.append("-fno-inline")
    flags.extend(cfg.extra_cflags)
    return flags


def build_harness(manifest: Manifest, harness_id: str, level: OptLevel,
                  cfg: ToolchainConfig, out_dir,
                  dummy_so: Path) -> HarnessBinary:
    """Build the host executable: harness driver plus the reference
    implementation of every function assigned to it.

    The driver is compiled with branch-counter instrumentation; the target
    translation units are not, so target functions keep their natural
    machine-code size (the prologue patch disables their counters anyway,
    and only driver-side side effects are compared).  The link is non-PIE
    so symbol addresses are load addresses, and uses --export-dynamic per
    the toolchain contract.  Source files keep fixed names inside the build
    directory so coverage module ids are stable.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    harness_src = out_dir / "harness.c"
    harness_src.write_text(manifest.harness_sources[harness_id].read_text())
    base = [level.flag, "-fno-pie"]
    if cfg.no_inline:
        base.append("-fno-inline")
    base.extend(cfg.extra_cflags)
    objects = []

    def compile_object(src: Path, instrumented: bool) -> Path:
        obj = src.with_suffix(".o")
        flags = ["-c"] + base + (["--coverage"] if instrumented else [])
        ok, log = run_compiler(cfg, [src.name], obj, flags,
                               out_dir / f"{src.stem}.cc.log", cwd=out_dir)
        if not ok:
            raise ToolchainError(
                f"harness object build failed for {src}:\n{log}")
        objects.append(obj)
        return obj

    compile_object(harness_src, instrumented=True)
    for rec in manifest.functions:
        if rec.harness_id != harness_id:
            continue
        target_src = out_dir / f"{rec.symbol}.c"
        target_src.write_text(rec.deps_text() + "\n" + rec.source_text() + "\n")
        compile_object(target_src, instrumented=False)

    exe = out_dir / "harness"
    log_path = out_dir / "build.log"
    ok, log = run_compiler(
        cfg, [o.relative_to(out_dir) for o in objects], exe,
        harness_cflags(cfg, level, dummy_so.parent), log_path, cwd=out_dir)
    if not ok:
        raise ToolchainError(
            f"harness build failed for {harness_id} at {level.value}; "
            f"see {log_path}\n{log}")
    elf = ElfFile(exe)
    if "libdummy.so" not in elf.needed_libraries():
        raise ToolchainError(f"{exe} does not link against libdummy.so")
    return HarnessBinary(harness_id, level, exe, out_dir)


def validate_corpus(manifest: Manifest, out_root) -> dict:
    """Compile every reference at every level and build every harness so a
    later ToolchainError unambiguously means environment breakage.

    Returns a summary dict; raises ToolchainError on any failure.
    """
    out_root = Path(out_root)
    dummy_so = build_dummy_library(manifest.toolchain, out_root / "_dummy")
    built = {"references": 0, "harnesses": 0}
    for rec in manifest.functions:
        for level in manifest.opt_levels:
            compile_reference(rec, level, manifest.toolchain,
                              out_root / rec.symbol / level.value)
            built["references"] += 1
    for hid in sorted(manifest.harness_sources):
        for level in manifest.opt_levels:
            build_harness(manifest, hid, level, manifest.toolchain,
                          out_root / "_harness" / hid / level.value, dummy_so)
            built["harnesses"] += 1
    return built
