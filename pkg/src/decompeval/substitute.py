"""In-binary function substitution.

A candidate function is spliced into the host harness without disturbing
anything else: the target's prologue in an on-disk copy of the harness is
overwritten with an indirect jump through a fixed trampoline slot, and a
wrapped shared object (candidate + load-time initializer/finalizer) fills
the slot with the candidate's address when the dynamic loader brings it in.
External calls from the candidate to functions the harness implements but
does not export are bound by manually written GOT entries.
"""

from __future__ import annotations

import shutil
import struct
from dataclasses import dataclass
from pathlib import Path

from . import elf
from .corpus import OptLevel, ToolchainConfig, run_compiler, shared_object_cflags
from .errors import (
    AddressNotEncodable,
    PatchTooLarge,
    SubstitutionUnsupported,
    SymbolMissing,
    SymbolNotFoundInCode,
    ToolchainError,
    WriteFailure,
)

SLOT_ADDRESS = 0xBABE0000
SLOT_WIDTH = 8


@dataclass(frozen=True)
class TrampolineSlot:
    address: int = SLOT_ADDRESS
    width: int = SLOT_WIDTH


@dataclass(frozen=True)
class SymbolInfo:
    name: str
    vaddr: int
    file_offset: int
    size: int
    bind: int
    visibility: int
    in_dynsym: bool


@dataclass(frozen=True)
class PatchBytes:
    data: bytes

    @property
    def length(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class Relocation:
    symbol: str
    so_got_offset: int  # .got/.got.plt entry offset inside the shared object
    resolved_vaddr: int  # implementation address inside the harness image


def emit_prologue_patch(slot: TrampolineSlot = TrampolineSlot()) -> PatchBytes:
    """x86-64 code that loads 8 bytes from the slot into rax and jumps
    through it: ``movabs rax, [slot]; jmp rax``.

    rax is caller-saved and dead at function entry under the System V ABI.
    The moffs64 form is used because addresses with bit 31 set (such as
    0xbabe0000) sign-extend out of range under a 32-bit displacement.
    """
    if not 0 <= slot.address < 2 ** 32:
        raise AddressNotEncodable(
            f"slot address {slot.address:#x} outside the 32-bit range")
    return PatchBytes(
        b"\x48\xa1" + struct.pack("<Q", slot.address) + b"\xff\xe0")


def locate_symbol(binary, name: str) -> SymbolInfo:
    """Symbol table lookup with file-offset resolution for patching."""
    image = elf.ElfFile(binary)
    sym = image.find_symbol(name)
    if sym is None or sym.sym_type not in (elf.STT_FUNC, elf.STT_NOTYPE):
        raise SymbolMissing(f"{binary}: no function symbol {name!r}")
    return SymbolInfo(
        name=name,
        vaddr=sym.value,
        file_offset=image.vaddr_to_offset(sym.value),
        size=sym.size,
        bind=sym.bind,
        visibility=sym.visibility,
        in_dynsym=image.dynsym_defines(name),
    )


def apply_patch(binary, sym: SymbolInfo, patch: PatchBytes,
                out_path) -> Path:
    """Write the patch at the symbol's file offset into a copy of the
    binary; the original is untouched."""
    if patch.length > sym.size:
        raise PatchTooLarge(
            f"{sym.name} is {sym.size} bytes, patch needs {patch.length}")
    binary = Path(binary)
    out_path = Path(out_path)
    try:
        shutil.copy2(binary, out_path)
        with open(out_path, "r+b") as fh:
            fh.seek(sym.file_offset)
            fh.write(patch.data)
    except OSError as exc:
        raise WriteFailure(f"cannot patch {out_path}: {exc}") from exc
    return out_path


# --- wrapped source generation ---

_SHIM_TEMPLATE = """
/* ---- substitution shim (generated) ---- */
#include <sys/mman.h>
#include <unistd.h>
#include <dlfcn.h>

{decl}

#define SUBST_SLOT {slot:#x}UL

volatile unsigned long __subst_got_offsets[{table_size}] = {{{offsets}}};
volatile unsigned long __subst_dest_addrs[{table_size}] = {{{dests}}};
volatile unsigned long __subst_reloc_count = {count};

static void *__subst_page;

__attribute__((constructor))
static void __subst_init(void) {{
    Dl_info __subst_info;
    if (!dladdr((void *)&__subst_init, &__subst_info))
        _exit(97);
    unsigned long __subst_base = (unsigned long)__subst_info.dli_fbase;
    for (unsigned long i = 0; i < __subst_reloc_count; i++) {{
        if (__subst_got_offsets[i] < 8)
            _exit(96);
        *(unsigned long *)(__subst_base + __subst_got_offsets[i]) =
            __subst_dest_addrs[i];
    }}
    __subst_page = mmap((void *)SUBST_SLOT, 4096, PROT_READ | PROT_WRITE,
                        MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED_NOREPLACE,
                        -1, 0);
    if (__subst_page != (void *)SUBST_SLOT)
        _exit(98);
    *(unsigned long *)SUBST_SLOT = (unsigned long)&{symbol};
}}

__attribute__((destructor))
static void __subst_fini(void) {{
    if (__subst_page) {{
        *(unsigned long *)SUBST_SLOT = 0;
        munmap(__subst_page, 4096);
        __subst_page = 0;
    }}
}}
"""

_DEFINITION_HINTS = ("(", " ")


def defines_symbol(code: str, symbol: str) -> bool:
    """Cheap check that the candidate text plausibly defines ``symbol``
    (an occurrence followed by an argument list, outside a call is not
    distinguishable without parsing; compilation is the real gate)."""
    idx = 0
    while True:
        idx = code.find(symbol, idx)
        if idx < 0:
            return False
        end = idx + len(symbol)
        before = code[idx - 1] if idx else " "
        if not (before.isalnum() or before == "_"):
            rest = code[end:].lstrip()
            if rest.startswith("("):
                return True
        idx = end


def wrap_function(candidate_code: str, symbol: str, deps: str,
                  relocations: list[Relocation] = (),
                  slot: TrampolineSlot = TrampolineSlot(),
                  gnu_source: bool = True) -> str:
    """Generate the complete compilable wrapped source: headers, extracted
    dependencies, candidate code, then the initializer/finalizer pair.

    The initializer maps the trampoline slot page at its fixed address,
    stores the candidate's address into the slot, and writes any manual GOT
    relocations first.  GOT offsets are unknown until link time, so the
    offsets table holds a sentinel here (nonzero, so it gets file backing
    in .data) and is patched in the compiled object by
    :func:`bind_relocation_table`.
    """
    if not defines_symbol(candidate_code, symbol):
        raise SymbolNotFoundInCode(
            f"candidate does not define {symbol!r}")
    relocations = list(relocations)
    table_size = max(1, len(relocations))
    dests = ", ".join(f"{r.resolved_vaddr:#x}UL" for r in relocations) or "0"
    shim = _SHIM_TEMPLATE.format(
        slot=slot.address,
        symbol=symbol,
        table_size=table_size,
        offsets=", ".join(["1"] * table_size),
        dests=dests,
        count=len(relocations),
        decl="",
    )
    prefix = "#define _GNU_SOURCE\n" if gnu_source else ""
    return (f"{prefix}"
            f"/* ---- extracted dependencies ---- */\n{deps}\n"
            f"/* ---- candidate ---- */\n{candidate_code}\n"
            f"{shim}")


def wrapped_so_cflags(cfg: ToolchainConfig, level: OptLevel) -> list[str]:
    # lazy binding + no RELRO: unresolved externals must not abort load,
    # and the initializer writes GOT entries directly.  -Bsymbolic keeps
    # &symbol referring to this object's definition instead of the
    # harness's exported copy.
    return shared_object_cflags(cfg, level) + [
        "-Wl,-Bsymbolic", "-Wl,-z,lazy", "-Wl,-z,norelro", "-ldl"]


def resolve_external_calls(so_path, binary_path) -> tuple[list[Relocation], list[str]]:
    """Find undefined function symbols in the shared object that the
    harness binary implements without exporting.

    Returns (relocations, unresolved): one Relocation per GOT entry that
    must be bound manually, and the names that are defined nowhere.
    Symbols the dynamic linker can resolve on its own (exported by the
    binary or provided by a loaded library) are skipped.
    """
    so = elf.ElfFile(so_path)
    binary = elf.ElfFile(binary_path)
    got_entries: dict[str, list[int]] = {}
    for rela in so.got_relocations():
        got_entries.setdefault(rela.symbol, []).append(rela.offset)
    relocations = []
    unresolved = []
    for sym in so.undefined_dynsyms():
        name = sym.name
        if sym.bind == elf.STB_WEAK:
            continue  # weak undefined resolves to null by design
        if binary.dynsym_defines(name):
            continue  # normal dynamic linking handles it
        impl = binary.find_symbol(name)
        if impl is not None and impl.sym_type == elf.STT_FUNC:
            for offset in got_entries.get(name, []):
                relocations.append(Relocation(
                    symbol=name, so_got_offset=offset,
                    resolved_vaddr=impl.value))
            continue
        if _loader_can_resolve(name):
            continue
        unresolved.append(name)
    relocations.sort(key=lambda r: (r.symbol, r.so_got_offset))
    return relocations, sorted(set(unresolved))


def _loader_can_resolve(name: str) -> bool:
    """True when the process-wide lookup (libc and friends) knows the
    symbol, so no manual binding is needed."""
    import ctypes
    try:
        return bool(ctypes.cast(
            ctypes.CDLL(None)[name], ctypes.c_void_p).value)
    except (OSError, KeyError, AttributeError):
        return False


class MemoryImage:
    """Writable view of a loaded image for relocation tests; production
    runs perform the equivalent stores inside the generated initializer."""

    def __init__(self, buf: bytearray, base: int = 0):
        self.buf = buf
        self.base = base

    def write_u64(self, addr: int, value: int) -> None:
        off = addr - self.base
        if not 0 <= off <= len(self.buf) - 8:
            raise WriteFailure(f"address {addr:#x} outside the image")
        self.buf[off:off + 8] = struct.pack("<Q", value)

    def read_u64(self, addr: int) -> int:
        off = addr - self.base
        return struct.unpack_from("<Q", self.buf, off)[0]


def apply_relocations(image: MemoryImage, relocations: list[Relocation],
                      bases: tuple[int, int]) -> None:
    """Bind each shared-object GOT entry to the harness implementation:
    ``*(so_base + got_offset) = binary_base + resolved_vaddr``."""
    binary_base, so_base = bases
    for reloc in relocations:
        image.write_u64(so_base + reloc.so_got_offset,
                        binary_base + reloc.resolved_vaddr)


def bind_relocation_table(so_path, relocations: list[Relocation]) -> None:
    """Patch the compiled wrapped object's zeroed GOT-offset table with the
    offsets read back from its own relocation sections."""
    if not relocations:
        return
    image = elf.ElfFile(so_path)
    sym = image.find_symbol("__subst_got_offsets")
    if sym is None:
        raise ToolchainError(f"{so_path}: wrapped object lacks the shim table")
    if sym.size < 8 * len(relocations):
        raise ToolchainError(
            f"{so_path}: shim table too small for {len(relocations)} entries")
    offset = image.vaddr_to_offset(sym.value)
    with open(so_path, "r+b") as fh:
        fh.seek(offset)
        for reloc in relocations:
            fh.write(struct.pack("<Q", reloc.so_got_offset))


@dataclass(frozen=True)
class SubstitutionArtifacts:
    symbol: str
    patched_harness: Path
    wrapped_so: Path
    relocations: list[Relocation]
    unresolved: list[str]


def substitute(candidate_code: str, symbol: str, deps: str,
               harness_exe, level: OptLevel, cfg: ToolchainConfig,
               out_dir, *, so_name: str = "libdummy.so",
               slot: TrampolineSlot = TrampolineSlot()) -> SubstitutionArtifacts:
    """Full substitution for one candidate: wrap, compile, bind manual
    relocations, and patch a private copy of the harness.

    Raises SubstitutionUnsupported when the target is smaller than the
    prologue patch, and SymbolNotFoundInCode when the candidate does not
    define the target.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    harness_exe = Path(harness_exe)
    if elf.ElfFile(harness_exe).e_type != elf.ET_EXEC:
        raise ToolchainError(
            f"{harness_exe}: harness must be a non-PIE executable so symbol "
            f"addresses are load addresses")
    patch = emit_prologue_patch(slot)
    sym = locate_symbol(harness_exe, symbol)
    if sym.size < patch.length:
        raise SubstitutionUnsupported(
            f"{symbol} is {sym.size} bytes at {level.value}, smaller than "
            f"the {patch.length}-byte prologue patch")

    # Pass 1: compile without the relocation table to learn which externals
    # need manual binding (the shim's own libc imports resolve normally).
    probe_src = out_dir / "wrapped_probe.c"
    probe_src.write_text(wrap_function(candidate_code, symbol, deps,
                                       relocations=[], slot=slot))
    probe_so = out_dir / "wrapped_probe.so"
    ok, log = run_compiler(cfg, [probe_src], probe_so,
                           wrapped_so_cflags(cfg, level),
                           out_dir / "wrap_probe.log")
    if not ok:
        raise ToolchainError(
            f"wrapped probe build failed for {symbol}:\n{log}")
    relocations, unresolved = resolve_external_calls(probe_so, harness_exe)

    # Pass 2: compile with destination addresses embedded, then bind the
    # GOT offsets read back from the final link.
    wrapped_src = out_dir / "wrapped.c"
    wrapped_src.write_text(wrap_function(candidate_code, symbol, deps,
                                         relocations=relocations, slot=slot))
    wrapped_so = out_dir / so_name
    ok, log = run_compiler(cfg, [wrapped_src], wrapped_so,
                           wrapped_so_cflags(cfg, level),
                           out_dir / "wrap.log")
    if not ok:
        raise ToolchainError(f"wrapped build failed for {symbol}:\n{log}")
    final_relocs, _ = resolve_external_calls(wrapped_so, harness_exe)
    wanted = {r.symbol for r in relocations}
    final_relocs = [r for r in final_relocs if r.symbol in wanted]
    bind_relocation_table(wrapped_so, final_relocs)

    patched = apply_patch(harness_exe, sym, patch, out_dir / "harness")
    patched.chmod(0o755)
    return SubstitutionArtifacts(
        symbol=symbol,
        patched_harness=patched,
        wrapped_so=wrapped_so,
        relocations=final_relocs,
        unresolved=unresolved,
    )
