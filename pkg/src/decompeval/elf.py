"""Minimal ELF64 x86-64 reader.

Covers exactly what the substitution machinery needs: symbol tables,
dynamic symbol tables, section/program headers, dynamic entries, and the
GOT relocations of shared objects.  Read-only; patching happens at file
offsets computed from here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import MalformedBinary

ELF_MAGIC = b"\x7fELF"

ET_EXEC = 2
ET_DYN = 3

SHT_SYMTAB = 2
SHT_STRTAB = 3
SHT_RELA = 4
SHT_DYNSYM = 11

SHN_UNDEF = 0

PT_LOAD = 1
PT_DYNAMIC = 2

DT_NEEDED = 1

STB_LOCAL = 0
STB_GLOBAL = 1
STB_WEAK = 2

STT_NOTYPE = 0
STT_OBJECT = 1
STT_FUNC = 2

R_X86_64_GLOB_DAT = 6
R_X86_64_JUMP_SLOT = 7


@dataclass(frozen=True)
class Section:
    name: str
    sh_type: int
    flags: int
    addr: int
    offset: int
    size: int
    link: int
    entsize: int


@dataclass(frozen=True)
class Segment:
    p_type: int
    flags: int
    offset: int
    vaddr: int
    filesz: int
    memsz: int


@dataclass(frozen=True)
class Symbol:
    name: str
    value: int
    size: int
    bind: int
    sym_type: int
    visibility: int
    shndx: int

    @property
    def defined(self) -> bool:
        return self.shndx != SHN_UNDEF


@dataclass(frozen=True)
class Rela:
    offset: int
    r_type: int
    symbol: str
    addend: int


class ElfFile:
    """Parsed view over one ELF64 little-endian file."""

    def __init__(self, path):
        self.path = str(path)
        with open(path, "rb") as fh:
            self.data = fh.read()
        if self.data[:4] != ELF_MAGIC:
            raise MalformedBinary(f"{self.path}: not an ELF file")
        ei_class, ei_data = self.data[4], self.data[5]
        if ei_class != 2 or ei_data != 1:
            raise MalformedBinary(
                f"{self.path}: only ELF64 little-endian is supported")
        (self.e_type, self.e_machine, _ver, self.e_entry, e_phoff, e_shoff,
         _flags, _ehsize, phentsize, phnum, shentsize, shnum, shstrndx,
         ) = struct.unpack_from("<HHIQQQIHHHHHH", self.data, 16)
        try:
            self.segments = self._read_segments(e_phoff, phentsize, phnum)
            self.sections = self._read_sections(e_shoff, shentsize, shnum,
                                                shstrndx)
        except (struct.error, IndexError) as exc:
            raise MalformedBinary(f"{self.path}: truncated: {exc}") from exc
        self._symtab = None
        self._dynsym = None

    # --- headers ---

    def _read_segments(self, off, entsize, count):
        segs = []
        for i in range(count):
            (p_type, flags, p_off, vaddr, _paddr, filesz, memsz, _align,
             ) = struct.unpack_from("<IIQQQQQQ", self.data, off + i * entsize)
            segs.append(Segment(p_type, flags, p_off, vaddr, filesz, memsz))
        return segs

    def _read_sections(self, off, entsize, count, shstrndx):
        raw = []
        for i in range(count):
            raw.append(struct.unpack_from("<IIQQQQIIQQ", self.data,
                                          off + i * entsize))
        if shstrndx >= count:
            raise MalformedBinary(f"{self.path}: bad section string table")
        str_off = raw[shstrndx][4]
        sections = []
        for (name_off, sh_type, flags, addr, offset, size, link, _info,
             _align, entsz) in raw:
            sections.append(Section(self._cstr(str_off + name_off), sh_type,
                                    flags, addr, offset, size, link, entsz))
        return sections

    def _cstr(self, offset: int) -> str:
        end = self.data.index(b"\x00", offset)
        return self.data[offset:end].decode("utf-8", "replace")

    def section(self, name: str) -> Section | None:
        for s in self.sections:
            if s.name == name:
                return s
        return None

    # --- symbols ---

    def _read_symbols(self, sec: Section) -> list[Symbol]:
        strtab = self.sections[sec.link]
        syms = []
        for off in range(sec.offset, sec.offset + sec.size, 24):
            name_off, info, other, shndx, value, size = struct.unpack_from(
                "<IBBHQQ", self.data, off)
            syms.append(Symbol(
                name=self._cstr(strtab.offset + name_off),
                value=value, size=size,
                bind=info >> 4, sym_type=info & 0xF,
                visibility=other & 0x3, shndx=shndx))
        return syms

    @property
    def symtab(self) -> list[Symbol]:
        if self._symtab is None:
            sec = self.section(".symtab")
            self._symtab = self._read_symbols(sec) if sec else []
        return self._symtab

    @property
    def dynsym(self) -> list[Symbol]:
        if self._dynsym is None:
            sec = self.section(".dynsym")
            self._dynsym = self._read_symbols(sec) if sec else []
        return self._dynsym

    def find_symbol(self, name: str) -> Symbol | None:
        """Best definition of ``name``: .symtab first, then .dynsym."""
        for table in (self.symtab, self.dynsym):
            for sym in table:
                if sym.name == name and sym.defined:
                    return sym
        return None

    def dynsym_defines(self, name: str) -> bool:
        return any(s.name == name and s.defined for s in self.dynsym)

    def undefined_dynsyms(self) -> list[Symbol]:
        return [s for s in self.dynsym if s.name and not s.defined]

    # --- relocations ---

    def got_relocations(self) -> list[Rela]:
        """JUMP_SLOT and GLOB_DAT entries from every RELA section."""
        out = []
        for sec in self.sections:
            if sec.sh_type != SHT_RELA:
                continue
            symtab_sec = self.sections[sec.link]
            strtab = self.sections[symtab_sec.link]
            for off in range(sec.offset, sec.offset + sec.size, 24):
                r_offset, r_info, addend = struct.unpack_from(
                    "<QQq", self.data, off)
                r_type = r_info & 0xFFFFFFFF
                if r_type not in (R_X86_64_JUMP_SLOT, R_X86_64_GLOB_DAT):
                    continue
                sym_idx = r_info >> 32
                name_off, = struct.unpack_from(
                    "<I", self.data, symtab_sec.offset + sym_idx * 24)
                out.append(Rela(r_offset, r_type,
                                self._cstr(strtab.offset + name_off), addend))
        return out

    # --- dynamic section ---

    def needed_libraries(self) -> list[str]:
        dyn = self.section(".dynamic")
        strtab = self.section(".dynstr")
        if dyn is None or strtab is None:
            return []
        names = []
        for off in range(dyn.offset, dyn.offset + dyn.size, 16):
            tag, value = struct.unpack_from("<qQ", self.data, off)
            if tag == 0:
                break
            if tag == DT_NEEDED:
                names.append(self._cstr(strtab.offset + value))
        return names

    # --- address arithmetic ---

    def vaddr_to_offset(self, vaddr: int) -> int:
        for seg in self.segments:
            if seg.p_type == PT_LOAD and seg.vaddr <= vaddr < seg.vaddr + seg.filesz:
                return seg.offset + (vaddr - seg.vaddr)
        raise MalformedBinary(
            f"{self.path}: vaddr {vaddr:#x} not in any LOAD segment")
