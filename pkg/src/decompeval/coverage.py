"""Branch-level side-effect profiling and equivalence checking.

The harness executable is built with arc profiling; running it over the
seed set accumulates counters, and the gcov JSON export is folded into a
map of (module, site) -> execution/taken/not-taken counts.  Two profiles
are equivalent only if the maps match exactly, the printed output matches,
and neither run crashed.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import ToolchainConfig
from .errors import ParseError, SeedMismatch, EmptyGroup, ToolchainError

PROFILE_FORMAT_VERSION = 1

# Channels the profile format reserves for later comparison dimensions.
# Only the first two are populated today.
KNOWN_CHANNELS = ("branches", "stdout", "stderr", "locals", "cmp_operands")


@dataclass(frozen=True)
class BranchSite:
    module_id: str
    site_index: int  # line * 1000 + pair index; 999 marks the line-count site
    kind: str  # "branch" or "line"


@dataclass(frozen=True)
class BranchStats:
    executed: int
    taken_true: int
    taken_false: int

    def as_tuple(self) -> tuple:
        return (self.executed, self.taken_true, self.taken_false)


@dataclass
class CoverageProfile:
    run_id: str
    seed_set_hash: str
    crashed: bool
    exit_codes: list[int]
    stdout_digest: str
    sites: dict  # BranchSite -> BranchStats

    def site_map(self) -> dict:
        return {(s.module_id, s.site_index, s.kind): v.as_tuple()
                for s, v in self.sites.items()}


@dataclass(frozen=True)
class EquivalenceVerdict:
    equivalent: bool
    reason: str
    first_divergence: BranchSite | None = None
    total_divergent_sites: int = 0


def seed_set_digest(seed_files: list[Path]) -> str:
    h = hashlib.sha256()
    for seed in sorted(seed_files):
        h.update(seed.name.encode())
        h.update(b"\x00")
        h.update(seed.read_bytes())
        h.update(b"\x01")
    return h.hexdigest()


def run_profile(exe, build_dir, seed_files: list[Path], run_id: str,
                out_dir, *, lib_dir=None, cfg: ToolchainConfig = None,
                timeout: float = 30.0) -> CoverageProfile:
    """Execute the harness once per seed (sorted order) and collect the
    accumulated branch counters.

    Counter dumps are redirected into ``out_dir`` via the profiler's
    output-path environment variable, so concurrent runs of the same
    executable never clobber each other.  ``lib_dir`` points the loader at
    the library directory whose libdummy.so should satisfy the link (the
    placeholder for reference runs, the wrapped candidate otherwise).
    """
    exe = Path(exe).resolve()
    build_dir = Path(build_dir)
    out_dir = Path(out_dir)
    prof_dir = out_dir / "prof"
    if prof_dir.exists():
        shutil.rmtree(prof_dir)
    prof_dir.mkdir(parents=True)
    cfg = cfg or ToolchainConfig()

    env = dict(os.environ)
    env["GCOV_PREFIX"] = str(prof_dir)
    env["GCOV_PREFIX_STRIP"] = "99"
    if lib_dir is not None:
        env["LD_LIBRARY_PATH"] = str(Path(lib_dir).resolve())

    exit_codes = []
    stdout_hash = hashlib.sha256()
    log_lines = []
    for seed in sorted(seed_files):
        try:
            proc = subprocess.run([str(exe), str(seed)], env=env,
                                  capture_output=True, timeout=timeout)
            rc = proc.returncode
            stdout_hash.update(proc.stdout)
            stdout_hash.update(b"\x00")
        except subprocess.TimeoutExpired:
            rc = -1000  # sentinel: the run was killed, treat as a crash
        exit_codes.append(rc)
        log_lines.append(f"{seed.name} exit={rc}")
    (out_dir / "runs.log").write_text("\n".join(log_lines) + "\n")

    crashed = any(rc != 0 for rc in exit_codes)
    sites = _collect_counters(build_dir, prof_dir, cfg) if not crashed else {}
    return CoverageProfile(
        run_id=run_id,
        seed_set_hash=seed_set_digest(seed_files),
        crashed=crashed,
        exit_codes=exit_codes,
        stdout_digest=stdout_hash.hexdigest(),
        sites=sites,
    )


def _collect_counters(build_dir: Path, prof_dir: Path,
                      cfg: ToolchainConfig) -> dict:
    """Pair each counter file with its graph file and fold the exported
    JSON into the site map."""
    gcda_files = sorted(prof_dir.glob("*.gcda"))
    if not gcda_files:
        raise ToolchainError(
            f"no counter files appeared under {prof_dir}; was the harness "
            f"built with --coverage?")
    sites = {}
    for gcda in gcda_files:
        gcno = build_dir / (gcda.stem + ".gcno")
        if not gcno.is_file():
            raise ToolchainError(f"missing graph file {gcno}")
        shutil.copy2(gcno, prof_dir / gcno.name)
        body = _export_json(gcda, prof_dir, cfg)
        _fold_module(body, sites)
    return sites


def _export_json(gcda: Path, cwd: Path, cfg: ToolchainConfig) -> dict:
    proc = subprocess.run(
        [cfg.gcov_command, "-b", "-t", "--json-format", gcda.name],
        cwd=cwd, capture_output=True, text=True, timeout=60)
    if proc.returncode != 0:
        raise ToolchainError(
            f"coverage export failed for {gcda.name}: {proc.stderr}")
    try:
        return json.loads(proc.stdout)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"bad coverage JSON for {gcda.name}: {exc}") from exc


def _fold_module(body: dict, sites: dict) -> None:
    for file_entry in body.get("files", []):
        module_id = os.path.basename(file_entry["file"])
        for line in file_entry.get("lines", []):
            line_no = line["line_number"]
            sites[BranchSite(module_id, line_no * 1000 + 999, "line")] = \
                BranchStats(line["count"], 0, 0)
            branches = line.get("branches", [])
            # conditionals export taken-arm counters in pairs; the
            # fallthrough arm is the not-taken direction
            for pair_idx in range(len(branches) // 2):
                first = branches[2 * pair_idx]
                second = branches[2 * pair_idx + 1]
                if first.get("fallthrough"):
                    not_taken, taken = first["count"], second["count"]
                else:
                    taken, not_taken = first["count"], second["count"]
                site = BranchSite(module_id, line_no * 1000 + pair_idx,
                                  "branch")
                sites[site] = BranchStats(taken + not_taken, taken, not_taken)


# --- serialization ---

def write_profile(profile: CoverageProfile, path) -> Path:
    path = Path(path)
    lines = [
        f"# side-effect profile v{PROFILE_FORMAT_VERSION}",
        f"run_id {profile.run_id}",
        f"seed_set {profile.seed_set_hash}",
        f"crashed {int(profile.crashed)}",
        f"exit_codes {','.join(str(c) for c in profile.exit_codes)}",
        f"stdout {profile.stdout_digest}",
        "channels branches,stdout",
    ]
    ordered = sorted(profile.sites.items(),
                     key=lambda kv: (kv[0].module_id, kv[0].site_index))
    for site, stats in ordered:
        lines.append(f"{site.module_id} {site.site_index} {site.kind} "
                     f"{stats.executed} {stats.taken_true} "
                     f"{stats.taken_false}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_profile(path) -> CoverageProfile:
    path = Path(path)
    header = {}
    sites = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] in ("run_id", "seed_set", "crashed", "exit_codes",
                        "stdout", "channels"):
            header[parts[0]] = parts[1] if len(parts) > 1 else ""
            continue
        if len(parts) != 6:
            raise ParseError(f"{path}: bad profile line {raw!r}")
        module_id, site_index, kind, executed, true_n, false_n = parts
        sites[BranchSite(module_id, int(site_index), kind)] = BranchStats(
            int(executed), int(true_n), int(false_n))
    try:
        exit_codes = [int(c) for c in header["exit_codes"].split(",") if c]
        return CoverageProfile(
            run_id=header["run_id"],
            seed_set_hash=header["seed_set"],
            crashed=bool(int(header["crashed"])),
            exit_codes=exit_codes,
            stdout_digest=header["stdout"],
            sites=sites,
        )
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: incomplete profile header: {exc}") from exc


# --- comparison ---

def diff_profiles(reference: CoverageProfile,
                  candidate: CoverageProfile) -> EquivalenceVerdict:
    """Exact comparison: any differing counter, differing printed output,
    or a crashed candidate run makes the pair non-equivalent."""
    if reference.seed_set_hash != candidate.seed_set_hash:
        raise SeedMismatch(
            "profiles were collected over different seed sets")
    if candidate.crashed:
        return EquivalenceVerdict(False, "candidate run crashed")
    if reference.crashed:
        return EquivalenceVerdict(False, "reference run crashed")

    ref_map = reference.site_map()
    cand_map = candidate.site_map()
    divergent = []
    for key in sorted(set(ref_map) | set(cand_map)):
        if ref_map.get(key) != cand_map.get(key):
            divergent.append(key)
    if divergent:
        module_id, site_index, kind = divergent[0]
        return EquivalenceVerdict(
            False, "branch counters diverge",
            first_divergence=BranchSite(module_id, site_index, kind),
            total_divergent_sites=len(divergent))
    if reference.stdout_digest != candidate.stdout_digest:
        return EquivalenceVerdict(False, "printed output differs")
    return EquivalenceVerdict(True, "profiles match")


# --- aggregation ---

# Per-candidate outcome markers feeding the consistency rate.  Pipeline
# failures count against the rate; only targets the splice mechanism cannot
# host at all leave the denominator.
STATUS_EQUIVALENT = "equivalent"
STATUS_DIVERGENT = "divergent"
STATUS_RECOMPILE_FAILED = "recompile_failed"
STATUS_SUBSTITUTION_FAILED = "substitution_failed"
STATUS_UNSUPPORTED = "unsupported"

FAILURE_STATUSES = (STATUS_DIVERGENT, STATUS_RECOMPILE_FAILED,
                    STATUS_SUBSTITUTION_FAILED)


def compute_cer(statuses: dict, group) -> float:
    """Share of candidates in ``group`` whose side effects match the
    reference, over all candidates that could be spliced and checked.

    ``statuses`` maps (decompiler_id, symbol, level) to a status marker;
    ``group`` is a (decompiler_id, level) pair.
    """
    decompiler_id, level = group
    relevant = []
    for (did, _symbol, lvl), status in statuses.items():
        if did == decompiler_id and lvl == level:
            relevant.append(status)
    considered = [s for s in relevant if s != STATUS_UNSUPPORTED]
    for status in considered:
        if status not in (STATUS_EQUIVALENT,) + FAILURE_STATUSES:
            raise ParseError(f"unknown consistency status {status!r}")
    if not considered:
        raise EmptyGroup(f"no checkable candidates for {group}")
    hits = sum(1 for s in considered if s == STATUS_EQUIVALENT)
    return hits / len(considered)
