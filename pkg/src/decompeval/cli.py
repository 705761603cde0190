"""Pipeline orchestration and the stage-per-subcommand command line.

Each stage consumes and produces on-disk artifacts only, so any stage can
be rerun in isolation.  Exit statuses: 0 success, 1 stage failure, 2 bad
configuration, 3 platform not supported.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import adapters, coverage, judge as judge_mod, recompile as recompile_mod
from . import report as report_mod
from .corpus import (Manifest, OptLevel, build_dummy_library, build_harness,
                     compile_reference, load_manifest)
from .coverage import (STATUS_DIVERGENT, STATUS_EQUIVALENT,
                       STATUS_RECOMPILE_FAILED, STATUS_SUBSTITUTION_FAILED,
                       STATUS_UNSUPPORTED)
from .errors import (ConfigError, DecompEvalError, PlatformSkip, StageFailure,
                     SubstitutionUnsupported, SymbolNotFoundInCode,
                     ToolchainError)
from .substitute import substitute
from .toycorpus import generate_fixtures

ALL_STAGES = ["validate", "build", "decompile", "recompile", "substitute",
              "profile", "judge", "report"]

EXECUTION_STAGES = {"build", "recompile", "substitute", "profile"}


@dataclass
class RunConfig:
    manifest: Path
    decompilers: Path
    out_dir: Path
    stages: list = field(default_factory=lambda: list(ALL_STAGES))
    parallel: int = 1
    seed: int = 0
    k_factor: float = judge_mod.DEFAULT_K_FACTOR
    initial_rating: float = judge_mod.DEFAULT_INITIAL_RATING
    judge_endpoint: str = ""
    judge_model: str = ""
    mock_judge: bool = False
    resume: bool = False


def check_platform() -> None:
    if platform.system() != "Linux" or platform.machine() not in (
            "x86_64", "amd64"):
        raise PlatformSkip(
            f"execution stages need Linux x86-64, this host is "
            f"{platform.system()}/{platform.machine()}")


class Pipeline:
    """Shared state for one invocation: manifest, specs, derived run id."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        if not cfg.manifest.is_file():
            raise ConfigError(f"manifest not found: {cfg.manifest}")
        if not cfg.decompilers.is_file():
            raise ConfigError(f"decompiler spec file not found: "
                              f"{cfg.decompilers}")
        self.manifest = load_manifest(cfg.manifest)
        self.specs = adapters.load_decompiler_specs(cfg.decompilers)
        if not self.specs:
            raise ConfigError("no decompilers configured")
        self.out = cfg.out_dir
        self.corpus_hash = self.manifest.corpus_hash()
        self.run_id = hashlib.sha256("\n".join(
            [self.corpus_hash, str(cfg.seed),
             self.manifest.toolchain.compiler_command]
            + sorted(s.id for s in self.specs)).encode()).hexdigest()[:16]

    # --- artifact paths ---

    def level_dir(self, symbol: str, level: OptLevel) -> Path:
        return self.out / symbol / level.value

    def cand_dir(self, symbol: str, level: OptLevel, did: str) -> Path:
        return self.level_dir(symbol, level) / did

    def harness_dir(self, harness_id: str, level: OptLevel) -> Path:
        return self.out / "_harness" / harness_id / level.value

    def tasks(self):
        for rec in self.manifest.functions:
            for level in self.manifest.opt_levels:
                yield rec, level

    def _pmap(self, fn, items):
        items = list(items)
        if self.cfg.parallel <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.cfg.parallel) as pool:
            return list(pool.map(fn, items))

    # --- stage bookkeeping for --resume ---

    def _stage_marker_path(self) -> Path:
        return self.out / "stages.json"

    def _stage_done(self, stage: str) -> bool:
        path = self._stage_marker_path()
        if not path.is_file():
            return False
        body = json.loads(path.read_text())
        entry = body.get(stage)
        return bool(entry) and entry.get("run_id") == self.run_id

    def _mark_stage(self, stage: str) -> None:
        path = self._stage_marker_path()
        body = json.loads(path.read_text()) if path.is_file() else {}
        body[stage] = {"run_id": self.run_id, "corpus": self.corpus_hash}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")

    # --- stages ---

    def stage_validate(self) -> None:
        # manifest already parsed; confirm the toolchain is reachable by
        # compiling one reference
        rec = self.manifest.functions[0]
        level = self.manifest.opt_levels[0]
        probe_dir = self.out / "_validate"
        compile_reference(rec, level, self.manifest.toolchain, probe_dir)
        shutil.rmtree(probe_dir)

    def stage_build(self) -> None:
        cfg = self.manifest.toolchain
        dummy = build_dummy_library(cfg, self.out / "_dummy")
        for rec, level in self.tasks():
            compile_reference(rec, level, cfg,
                              self.level_dir(rec.symbol, level))
        for hid in sorted(self.manifest.harness_sources):
            for level in self.manifest.opt_levels:
                build_harness(self.manifest, hid, level, cfg,
                              self.harness_dir(hid, level), dummy)

    def stage_decompile(self) -> None:
        from .corpus import ReferenceArtifact
        by_id = {s.id: s for s in self.specs}
        for rec, level in self.tasks():
            ldir = self.level_dir(rec.symbol, level)
            so_path = ldir / "ref.so"
            if not so_path.is_file():
                raise StageFailure("decompile", str(so_path))
            artifact = ReferenceArtifact(rec.symbol, level, so_path,
                                         ldir / "build.log")
            produced = {}
            for spec in self.specs:
                cdir = self.cand_dir(rec.symbol, level, spec.id)
                cdir.mkdir(parents=True, exist_ok=True)
                meta = {"run_id": self.run_id, "decompiler": spec.id,
                        "symbol": rec.symbol, "level": level.value}
                try:
                    refined = None
                    if spec.refines:
                        refined = produced.get(spec.refines)
                        if refined is None and spec.refines in by_id:
                            raise StageFailure(
                                "decompile",
                                f"{spec.id} refines {spec.refines}, which "
                                f"produced nothing for {rec.symbol}")
                    cand = adapters.decompile(spec, artifact, rec.symbol,
                                              record=rec,
                                              refined_input=refined)
                    cand = adapters.postprocess(cand, spec.postprocess_rules)
                    (cdir / "candidate.c").write_text(cand.code)
                    meta["provenance"] = cand.provenance
                    produced[spec.id] = cand.code
                except DecompEvalError as exc:
                    meta["error"] = f"{type(exc).__name__}: {exc}"
                (cdir / "meta.json").write_text(
                    json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def _candidates(self):
        """Yield (record, level, spec, cand_dir, meta) for candidates that
        were actually produced."""
        for rec, level in self.tasks():
            for spec in self.specs:
                cdir = self.cand_dir(rec.symbol, level, spec.id)
                meta_path = cdir / "meta.json"
                if not meta_path.is_file():
                    raise StageFailure("recompile", str(meta_path))
                meta = json.loads(meta_path.read_text())
                if "error" in meta:
                    continue
                yield rec, level, spec, cdir, meta

    def stage_recompile(self) -> None:
        cfg = self.manifest.toolchain

        def one(task):
            rec, level, spec, cdir, meta = task
            cand = adapters.DecompiledCandidate(
                decompiler_id=spec.id, symbol=rec.symbol, level=level,
                code=(cdir / "candidate.c").read_text(),
                provenance=meta["provenance"])
            recompile_mod.recompile(cand, rec, level, cfg, cdir)

        self._pmap(one, self._candidates())

    def stage_substitute(self) -> None:
        cfg = self.manifest.toolchain
        statuses = {}

        # reference splices first: one per (symbol, level), reused by every
        # candidate comparison at that cell
        ref_ok = {}
        for rec, level in self.tasks():
            ldir = self.level_dir(rec.symbol, level)
            hdir = self.harness_dir(rec.harness_id, level)
            try:
                substitute(rec.source_text(), rec.symbol, rec.deps_text(),
                           hdir / "harness", level, cfg, ldir / "_ref")
                ref_ok[(rec.symbol, level)] = True
            except SubstitutionUnsupported:
                ref_ok[(rec.symbol, level)] = False

        def one(task):
            rec, level, spec, cdir, meta = task
            key = f"{spec.id}|{rec.symbol}|{level.value}"
            outcome = json.loads((cdir / "outcome.json").read_text())
            if not outcome["success"]:
                return key, STATUS_RECOMPILE_FAILED
            if not ref_ok[(rec.symbol, level)]:
                return key, STATUS_UNSUPPORTED
            hdir = self.harness_dir(rec.harness_id, level)
            try:
                substitute((cdir / "candidate.c").read_text(), rec.symbol,
                           rec.deps_text(), hdir / "harness", level, cfg,
                           cdir / "sub")
            except SubstitutionUnsupported:
                return key, STATUS_UNSUPPORTED
            except (SymbolNotFoundInCode, ToolchainError, DecompEvalError):
                return key, STATUS_SUBSTITUTION_FAILED
            return key, None  # spliced; status decided by profiling

        for key, status in self._pmap(one, self._candidates()):
            if status is not None:
                statuses[key] = status
        (self.out / "statuses.json").write_text(json.dumps(
            {"run_id": self.run_id, "statuses": statuses},
            indent=2, sort_keys=True) + "\n")

    def stage_profile(self) -> None:
        cfg = self.manifest.toolchain
        body = json.loads((self.out / "statuses.json").read_text())
        statuses = body["statuses"]

        profiles = {}
        for rec, level in self.tasks():
            ref_dir = self.level_dir(rec.symbol, level) / "_ref"
            if not (ref_dir / "harness").is_file():
                continue
            hdir = self.harness_dir(rec.harness_id, level)
            prof = coverage.run_profile(
                ref_dir / "harness", hdir, rec.seed_files(),
                run_id=self.run_id, out_dir=ref_dir, lib_dir=ref_dir,
                cfg=cfg)
            coverage.write_profile(prof, ref_dir / "profile.txt")
            profiles[(rec.symbol, level)] = prof

        def one(task):
            rec, level, spec, cdir, meta = task
            key = f"{spec.id}|{rec.symbol}|{level.value}"
            if key in statuses:
                return key, statuses[key]
            sub_dir = cdir / "sub"
            hdir = self.harness_dir(rec.harness_id, level)
            prof = coverage.run_profile(
                sub_dir / "harness", hdir, rec.seed_files(),
                run_id=self.run_id, out_dir=sub_dir, lib_dir=sub_dir,
                cfg=cfg)
            coverage.write_profile(prof, cdir / "profile.txt")
            verdict = coverage.diff_profiles(profiles[(rec.symbol, level)],
                                             prof)
            (cdir / "verdict.json").write_text(json.dumps({
                "run_id": self.run_id,
                "equivalent": verdict.equivalent,
                "reason": verdict.reason,
                "divergent_sites": verdict.total_divergent_sites,
            }, indent=2, sort_keys=True) + "\n")
            return key, (STATUS_EQUIVALENT if verdict.equivalent
                         else STATUS_DIVERGENT)

        for key, status in self._pmap(one, self._candidates()):
            statuses[key] = status
        (self.out / "statuses.json").write_text(json.dumps(
            {"run_id": self.run_id, "statuses": statuses},
            indent=2, sort_keys=True) + "\n")

    def stage_judge(self) -> None:
        state = judge_mod.EloState(k_factor=self.cfg.k_factor,
                                   initial_rating=self.cfg.initial_rating,
                                   rng_seed=self.cfg.seed)
        references = {}
        outputs = {}
        functions = []
        for rec, level in self.tasks():
            fn = f"{rec.symbol}@{level.value}"
            functions.append(fn)
            references[fn] = rec.source_text()
            per_fn = {}
            for spec in self.specs:
                cand = self.cand_dir(rec.symbol, level, spec.id) / "candidate.c"
                if cand.is_file():
                    per_fn[spec.id] = cand.read_text()
            outputs[fn] = per_fn
        for spec in self.specs:
            state.register(spec.id)

        if self.cfg.mock_judge or not self.cfg.judge_endpoint:
            judge_fn = judge_mod.MockJudge()
            model = judge_fn.model_id
        else:
            model = self.cfg.judge_model
            url = self.cfg.judge_endpoint
            gen = adapters.GenerationParams()

            def judge_fn(request):
                body = dict(request)
                body.setdefault("model", model)
                body.setdefault("max_tokens", gen.max_tokens)
                body.setdefault("temperature", gen.temperature)
                body.setdefault("top_p", gen.top_p)
                return adapters.post_chat(
                    url, body, who="judge",
                    auth_env_var="DECOMPEVAL_JUDGE_TOKEN")

        log = []
        judge_mod.run_arena(state, functions, references, outputs, judge_fn,
                            judge_model=model, log=log)

        agreement = {}
        for criterion in judge_mod.Criterion:
            first = [e["order_views"]["first"][criterion.label] for e in log]
            second = [e["order_views"]["second"][criterion.label]
                      for e in log]
            if not first:
                continue
            rec = judge_mod.agreement_for(criterion.label, first, second)
            agreement[criterion.label] = {
                "n_items": rec.n_items, "kappa": rec.kappa,
                "complete_agreement": rec.complete_agreement}

        (self.out / "judge.json").write_text(json.dumps({
            "run_id": self.run_id,
            "judge_model": model,
            "k_factor": state.k_factor,
            "initial_rating": state.initial_rating,
            "seed": self.cfg.seed,
            "ratings": {d: round(r, 6) for d, r in sorted(state.ratings.items())},
            "criterion_ratings": {
                c: {d: round(r, 6) for d, r in sorted(table.items())}
                for c, table in sorted(state.criterion_ratings.items())},
            "log": log,
            "agreement": agreement,
        }, indent=2, sort_keys=True) + "\n")

    def stage_report(self) -> None:
        levels = [lv.value for lv in self.manifest.opt_levels]
        dids = [s.id for s in self.specs]

        rsr_table = {d: {} for d in dids}
        error_table = {d: {} for d in dids}
        for rec, level in self.tasks():
            for spec in self.specs:
                cdir = self.cand_dir(rec.symbol, level, spec.id)
                path = cdir / "outcome.json"
                if not path.is_file():
                    continue
                body = json.loads(path.read_text())
                cell = rsr_table[spec.id].setdefault(level.value, [0, 0])
                cell[1] += 1
                cell[0] += int(body["success"])
                for category, count in body.get("categories", {}).items():
                    row = error_table[spec.id]
                    row[category] = row.get(category, 0) + count
        for did in dids:
            for level in levels:
                cell = rsr_table[did].get(level)
                rsr_table[did][level] = (report_mod.ABSENT if not cell
                                         else cell[0] / cell[1])

        statuses_body = json.loads((self.out / "statuses.json").read_text())
        statuses = statuses_body["statuses"]
        cer_table = {d: {} for d in dids}
        unsupported_table = {d: {} for d in dids}
        for did in dids:
            for level in levels:
                relevant = [s for k, s in statuses.items()
                            if k.startswith(f"{did}|") and
                            k.endswith(f"|{level}")]
                considered = [s for s in relevant if s != STATUS_UNSUPPORTED]
                unsupported_table[did][level] = \
                    len(relevant) - len(considered)
                if not considered:
                    cer_table[did][level] = report_mod.ABSENT
                else:
                    cer_table[did][level] = (
                        sum(1 for s in considered if s == STATUS_EQUIVALENT)
                        / len(considered))

        elo_state = None
        agreement_records = []
        input_run_ids = {"statuses.json": statuses_body["run_id"]}
        judge_path = self.out / "judge.json"
        if judge_path.is_file():
            body = json.loads(judge_path.read_text())
            input_run_ids["judge.json"] = body["run_id"]
            elo_state = judge_mod.EloState(
                k_factor=body["k_factor"],
                initial_rating=body["initial_rating"],
                rng_seed=body["seed"],
                ratings=dict(body["ratings"]),
                criterion_ratings={c: dict(t) for c, t in
                                   body["criterion_ratings"].items()})
            for criterion, row in body["agreement"].items():
                agreement_records.append(judge_mod.AgreementRecord(
                    criterion=criterion, n_items=row["n_items"],
                    kappa=row["kappa"],
                    complete_agreement=row["complete_agreement"]))

        rep = report_mod.aggregate(
            run_id=self.run_id,
            corpus_hash=self.corpus_hash,
            toolchain=self.manifest.toolchain.compiler_command,
            seed=self.cfg.seed,
            levels=levels,
            rsr_table=rsr_table,
            cer_table=cer_table,
            unsupported_table=unsupported_table,
            elo_state=elo_state,
            error_table=error_table,
            agreement_records=agreement_records,
            input_run_ids=input_run_ids,
        )
        (self.out / "report.json").write_text(report_mod.render(rep, "json"))
        (self.out / "report.csv").write_text(report_mod.render(rep, "csv"))
        (self.out / "report.md").write_text(
            report_mod.render(rep, "markdown"))
        (self.out / "radar.json").write_text(json.dumps(
            report_mod.radar_export(rep), indent=2, sort_keys=True) + "\n")

    def run_stage(self, stage: str) -> None:
        if stage in EXECUTION_STAGES:
            check_platform()
        handler = getattr(self, f"stage_{stage}")
        try:
            handler()
        except (PlatformSkip, StageFailure, ConfigError):
            raise
        except (DecompEvalError, OSError, KeyError,
                json.JSONDecodeError) as exc:
            raise StageFailure(stage, str(exc)) from exc
        self._mark_stage(stage)

    def run(self) -> None:
        for stage in self.cfg.stages:
            if self.cfg.resume and self._stage_done(stage):
                continue
            self.run_stage(stage)


# --- command line ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decompeval",
        description="Desk-scale decompiler evaluation: recompilation, "
                    "side-effect consistency, and code-quality ratings.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--manifest", type=Path,
                       help="corpus manifest JSON (defaults to a copy of "
                            "the built-in corpus in the output directory)")
        p.add_argument("--decompilers", type=Path, required=True,
                       help="decompiler spec JSON file")
        p.add_argument("--out", type=Path, required=True,
                       help="run output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--parallel", type=int, default=1)
        p.add_argument("--k-factor", type=float,
                       default=judge_mod.DEFAULT_K_FACTOR)
        p.add_argument("--initial-rating", type=float,
                       default=judge_mod.DEFAULT_INITIAL_RATING)
        p.add_argument("--judge-endpoint", default="")
        p.add_argument("--judge-model", default="")
        p.add_argument("--mock-judge", action="store_true")

    for stage in ALL_STAGES:
        p = sub.add_parser(stage, help=f"run only the {stage} stage")
        common(p)

    p = sub.add_parser("run", help="run the full pipeline")
    common(p)
    p.add_argument("--stages", default=",".join(ALL_STAGES),
                   help="comma-separated subset of stages, in order")
    p.add_argument("--resume", action="store_true",
                   help="skip stages already recorded for this run id")
    return parser


def config_from_args(args) -> RunConfig:
    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = args.manifest
    if manifest is None:
        manifest = generate_fixtures(out_dir / "corpus")
    stages = list(ALL_STAGES)
    if getattr(args, "stages", None):
        stages = [s.strip() for s in args.stages.split(",") if s.strip()]
        unknown = [s for s in stages if s not in ALL_STAGES]
        if unknown:
            raise ConfigError(f"unknown stages: {', '.join(unknown)}")
    if args.parallel < 1:
        raise ConfigError("--parallel must be at least 1")
    return RunConfig(
        manifest=manifest,
        decompilers=args.decompilers,
        out_dir=out_dir,
        stages=stages,
        parallel=args.parallel,
        seed=args.seed,
        k_factor=args.k_factor,
        initial_rating=args.initial_rating,
        judge_endpoint=args.judge_endpoint,
        judge_model=args.judge_model,
        mock_judge=args.mock_judge,
        resume=getattr(args, "resume", False),
    )


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        pipeline = Pipeline(cfg)
        if args.command == "run":
            if any(s in EXECUTION_STAGES for s in cfg.stages):
                check_platform()
            pipeline.run()
        else:
            pipeline.run_stage(args.command)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except PlatformSkip as exc:
        print(f"platform skip: {exc}", file=sys.stderr)
        return 3
    except StageFailure as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 1
    except DecompEvalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
