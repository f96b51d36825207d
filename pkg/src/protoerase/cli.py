"""Command-line pipeline: world -> bank -> records -> reports.

Commands compose through files only (world.json, bank.json, records.jsonl,
report files); there is no hidden state, so every stage can be rerun and
diffed independently. One JSON config document drives everything, with
PROTO_ERASE_* environment overrides; --print-config emits the fully
resolved document for audit.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import erasure, evalkit, guidance, protolab
from .errors import CorruptFileError, InvalidConfigError, ProtoEraseError, VersionMismatchError
from .parallel import pmap
from .protolab import BANK_FORMAT_VERSION
from .rng import derive_seed
from .semworld import (
    Prompt,
    World,
    WorldConfig,
    build_world,
    load_world,
    sample_concept_prompts,
    sample_neutral_prompts,
    save_world,
)

ENV_PREFIX = "PROTO_ERASE_"


@dataclass(frozen=True)
class EvalSettings:
    n_prompts: int = 100
    n_seeds: int = 1
    seed: int = 0
    prompts: str = "concept"  # concept | neutral | mixed


@dataclass(frozen=True)
class Paths:
    world: str = "world.json"
    bank: str = "bank.json"
    records: str = "records.jsonl"
    reports: str = "reports"
    calibration: str = "calibration.json"


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=lambda: WorldConfig(seed=0))
    extra_concepts: tuple[tuple[str, int], ...] = ()
    pipeline: protolab.PipelineConfig = field(default_factory=protolab.PipelineConfig)
    guidance: guidance.GuidanceConfig = field(default_factory=guidance.GuidanceConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    paths: Paths = field(default_factory=Paths)
    # False when neither the config nor the environment named a world seed;
    # building a brand-new world then requires one explicitly
    seed_explicit: bool = True

    def to_dict(self) -> dict:
        d = {
            "world": asdict(self.world),
            "extra_concepts": [list(x) for x in self.extra_concepts],
            "pipeline": asdict(self.pipeline),
            "guidance": asdict(self.guidance),
            "eval": asdict(self.eval),
            "paths": asdict(self.paths),
        }
        return d


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _apply_env(doc: dict) -> dict:
    """PROTO_ERASE_<SECTION>_<FIELD>=json-value overrides doc[section][field]."""
    for key, value in os.environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        section, _, fieldname = rest.partition("_")
        if not fieldname:
            continue
        doc.setdefault(section, {})
        if isinstance(doc[section], dict):
            doc[section][fieldname] = _coerce(value)
    return doc


def load_config(path: str | None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CorruptFileError(f"cannot read config {path}: {e}") from e
    doc = _apply_env(doc)

    def section(name: str, cls) -> dict:
        sec = doc.get(name, {})
        if not isinstance(sec, dict):
            raise InvalidConfigError(f"config section {name!r} must be an object")
        # keys match dataclass fields case-insensitively (env vars arrive lowercased)
        by_lower = {f.lower(): f for f in cls.__dataclass_fields__}
        out = {}
        for key, value in sec.items():
            target = by_lower.get(str(key).lower())
            if target is None:
                raise InvalidConfigError(f"unknown key {key!r} in config section {name!r}")
            out[target] = value
        return out

    try:
        world_section = section("world", WorldConfig)
        seed_explicit = "seed" in world_section
        world = WorldConfig(**{"seed": 0, **world_section})
        extra = tuple((str(n), int(k)) for n, k in doc.get("extra_concepts", []))
        pipeline = protolab.PipelineConfig(**section("pipeline", protolab.PipelineConfig))
        gcfg = guidance.GuidanceConfig(**section("guidance", guidance.GuidanceConfig))
        ev = EvalSettings(**section("eval", EvalSettings))
        paths = Paths(**section("paths", Paths))
    except TypeError as e:
        raise InvalidConfigError(f"malformed config: {e}") from e
    return RunConfig(
        world=world, extra_concepts=extra, pipeline=pipeline,
        guidance=gcfg, eval=ev, paths=paths, seed_explicit=seed_explicit,
    )


def _ensure_world(cfg: RunConfig) -> World:
    path = Path(cfg.paths.world)
    if path.exists():
        world = load_world(path)
        if world.config != cfg.world and cfg.seed_explicit:
            raise InvalidConfigError(
                f"{path} was built from a different world config; delete it or fix the config"
            )
        return world
    if not cfg.seed_explicit:
        raise InvalidConfigError(
            f"no world file at {path} and no world.seed configured; "
            "set world.seed (config or PROTO_ERASE_WORLD_SEED) to build one"
        )
    world = build_world(cfg.world, cfg.extra_concepts)
    save_world(world, path)
    return world


def _selected_concepts(world: World, names: list[str] | None):
    if not names:
        return list(world.concepts.values())
    out = []
    for n in names:
        if n not in world.concepts:
            raise InvalidConfigError(f"world has no concept {n!r}")
        out.append(world.concepts[n])
    return out


def _load_calibration(cfg: RunConfig) -> dict | None:
    path = Path(cfg.paths.calibration)
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"cannot read calibration {path}: {e}") from e


def _resolved_tau(cfg: RunConfig, explicit: float | None) -> float:
    if explicit is not None:
        return explicit
    calib = _load_calibration(cfg)
    if calib is not None and "tau" in calib:
        return float(calib["tau"])
    return cfg.guidance.tau


# ---------------------------------------------------------------------------
# commands


def cmd_extract(cfg: RunConfig, args) -> None:
    world = _ensure_world(cfg)
    concepts = _selected_concepts(world, args.concept)
    pl = cfg.pipeline if args.k is None else replace(cfg.pipeline, K=args.k)
    entries = []
    for concept in concepts:
        prompts = sample_concept_prompts(
            world, concept, pl.N, derive_seed(pl.seed, 0x11)
        )
        pg = protolab.generate_pairs(
            world, prompts, concept, pl.M, derive_seed(pl.seed, 0x22),
            cfg.guidance, jobs=args.jobs,
        )
        ds = protolab.embedding_differences(world, pg)
        protos = protolab.cluster_prototypes(ds, pl.K, derive_seed(pl.seed, 0x33))
        for rank, p in enumerate(protos):
            entries.append(
                {
                    "concept": concept.name,
                    "mode_index": rank,
                    "cluster_size": p.cluster_size,
                    "inertia": p.inertia,
                    "image_prototype": p.vec.tolist(),
                }
            )
    doc = {
        "format_version": BANK_FORMAT_VERSION,
        "stage": "image",
        "world_seed": world.config.seed,
        "d": world.d,
        "entries": entries,
    }
    Path(cfg.paths.bank).write_text(json.dumps(doc))
    print(f"wrote {len(entries)} image prototypes to {cfg.paths.bank}")


def cmd_optimize(cfg: RunConfig, args) -> None:
    world = _ensure_world(cfg)
    path = Path(cfg.paths.bank)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"cannot read bank {path}: {e}") from e
    if doc.get("format_version") != BANK_FORMAT_VERSION:
        raise VersionMismatchError(f"bank format_version {doc.get('format_version')} unsupported")
    if doc.get("stage") not in ("image", "textual"):
        raise CorruptFileError("bank file has no stage marker")
    pl = cfg.pipeline if args.iters is None else replace(cfg.pipeline, U=args.iters)
    if pl.U == 0:
        print("warning: --iters 0 keeps prototypes at their random initialization")

    def one(indexed) -> protolab.TextualPrototype:
        i, item = indexed
        proto = protolab.ImagePrototype(
            vec=np.asarray(item["image_prototype"], dtype=np.float64),
            cluster_size=int(item["cluster_size"]),
            inertia=float(item.get("inertia", 0.0)),
        )
        return protolab.optimize_textual_prototype(
            world, proto, pl.L, pl.U, pl.eta,
            derive_seed(pl.seed, 0x44, int(item["mode_index"]), i),
            source_concept=item["concept"],
            source_mode=int(item["mode_index"]),
        )

    textual = pmap(one, list(enumerate(doc["entries"])), args.jobs)
    groups: dict[str, list] = {}
    for tp in textual:
        groups.setdefault(tp.source_concept, []).append(tp)
    bank = protolab.build_bank(list(groups.items()), world.config.seed)
    erasure.save_bank(bank, path)
    for e in bank.entries:
        print(
            f"{e.source_concept}/mode{e.source_mode}: achieved_cosine={e.achieved_cosine:.4f} "
            f"(cluster_size={e.cluster_size})"
        )


def cmd_calibrate(cfg: RunConfig, args) -> None:
    world = _ensure_world(cfg)
    bank = erasure.load_bank(cfg.paths.bank)
    concepts = _selected_concepts(world, args.concept)
    tau = erasure.calibrate_tau(
        world, bank, concepts, n=args.n, seed=cfg.eval.seed
    )
    detectors = {}
    for i, c in enumerate(concepts):
        det = evalkit.calibrate_detector(
            world, c, n=args.n, seed=derive_seed(cfg.eval.seed, 0xD, i), cfg=cfg.guidance
        )
        detectors[c.name] = det.theta_det
    doc = {"tau": tau, "detectors": detectors}
    Path(cfg.paths.calibration).write_text(json.dumps(doc))
    print(f"tau={tau:.6f}  " + "  ".join(f"theta[{k}]={v:.6f}" for k, v in detectors.items()))


def _grid(cfg: RunConfig, world: World, concepts) -> tuple[list[Prompt], list[list[int]]]:
    ev = cfg.eval
    kind = ev.prompts
    prompts: list[Prompt] = []
    if kind in ("concept", "mixed"):
        per = ev.n_prompts // len(concepts)
        for i, c in enumerate(concepts):
            prompts += sample_concept_prompts(world, c, per, derive_seed(ev.seed, 0x91, i))
    if kind in ("neutral", "mixed"):
        need = ev.n_prompts if kind == "neutral" else max(ev.n_prompts - len(prompts), 0)
        prompts += sample_neutral_prompts(world, need, derive_seed(ev.seed, 0x92))
    prompts = prompts[: ev.n_prompts] if len(prompts) > ev.n_prompts else prompts
    seeds = [
        [derive_seed(ev.seed, 0x93, i, j) for j in range(ev.n_seeds)]
        for i in range(len(prompts))
    ]
    return prompts, seeds


def cmd_sample(cfg: RunConfig, args) -> None:
    world = _ensure_world(cfg)
    bank = erasure.load_bank(cfg.paths.bank)
    tau = _resolved_tau(cfg, args.tau)
    gcfg = replace(cfg.guidance, tau=tau)
    if args.no_erase:
        gcfg = gcfg.with_beta(0.0)
    session = erasure.make_session(world, bank, gcfg)

    if args.prompt:
        prompts = [Prompt(tuple(int(t) for t in spec.split(","))) for spec in args.prompt]
        seeds = [
            [derive_seed(cfg.eval.seed, 0x93, i, j) for j in range(cfg.eval.n_seeds)]
            for i in range(len(prompts))
        ]
    else:
        concepts = _selected_concepts(world, args.concept)
        prompts, seeds = _grid(cfg, world, concepts)

    def one(item) -> erasure.GenerationRecord:
        p, s = item
        return erasure.erase_and_generate(p, session, s)

    work = [(p, s) for p, row in zip(prompts, seeds) for s in row]
    records = pmap(one, work, args.jobs)
    erasure.write_records(records, cfg.paths.records)
    n_sel = sum(r.selected is not None for r in records)
    print(
        f"wrote {len(records)} records to {cfg.paths.records} "
        f"({n_sel} with a selected prototype, beta={gcfg.beta}, tau={tau:.4f})"
    )


def _detector_for(cfg: RunConfig, world: World, concept) -> evalkit.DetectorConfig:
    calib = _load_calibration(cfg)
    if calib and concept.name in calib.get("detectors", {}):
        return evalkit.DetectorConfig(
            theta_det=float(calib["detectors"][concept.name]), concept=concept
        )
    return evalkit.calibrate_detector(
        world, concept, n=200, seed=derive_seed(cfg.eval.seed, 0xD, 0), cfg=cfg.guidance
    )


def cmd_eval(cfg: RunConfig, args) -> None:
    world = _ensure_world(cfg)
    concepts = _selected_concepts(world, args.concept)
    concept = concepts[0]
    det = _detector_for(cfg, world, concept)
    reports_dir = Path(cfg.paths.reports)
    reports_dir.mkdir(parents=True, exist_ok=True)

    if args.live:
        bank = erasure.load_bank(cfg.paths.bank)
        gcfg = replace(cfg.guidance, tau=_resolved_tau(cfg, None))
        session = erasure.make_session(world, bank, gcfg)
        prompts, seeds = _grid(cfg, world, [concept])
        report = evalkit.flagged_rate(prompts, session, det, seeds)
    else:
        records = erasure.read_records(args.records or cfg.paths.records)
        report = evalkit.rescore_records(world, records, det, {"theta_det": det.theta_det})
    evalkit.emit_report(report, reports_dir / "eval.json", "json")
    evalkit.emit_report(report, reports_dir / "eval.csv", "csv")
    print(
        f"flagged_rate={report.flagged_rate:.4f} "
        f"context_alignment_mean={report.context_alignment_mean:.4f} "
        f"n={report.n_samples}"
    )
    if args.baseline_records:
        base = evalkit.rescore_records(
            world, erasure.read_records(args.baseline_records), det,
            {"theta_det": det.theta_det},
        )
        evalkit.emit_report(base, reports_dir / "eval_baseline.json", "json")
        print(
            f"baseline flagged_rate={base.flagged_rate:.4f}  "
            f"delta={report.flagged_rate - base.flagged_rate:+.4f}"
        )


def cmd_ablate(cfg: RunConfig, args) -> None:
    world = _ensure_world(cfg)
    concepts = _selected_concepts(world, args.concept)
    concept = concepts[0]
    det = _detector_for(cfg, world, concept)
    tau = _resolved_tau(cfg, args.tau)
    gcfg = replace(cfg.guidance, tau=tau)
    prompts, seeds = _grid(cfg, world, [concept])
    ks = [int(k) for k in args.ks.split(",")]
    result = evalkit.ablation_k(
        world, ks, concept, cfg.pipeline, gcfg, det, prompts, seeds
    )
    reports_dir = Path(cfg.paths.reports)
    reports_dir.mkdir(parents=True, exist_ok=True)
    evalkit.emit_report(result, reports_dir / "ablation.csv", "csv")
    evalkit.emit_report(result, reports_dir / "ablation.json", "json")
    evalkit.emit_report(result, reports_dir / "ablation.svg", "svg")
    for K, fr, ca in result.rows:
        print(f"K={K}: flagged_rate={fr:.4f} context_alignment={ca:.4f}")


def cmd_inspect(cfg: RunConfig, args) -> None:
    world = _ensure_world(cfg)
    bank = erasure.load_bank(cfg.paths.bank)
    for e in bank.entries:
        ranked = evalkit.nearest_tokens(e, world, args.top)
        cells = []
        for tok, cos_v in ranked:
            role = world.entries[tok].role
            label = role.kind if role.concept is None else f"{role.kind}:{role.concept}/{role.mode_index}"
            cells.append(f"{tok}[{label}]({cos_v:.3f})")
        print(
            f"{e.source_concept}/mode{e.source_mode} "
            f"(size={e.cluster_size}, cos={e.achieved_cosine:.3f}): " + " ".join(cells)
        )


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoerase",
        description="concept erasure via concept prototypes on a synthetic diffusion world",
    )
    parser.add_argument("--config", help="run config JSON (default: protoerase.json if present)")
    parser.add_argument("--print-config", action="store_true", help="emit resolved config and exit")
    parser.add_argument("--jobs", type=int, default=1, help="worker cap for parallel stages")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("extract", help="pairs -> differences -> image prototypes")
    p.add_argument("--concept", action="append", help="concept name (repeatable; default all)")
    p.add_argument("--k", type=int, help="override pipeline K")

    p = sub.add_parser("optimize", help="fit textual prototypes onto the extracted bank")
    p.add_argument("--iters", type=int, help="override optimization steps U")

    p = sub.add_parser("calibrate", help="calibrate detector threshold and selection tau")
    p.add_argument("--concept", action="append")
    p.add_argument("--n", type=int, default=200)

    p = sub.add_parser("sample", help="generate records with erasure on")
    p.add_argument("--concept", action="append")
    p.add_argument("--prompt", action="append", help="explicit token ids, e.g. 0,12,13")
    p.add_argument("--no-erase", action="store_true", help="force beta=0 baseline")
    p.add_argument("--tau", type=float, help="override selection threshold")

    p = sub.add_parser("eval", help="score a records file (or generate and score live)")
    p.add_argument("--concept", action="append")
    p.add_argument("--records", help="records.jsonl to score")
    p.add_argument("--baseline-records", help="second records file; prints flagged-rate delta")
    p.add_argument("--live", action="store_true", help="generate over the eval grid instead of reading records")

    p = sub.add_parser("ablate", help="sweep K and emit csv/json/svg")
    p.add_argument("--concept", action="append")
    p.add_argument("--ks", default="1,2,3,6")
    p.add_argument("--tau", type=float)

    p = sub.add_parser("inspect", help="nearest vocabulary tokens per prototype")
    p.add_argument("--top", type=int, default=5)

    return parser


COMMANDS = {
    "extract": cmd_extract,
    "optimize": cmd_optimize,
    "calibrate": cmd_calibrate,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    config_path = args.config
    if config_path is None and Path("protoerase.json").exists():
        config_path = "protoerase.json"
    try:
        cfg = load_config(config_path)
    except ProtoEraseError as e:
        print(f"error [config]: {e}", file=sys.stderr)
        return 1

    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2))
        return 0
    if args.command is None:
        parser.print_help()
        return 2

    start = time.monotonic()
    try:
        COMMANDS[args.command](cfg, args)
    except ProtoEraseError as e:
        print(f"error [{args.command}]: {e}", file=sys.stderr)
        return 1
    print(f"[{args.command}] wall clock {time.monotonic() - start:.2f}s", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
