"""Inference-time erasure: prototype selection, guided sampling, persistence.

Selection is top-1 cosine between the prompt summary and each bank entry's
summary; if nothing clears the threshold tau, sampling proceeds with no
negative guidance and the output is bitwise identical to the plain-CFG
sample for the same seed. Records keep the full similarity array so the
gate is auditable after the fact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import guidance
from .encoders import SoftPrompt, cosine, encode_prompt
from .errors import (
    CorruptFileError,
    DimensionMismatchError,
    InvalidConfigError,
    InvariantViolationError,
    VersionMismatchError,
)
from .protolab import BANK_FORMAT_VERSION, PrototypeBank, TextualPrototype
from .rng import derive_seed
from .semworld import Prompt, World, sample_concept_prompts


@dataclass(frozen=True)
class ErasureSession:
    world: World
    bank: PrototypeBank
    cfg: guidance.GuidanceConfig
    schedule: guidance.NoiseSchedule

    def __post_init__(self) -> None:
        if len(self.bank) == 0:
            raise InvalidConfigError("session requires a non-empty bank")
        if self.bank.d != self.world.d:
            raise DimensionMismatchError(
                f"bank d={self.bank.d} != world d={self.world.d}"
            )
        if self.bank.world_seed != self.world.config.seed:
            raise InvalidConfigError(
                f"bank was built on world seed {self.bank.world_seed}, "
                f"session world seed is {self.world.config.seed}"
            )
        if self.cfg.T != self.schedule.T:
            raise InvalidConfigError("cfg.T disagrees with schedule.T")


def make_session(
    world: World, bank: PrototypeBank, cfg: guidance.GuidanceConfig
) -> ErasureSession:
    schedule = guidance.make_schedule(cfg.T, cfg.stochastic)
    return ErasureSession(world=world, bank=bank, cfg=cfg, schedule=schedule)


@dataclass(frozen=True)
class GenerationRecord:
    prompt: Prompt
    seed: int
    image: np.ndarray
    similarities: np.ndarray  # per-bank-entry
    selected: tuple[str, int, float] | None  # (concept, mode_index, similarity)

    @property
    def selected_index(self) -> int | None:
        if self.selected is None:
            return None
        return int(self.similarities.argmax())


def bank_similarities(world: World, prompt: Prompt, bank: PrototypeBank) -> np.ndarray:
    e = encode_prompt(world, prompt)
    return np.array([cosine(e, entry.summary) for entry in bank.entries])


def select_prototype(
    world: World, prompt: Prompt, bank: PrototypeBank, tau: float
) -> tuple[int, float] | None:
    """Top-1 entry whose similarity clears tau; ties go to the lowest index."""
    if len(bank) == 0:
        raise InvalidConfigError("bank is empty")
    sims = bank_similarities(world, prompt, bank)
    idx = int(sims.argmax())  # argmax keeps the lowest index on exact ties
    if sims[idx] >= tau:
        return idx, float(sims[idx])
    return None


def erase_and_generate(
    prompt: Prompt, session: ErasureSession, seed: int
) -> GenerationRecord:
    """Select, then sample with the chosen prototype as negative guidance."""
    world, bank, cfg = session.world, session.bank, session.cfg
    sims = bank_similarities(world, prompt, bank)
    idx = int(sims.argmax())
    proto_cond = None
    selected = None
    if sims[idx] >= cfg.tau:
        entry = bank.entries[idx]
        proto_cond = guidance.condition_from_summary(world, entry.summary)
        selected = (entry.source_concept, entry.source_mode, float(sims[idx]))
    cond = guidance.condition_from_prompt(world, prompt)
    image = guidance.sample(cond, proto_cond, cfg, session.schedule, seed)
    return GenerationRecord(
        prompt=prompt, seed=seed, image=image, similarities=sims, selected=selected
    )


def calibrate_tau(
    world: World,
    bank: PrototypeBank,
    concepts: Sequence,
    n: int = 200,
    seed: int = 0,
) -> float:
    """Largest tau at which >= 99% of held-out concept prompts still select.

    Prompts are sampled fresh (per concept, evenly split) from a stream
    disjoint from the extraction stage, so the threshold generalizes.
    """
    if n < 1:
        raise InvalidConfigError("n must be >= 1")
    concepts = list(concepts)
    per = max(1, n // len(concepts))
    sims = []
    for ci, concept in enumerate(concepts):
        for p in sample_concept_prompts(
            world, concept, per, derive_seed(seed, 0x7A0, ci)
        ):
            sims.append(float(bank_similarities(world, p, bank).max()))
    sims = np.sort(np.array(sims))
    drop = int(np.floor(0.01 * len(sims)))  # how many prompts may fall below tau
    return float(sims[drop])


# ---------------------------------------------------------------------------
# bank persistence


def _entry_to_dict(e: TextualPrototype) -> dict:
    return {
        "concept": e.source_concept,
        "mode_index": e.source_mode,
        "cluster_size": e.cluster_size,
        "achieved_cosine": e.achieved_cosine,
        "soft_prompt": e.soft_prompt.rows.tolist(),
        "summary": e.summary.tolist(),
        "image_prototype": e.image_prototype.tolist(),
    }


def bank_to_dict(bank: PrototypeBank) -> dict:
    return {
        "format_version": bank.format_version,
        "stage": "textual",
        "world_seed": bank.world_seed,
        "d": bank.d,
        "L": bank.L,
        "entries": [_entry_to_dict(e) for e in bank.entries],
    }


def save_bank(bank: PrototypeBank, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bank_to_dict(bank)))


def load_bank(path: str | Path) -> PrototypeBank:
    """Load and revalidate a complete bank.

    Checks the format version, dimensional consistency, and that the
    stored achieved_cosine matches cosine(summary, image_prototype) to
    1e-9 (the save-time invariant), so silent tampering is rejected.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"cannot read bank file {path}: {e}") from e
    return bank_from_dict(raw)


def bank_from_dict(raw: dict) -> PrototypeBank:
    try:
        version = raw["format_version"]
    except (KeyError, TypeError) as e:
        raise CorruptFileError("bank file lacks format_version") from e
    if version != BANK_FORMAT_VERSION:
        raise VersionMismatchError(f"bank format_version {version} unsupported")
    if raw.get("stage", "textual") != "textual":
        raise InvariantViolationError(
            "bank holds image prototypes only; optimize it before use"
        )
    try:
        d = int(raw["d"])
        L = int(raw["L"])
        entries = []
        for i, item in enumerate(raw["entries"]):
            sp = SoftPrompt(np.asarray(item["soft_prompt"], dtype=np.float64))
            summary = np.asarray(item["summary"], dtype=np.float64)
            p_img = np.asarray(item["image_prototype"], dtype=np.float64)
            entries.append(
                (
                    i,
                    TextualPrototype(
                        soft_prompt=sp,
                        summary=summary,
                        achieved_cosine=float(item["achieved_cosine"]),
                        source_concept=item["concept"],
                        source_mode=int(item["mode_index"]),
                        image_prototype=p_img,
                        cluster_size=int(item["cluster_size"]),
                    ),
                )
            )
        world_seed = int(raw["world_seed"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFileError(f"malformed bank file: {e}") from e

    for i, e in entries:
        if e.summary.shape != (d,) or e.image_prototype.shape != (d,):
            raise InvariantViolationError(f"entry {i}: dimension != d={d}")
        if e.soft_prompt.rows.shape != (L, d):
            raise InvariantViolationError(f"entry {i}: soft_prompt shape != ({L}, {d})")
        recomputed = cosine(e.summary, e.image_prototype)
        if abs(recomputed - e.achieved_cosine) > 1e-9:
            raise InvariantViolationError(
                f"entry {i}: achieved_cosine={e.achieved_cosine} but "
                f"cosine(summary, image_prototype)={recomputed}"
            )
        if e.cluster_size < 1:
            raise InvariantViolationError(f"entry {i}: cluster_size < 1")
    return PrototypeBank(
        entries=tuple(e for _, e in entries), world_seed=world_seed
    )


# ---------------------------------------------------------------------------
# generation records (JSON lines)


def record_to_dict(rec: GenerationRecord) -> dict:
    return {
        "prompt": list(rec.prompt.tokens),
        "seed": rec.seed,
        "selected": (
            None
            if rec.selected is None
            else {
                "concept": rec.selected[0],
                "mode_index": rec.selected[1],
                "similarity": rec.selected[2],
            }
        ),
        "similarities": rec.similarities.tolist(),
        "image": rec.image.tolist(),
    }


def record_from_dict(raw: dict) -> GenerationRecord:
    sel = raw["selected"]
    return GenerationRecord(
        prompt=Prompt(tuple(raw["prompt"])),
        seed=int(raw["seed"]),
        image=np.asarray(raw["image"], dtype=np.float64),
        similarities=np.asarray(raw["similarities"], dtype=np.float64),
        selected=None
        if sel is None
        else (sel["concept"], int(sel["mode_index"]), float(sel["similarity"])),
    )


def write_records(records: Iterable[GenerationRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec)))
            fh.write("\n")


def read_records(path: str | Path) -> list[GenerationRecord]:
    out = []
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(record_from_dict(json.loads(line)))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CorruptFileError(f"cannot read records file {path}: {e}") from e
    return out
