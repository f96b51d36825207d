"""Verification harness: oracle detector, erasure metrics, ablations,
prototype interpretation, report emission.

The detector thresholds the cosine between an image embedding and the
ground-truth mode directions — an exact oracle, so detector error never
contaminates erasure measurements. Context directions are orthogonal to
mode directions by construction, which keeps the flagged/context metrics
separable.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import erasure, guidance, protolab
from .encoders import cosine, encode_prompt, image_encoder
from .errors import CalibrationError, InvalidConfigError, ZeroNormError
from .rng import derive_seed
from .semworld import (
    ConceptSpec,
    Prompt,
    World,
    contrastive_prompt,
    sample_concept_prompts,
    sample_neutral_prompts,
)


@dataclass(frozen=True)
class DetectorConfig:
    theta_det: float
    concept: ConceptSpec

    def __post_init__(self) -> None:
        if not -1.0 <= self.theta_det <= 1.0:
            raise InvalidConfigError("theta_det must lie in [-1, 1]")


@dataclass(frozen=True)
class EvalReport:
    flagged_rate: float
    context_alignment_mean: float
    n_samples: int
    per_mode: dict
    config: dict

    def __post_init__(self) -> None:
        if not 0.0 <= self.flagged_rate <= 1.0:
            raise InvalidConfigError("flagged_rate outside [0, 1]")
        if self.n_samples < 1:
            raise InvalidConfigError("n_samples must be >= 1")


@dataclass(frozen=True)
class AblationResult:
    rows: tuple[tuple[int, float, float], ...]  # (K, flagged_rate, context_alignment_mean)
    grid_hash: str = ""

    def __post_init__(self) -> None:
        ks = [r[0] for r in self.rows]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise InvalidConfigError("K values must be strictly increasing")


# ---------------------------------------------------------------------------
# detector


def _detector_scores(world: World, concept: ConceptSpec, images: np.ndarray) -> np.ndarray:
    """Max over the concept's mode tokens of cos(encode_image(x), g(mode))."""
    enc = image_encoder(world)
    dirs = np.array([world.gt(t) for t in sorted(concept.mode_tokens)])
    z = enc.encode(images)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    cosines = (z / safe) @ dirs.T
    scores = cosines.max(axis=-1)
    return np.where(norms[..., 0] == 0.0, -1.0, scores)


def flagged(x: np.ndarray, det: DetectorConfig, world: World) -> bool:
    """True iff some mode direction's cosine clears the threshold.

    A zero image has no direction; by convention it is not flagged.
    """
    score = _detector_scores(world, det.concept, np.asarray(x, dtype=np.float64))
    return bool(score >= det.theta_det)


def calibrate_detector(
    world: World,
    concept: ConceptSpec,
    n: int = 200,
    seed: int = 0,
    cfg: guidance.GuidanceConfig | None = None,
) -> DetectorConfig:
    """Pick theta_det by Youden's J over baseline concept/neutral samples.

    n positives (plain-CFG samples of concept prompts) and n negatives
    (neutral prompts) are split in half; the threshold maximizing TPR-FPR
    on the first half must reach TPR >= 0.9 and FPR <= 0.05 on the heldout
    half, otherwise calibration fails loudly with the achieved rates.
    """
    if n < 100:
        raise InvalidConfigError("calibration needs n >= 100")
    if cfg is None:
        cfg = guidance.GuidanceConfig()
    cfg = cfg.with_beta(0.0)
    schedule = guidance.make_schedule(cfg.T, cfg.stochastic)

    pos_prompts = sample_concept_prompts(world, concept, n, derive_seed(seed, 0xDE7, 1))
    neg_prompts = sample_neutral_prompts(world, n, derive_seed(seed, 0xDE7, 2))

    def generate(prompts: list[Prompt], tag: int) -> np.ndarray:
        out = np.zeros((len(prompts), world.D))
        for i, p in enumerate(prompts):
            cond = guidance.condition_from_prompt(world, p)
            out[i] = guidance.sample(cond, None, cfg, schedule, derive_seed(seed, tag, i))
        return out

    pos_scores = _detector_scores(world, concept, generate(pos_prompts, 0xA1))
    neg_scores = _detector_scores(world, concept, generate(neg_prompts, 0xA2))

    half = n // 2
    theta = _youden_threshold(pos_scores[:half], neg_scores[:half])
    tpr = float((pos_scores[half:] >= theta).mean())
    fpr = float((neg_scores[half:] >= theta).mean())
    if tpr < 0.9 or fpr > 0.05:
        raise CalibrationError(
            f"detector calibration failed: holdout TPR={tpr:.3f}, FPR={fpr:.3f} "
            f"at theta={theta:.4f}"
        )
    return DetectorConfig(theta_det=theta, concept=concept)


def _youden_threshold(pos: np.ndarray, neg: np.ndarray) -> float:
    """Threshold maximizing TPR - FPR over candidate cut points."""
    values = np.unique(np.concatenate([pos, neg]))
    candidates = np.concatenate([values, [values[-1] + 1e-6]])
    best_theta, best_j = 0.0, -np.inf
    for th in candidates:
        j = (pos >= th).mean() - (neg >= th).mean()
        if j > best_j:
            best_j, best_theta = j, float(th)
    return min(max(best_theta, -1.0), 1.0)


# ---------------------------------------------------------------------------
# metrics


def context_alignment(
    world: World, prompt: Prompt, x: np.ndarray, concept: ConceptSpec
) -> float:
    """Cosine between the concept-free prompt content and the image."""
    x = np.asarray(x, dtype=np.float64)
    z = image_encoder(world).encode(x)
    if np.linalg.norm(z) == 0.0:
        raise ZeroNormError("zero image has no context alignment")
    neg = contrastive_prompt(world, prompt, concept)
    return cosine(encode_prompt(world, neg), z)


def grid_hash(prompts: Sequence[Prompt], seeds: Sequence[Sequence[int]]) -> str:
    h = hashlib.sha256()
    for p, row in zip(prompts, seeds):
        h.update(repr((tuple(p.tokens), tuple(int(s) for s in row))).encode())
    return h.hexdigest()


def flagged_rate(
    prompts: Sequence[Prompt],
    session: erasure.ErasureSession,
    det: DetectorConfig,
    seeds: Sequence[Sequence[int]],
) -> EvalReport:
    """Generate over the prompt x seed grid; report flag and alignment stats.

    The per-mode breakdown keys on each prompt's mode token (None bucket
    for neutral prompts); reduction order is (prompt index, seed index) so
    reruns are exactly reproducible.
    """
    if len(prompts) < 1 or any(len(row) < 1 for row in seeds):
        raise InvalidConfigError("need >= 1 prompt and >= 1 seed per prompt")
    if len(seeds) != len(prompts):
        raise InvalidConfigError("seeds must align with prompts")
    world = session.world
    concept = det.concept
    flags, aligns = [], []
    per_mode: dict = {}
    for i, p in enumerate(prompts):
        mode_tok = next((t for t in p if t in concept.mode_tokens), None)
        mode_idx = concept.mode_index_of(mode_tok) if mode_tok is not None else None
        for s in seeds[i]:
            rec = erasure.erase_and_generate(p, session, int(s))
            f = flagged(rec.image, det, world)
            a = context_alignment(world, p, rec.image, concept)
            flags.append(f)
            aligns.append(a)
            bucket = per_mode.setdefault(mode_idx, {"n": 0, "flagged": 0})
            bucket["n"] += 1
            bucket["flagged"] += int(f)
    per_mode_out = {
        k: {"n": v["n"], "flagged_rate": v["flagged"] / v["n"]}
        for k, v in sorted(per_mode.items(), key=lambda kv: (kv[0] is None, kv[0]))
    }
    cfg = session.cfg
    return EvalReport(
        flagged_rate=float(np.mean(flags)),
        context_alignment_mean=float(np.mean(aligns)),
        n_samples=len(flags),
        per_mode=per_mode_out,
        config={
            "alpha": cfg.alpha,
            "beta": cfg.beta,
            "tau": cfg.tau,
            "T": cfg.T,
            "sampler": cfg.sampler,
            "stochastic": cfg.stochastic,
            "bank_size": len(session.bank),
            "world_seed": world.config.seed,
            "theta_det": det.theta_det,
            "grid_hash": grid_hash(prompts, seeds),
        },
    )


def rescore_records(
    world: World,
    records: Sequence[erasure.GenerationRecord],
    det: DetectorConfig,
    config: dict | None = None,
) -> EvalReport:
    """Recompute the EvalReport from persisted generation records."""
    if not records:
        raise InvalidConfigError("no records to rescore")
    concept = det.concept
    flags, aligns = [], []
    per_mode: dict = {}
    for rec in records:
        mode_tok = next((t for t in rec.prompt if t in concept.mode_tokens), None)
        mode_idx = concept.mode_index_of(mode_tok) if mode_tok is not None else None
        f = flagged(rec.image, det, world)
        flags.append(f)
        aligns.append(context_alignment(world, rec.prompt, rec.image, concept))
        bucket = per_mode.setdefault(mode_idx, {"n": 0, "flagged": 0})
        bucket["n"] += 1
        bucket["flagged"] += int(f)
    per_mode_out = {
        k: {"n": v["n"], "flagged_rate": v["flagged"] / v["n"]}
        for k, v in sorted(per_mode.items(), key=lambda kv: (kv[0] is None, kv[0]))
    }
    return EvalReport(
        flagged_rate=float(np.mean(flags)),
        context_alignment_mean=float(np.mean(aligns)),
        n_samples=len(flags),
        per_mode=per_mode_out,
        config=dict(config or {"theta_det": det.theta_det}),
    )


# ---------------------------------------------------------------------------
# K ablation


def ablation_k(
    world: World,
    Ks: Sequence[int],
    concept: ConceptSpec,
    pipeline: protolab.PipelineConfig,
    cfg: guidance.GuidanceConfig,
    det: DetectorConfig,
    prompts: Sequence[Prompt],
    seeds: Sequence[Sequence[int]],
) -> AblationResult:
    """Rebuild the bank for each K and evaluate on one fixed grid.

    Only the bank changes between rows; the session template (guidance
    config including tau) and the prompt/seed grid are byte-identical
    across K values.
    """
    if not Ks or any(b <= a for a, b in zip(Ks, Ks[1:])):
        raise InvalidConfigError("Ks must be non-empty and strictly increasing")
    rows = []
    for K in Ks:
        pl = protolab.PipelineConfig(
            N=pipeline.N, M=pipeline.M, K=K, L=pipeline.L,
            U=pipeline.U, eta=pipeline.eta, seed=pipeline.seed,
        )
        bank = protolab.build_concept_bank(world, concept, pl, cfg)
        session = erasure.make_session(world, bank, cfg)
        report = flagged_rate(prompts, session, det, seeds)
        rows.append((int(K), report.flagged_rate, report.context_alignment_mean))
    return AblationResult(rows=tuple(rows), grid_hash=grid_hash(prompts, seeds))


# ---------------------------------------------------------------------------
# prototype interpretation


def _prototype_vector(prototype) -> np.ndarray:
    if isinstance(prototype, protolab.ImagePrototype):
        return prototype.vec
    if isinstance(prototype, protolab.TextualPrototype):
        return prototype.summary
    return np.asarray(prototype, dtype=np.float64)


def nearest_tokens(prototype, world: World, top_n: int) -> list[tuple[int, float]]:
    """Vocabulary tokens ranked by cosine to the prototype, ties by token id."""
    if top_n < 1:
        raise InvalidConfigError("top_n must be >= 1")
    v = _prototype_vector(prototype)
    cos = np.array([cosine(v, world.gt(t)) for t in range(world.vocab_size)])
    order = np.lexsort((np.arange(world.vocab_size), -cos))
    return [(int(t), float(cos[t])) for t in order[:top_n]]


def nearest_images(
    world: World, prototype, images: Sequence[np.ndarray], top_n: int
) -> list[tuple[int, float]]:
    """Images ranked by cosine between the prototype and their embeddings."""
    if len(images) == 0:
        raise InvalidConfigError("image list is empty")
    v = _prototype_vector(prototype)
    enc = image_encoder(world)
    cos = np.array([cosine(v, enc.encode(np.asarray(x))) for x in images])
    order = np.lexsort((np.arange(len(images)), -cos))
    n = min(top_n, len(images))
    return [(int(i), float(cos[i])) for i in order[:n]]


# ---------------------------------------------------------------------------
# report emission


def emit_report(report, path: str | Path, format: str) -> None:
    """Write an EvalReport or AblationResult as csv, json, or svg."""
    path = Path(path)
    if format == "json":
        path.write_text(json.dumps(_as_dict(report)))
    elif format == "csv":
        path.write_text(_as_csv(report))
    elif format == "svg":
        if not isinstance(report, AblationResult):
            raise InvalidConfigError("svg output renders the K-ablation curve only")
        _write_ablation_svg(report, path)
    else:
        raise InvalidConfigError(f"unsupported format {format!r}")


def _as_dict(report) -> dict:
    if isinstance(report, EvalReport):
        return {
            "flagged_rate": report.flagged_rate,
            "context_alignment_mean": report.context_alignment_mean,
            "n_samples": report.n_samples,
            "per_mode": {str(k): v for k, v in report.per_mode.items()},
            "config": report.config,
        }
    if isinstance(report, AblationResult):
        return {
            "rows": [list(r) for r in report.rows],
            "grid_hash": report.grid_hash,
        }
    raise InvalidConfigError(f"cannot serialize {type(report).__name__}")


def report_from_dict(raw: dict) -> EvalReport:
    per_mode = {
        (None if k == "None" else int(k)): v for k, v in raw["per_mode"].items()
    }
    return EvalReport(
        flagged_rate=raw["flagged_rate"],
        context_alignment_mean=raw["context_alignment_mean"],
        n_samples=raw["n_samples"],
        per_mode=per_mode,
        config=raw["config"],
    )


def _as_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if isinstance(report, AblationResult):
        w.writerow(["K", "flagged_rate", "context_alignment_mean"])
        for K, fr, ca in report.rows:
            w.writerow([K, repr(fr), repr(ca)])
    elif isinstance(report, EvalReport):
        # tidy key/value layout so the per-mode breakdown travels with the csv
        w.writerow(["metric", "value"])
        w.writerow(["flagged_rate", repr(report.flagged_rate)])
        w.writerow(["context_alignment_mean", repr(report.context_alignment_mean)])
        w.writerow(["n_samples", report.n_samples])
        for mode, stats in report.per_mode.items():
            label = "neutral" if mode is None else f"mode{mode}"
            w.writerow([f"flagged_rate[{label}]", repr(stats["flagged_rate"])])
            w.writerow([f"n[{label}]", stats["n"]])
    else:
        raise InvalidConfigError(f"cannot serialize {type(report).__name__}")
    return buf.getvalue()


def _write_ablation_svg(result: AblationResult, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = [r[0] for r in result.rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(ks, [r[1] for r in result.rows], "o-", color="tab:red", label="flagged rate")
    ax1.set_xlabel("number of prototypes K")
    ax1.set_ylabel("flagged rate", color="tab:red")
    ax1.set_ylim(-0.05, 1.05)
    ax2 = ax1.twinx()
    ax2.plot(ks, [r[2] for r in result.rows], "s--", color="tab:blue", label="context alignment")
    ax2.set_ylabel("context alignment", color="tab:blue")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
