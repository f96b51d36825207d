"""Concept-prototype construction.

Stage order mirrors the erasure pipeline: paired generation with and
without the concept (shared per-pair noise seeds), all-pairs embedding
differences, k-means into image prototypes, then cosine ascent of a soft
prompt against each prototype to obtain its textual counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import guidance
from .clustering import kmeans
from .encoders import SoftPrompt, cosine, image_encoder, text_encoder
from .errors import (
    DimensionMismatchError,
    DuplicateEntryError,
    InvalidConfigError,
    OptimizationError,
    ZeroNormError,
)
from .rng import derive_seed, stream
from .semworld import ConceptSpec, Prompt, World, contains_concept, contrastive_prompt

BANK_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PairedGenerations:
    """Per prompt i: M images from c_i and M from its contrastive twin.

    Image j of both sets shares one noise seed, so the pair differs only
    through the substituted token's effect on the conditioning mean.
    """

    prompts: tuple[Prompt, ...]
    contrastive: tuple[Prompt, ...]
    images: np.ndarray  # N x M x D, from c_i
    images_neg: np.ndarray  # N x M x D, from c_i^-
    seeds: np.ndarray  # N x M

    @property
    def N(self) -> int:
        return self.images.shape[0]

    @property
    def M(self) -> int:
        return self.images.shape[1]


@dataclass(frozen=True)
class DifferenceSet:
    diffs: np.ndarray  # (N*M*M) x d, lexicographic by (i, j, k)
    provenance: tuple[tuple[int, int, int], ...]


@dataclass(frozen=True)
class ImagePrototype:
    vec: np.ndarray
    cluster_size: int
    inertia: float

    def __post_init__(self) -> None:
        if self.cluster_size < 1:
            raise InvalidConfigError("cluster_size must be >= 1")
        if not np.all(np.isfinite(self.vec)):
            raise InvalidConfigError("prototype must be finite")


@dataclass(frozen=True)
class TextualPrototype:
    soft_prompt: SoftPrompt
    summary: np.ndarray
    achieved_cosine: float
    source_concept: str
    source_mode: int
    image_prototype: np.ndarray
    cluster_size: int
    best_cosine: float | None = None


@dataclass(frozen=True)
class PrototypeBank:
    entries: tuple[TextualPrototype, ...]
    world_seed: int
    format_version: int = BANK_FORMAT_VERSION

    @property
    def d(self) -> int:
        return self.entries[0].summary.shape[0]

    @property
    def L(self) -> int:
        return self.entries[0].soft_prompt.L

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the prototype extraction/optimization pipeline."""

    N: int = 40
    M: int = 4
    K: int = 3
    L: int = 4
    U: int = 2000
    eta: float = 5e-2
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.N, self.M, self.K, self.L) < 1 or self.U < 0 or self.eta <= 0:
            raise InvalidConfigError("pipeline config out of range")


# ---------------------------------------------------------------------------
# stage 1: paired generation


def generate_pairs(
    world: World,
    prompts: list[Prompt],
    concept: ConceptSpec,
    M: int,
    seed: int,
    cfg: guidance.GuidanceConfig | None = None,
    jobs: int = 1,
) -> PairedGenerations:
    """M guided samples per prompt under c_i and under its contrastive twin.

    No negative guidance at this stage (the prototype does not exist yet);
    sample j of both sets reuses the same derived noise seed.
    """
    from .parallel import pmap

    if M < 1:
        raise InvalidConfigError("M must be >= 1")
    for p in prompts:
        if not contains_concept(world, p, concept):
            raise InvalidConfigError(f"prompt {p.tokens} does not contain {concept.name!r}")
    if cfg is None:
        cfg = guidance.GuidanceConfig()
    cfg = cfg.with_beta(0.0)
    schedule = guidance.make_schedule(cfg.T, cfg.stochastic)

    N = len(prompts)
    D = world.D
    images = np.zeros((N, M, D))
    images_neg = np.zeros((N, M, D))
    seeds = np.zeros((N, M), dtype=np.int64)
    neg_prompts = [contrastive_prompt(world, p, concept) for p in prompts]

    def one_prompt(i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cond = guidance.condition_from_prompt(world, prompts[i])
        cond_neg = guidance.condition_from_prompt(world, neg_prompts[i])
        xs = np.zeros((M, D))
        xs_neg = np.zeros((M, D))
        ss = np.zeros(M, dtype=np.int64)
        for j in range(M):
            s = derive_seed(seed, 0x9A12, i, j)
            ss[j] = s
            xs[j] = guidance.sample(cond, None, cfg, schedule, s)
            xs_neg[j] = guidance.sample(cond_neg, None, cfg, schedule, s)
        return xs, xs_neg, ss

    for i, (xs, xs_neg, ss) in enumerate(pmap(one_prompt, list(range(N)), jobs)):
        images[i], images_neg[i], seeds[i] = xs, xs_neg, ss
    return PairedGenerations(
        prompts=tuple(prompts),
        contrastive=tuple(neg_prompts),
        images=images,
        images_neg=images_neg,
        seeds=seeds,
    )


# ---------------------------------------------------------------------------
# stage 2: embedding differences


def embedding_differences(world: World, pg: PairedGenerations) -> DifferenceSet:
    """All cross-pair differences z_{i,j} - z^-_{i,k}, lexicographic in (i, j, k)."""
    enc = image_encoder(world)
    z = enc.encode(pg.images.reshape(-1, world.D)).reshape(pg.N, pg.M, world.d)
    z_neg = enc.encode(pg.images_neg.reshape(-1, world.D)).reshape(pg.N, pg.M, world.d)
    diffs = []
    prov = []
    for i in range(pg.N):
        for j in range(pg.M):
            for k in range(pg.M):
                diffs.append(z[i, j] - z_neg[i, k])
                prov.append((i, j, k))
    return DifferenceSet(diffs=np.array(diffs), provenance=tuple(prov))


# ---------------------------------------------------------------------------
# stage 3: clustering into image prototypes


def cluster_prototypes(
    ds: DifferenceSet, K: int, seed: int, normalize: bool = False
) -> list[ImagePrototype]:
    """k-means the difference set; centroids sorted by descending cluster size.

    Differences are clustered raw by default (magnitude carries mode
    salience); normalize=True is the ablation flag.
    """
    pts = ds.diffs
    if normalize:
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ZeroNormError("cannot normalize a zero difference vector")
        pts = pts / norms
    res = kmeans(pts, K, seed)
    per_cluster_inertia = np.zeros(K)
    sorted_pts = pts[res.order]
    for j in range(K):
        mask = res.labels == j
        if mask.any():
            per_cluster_inertia[j] = float(
                ((sorted_pts[mask] - res.centroids[j]) ** 2).sum()
            )
    idx = sorted(
        range(K), key=lambda j: (-int(res.sizes[j]), tuple(res.centroids[j]))
    )
    return [
        ImagePrototype(
            vec=res.centroids[j].copy(),
            cluster_size=int(res.sizes[j]),
            inertia=per_cluster_inertia[j],
        )
        for j in idx
    ]


# ---------------------------------------------------------------------------
# stage 4: textual prototypes by cosine ascent


def ascend_cosine(
    target: np.ndarray,
    sp: SoftPrompt,
    U: int,
    eta: float,
    world: World,
) -> tuple[SoftPrompt, np.ndarray]:
    """Plain gradient ascent on cos(target, encode_text(sp)).

    Returns the final iterate and the objective trace (length U + 1,
    including the initial value). The cosine gradient w.r.t. the summary e
    is (t_hat - cos * e_hat)/|e|, pulled back through the encoder.
    """
    tnorm = np.linalg.norm(target)
    if tnorm == 0.0:
        raise ZeroNormError("zero-norm prototype cannot be a cosine target")
    t_hat = target / tnorm
    enc = text_encoder(world)
    sp = sp.copy()
    trace = np.zeros(U + 1)
    e = enc.encode(sp)
    trace[0] = cosine(e, target)
    for u in range(U):
        enorm = np.linalg.norm(e)
        e_hat = e / enorm
        c = float(e_hat @ t_hat)
        cot = (t_hat - c * e_hat) / enorm
        grad = enc.encode_grad(sp, cot)
        if not np.all(np.isfinite(grad)):
            raise OptimizationError(f"non-finite gradient at step {u}")
        sp = SoftPrompt(sp.rows + eta * grad)
        e = enc.encode(sp)
        trace[u + 1] = cosine(e, target)
    return sp, trace


def optimize_textual_prototype(
    world: World,
    p_I: ImagePrototype,
    L: int,
    U: int,
    eta: float,
    seed: int,
    source_concept: str = "",
    source_mode: int = 0,
) -> TextualPrototype:
    """Pair an image prototype with a soft prompt via cosine ascent.

    The soft prompt starts from standard-normal rows; U plain-ascent steps
    follow; achieved_cosine is taken from the final iterate (the best-seen
    value is recorded alongside).
    """
    if U < 0 or eta <= 0 or L < 1:
        raise InvalidConfigError("U >= 0, eta > 0, L >= 1 required")
    rng = stream(derive_seed(seed, 0x50F7))
    sp0 = SoftPrompt(rng.standard_normal((L, world.d)))
    sp, trace = ascend_cosine(p_I.vec, sp0, U, eta, world)
    summary = text_encoder(world).encode(sp)
    return TextualPrototype(
        soft_prompt=sp,
        summary=summary,
        achieved_cosine=float(trace[-1]),
        source_concept=source_concept,
        source_mode=source_mode,
        image_prototype=p_I.vec.copy(),
        cluster_size=p_I.cluster_size,
        best_cosine=float(trace.max()),
    )


# ---------------------------------------------------------------------------
# stage 5: bank assembly


def build_bank(
    groups: list[tuple[str, list[TextualPrototype]]], world_seed: int
) -> PrototypeBank:
    """Flatten per-concept prototype lists into one bank, provenance kept.

    Entry order follows the input order, which keeps argmax tie-breaking
    stable when banks are merged by appending.
    """
    from dataclasses import replace as _replace

    entries: list[TextualPrototype] = []
    seen: set[tuple[str, int]] = set()
    d = None
    for concept_name, protos in groups:
        for p in protos:
            if p.source_concept != concept_name:
                p = _replace(p, source_concept=concept_name)
            key = (p.source_concept, p.source_mode)
            if key in seen:
                raise DuplicateEntryError(f"duplicate bank entry {key}")
            seen.add(key)
            if d is None:
                d = p.summary.shape[0]
            elif p.summary.shape[0] != d:
                raise DimensionMismatchError(
                    f"entry {key} has d={p.summary.shape[0]}, bank has d={d}"
                )
            entries.append(p)
    if not entries:
        raise InvalidConfigError("bank needs at least one prototype")
    return PrototypeBank(entries=tuple(entries), world_seed=world_seed)


def merge_banks(a: PrototypeBank, b: PrototypeBank) -> PrototypeBank:
    """Append b's entries after a's (order preserved, duplicates rejected)."""
    if a.world_seed != b.world_seed:
        raise InvalidConfigError("banks come from different worlds")
    return build_bank(
        [(e.source_concept, [e]) for e in list(a.entries) + list(b.entries)],
        a.world_seed,
    )


# ---------------------------------------------------------------------------
# end-to-end helper


def build_concept_bank(
    world: World,
    concept: ConceptSpec,
    pipeline: PipelineConfig,
    cfg: guidance.GuidanceConfig | None = None,
    jobs: int = 1,
) -> PrototypeBank:
    """Run prompts -> pairs -> diffs -> cluster -> optimize for one concept."""
    from .parallel import pmap
    from .semworld import sample_concept_prompts

    prompts = sample_concept_prompts(
        world, concept, pipeline.N, derive_seed(pipeline.seed, 0x11)
    )
    pg = generate_pairs(
        world, prompts, concept, pipeline.M, derive_seed(pipeline.seed, 0x22), cfg, jobs=jobs
    )
    ds = embedding_differences(world, pg)
    protos = cluster_prototypes(ds, pipeline.K, derive_seed(pipeline.seed, 0x33))

    def one(rank_proto: tuple[int, ImagePrototype]) -> TextualPrototype:
        rank, p = rank_proto
        return optimize_textual_prototype(
            world,
            p,
            pipeline.L,
            pipeline.U,
            pipeline.eta,
            derive_seed(pipeline.seed, 0x44, rank),
            source_concept=concept.name,
            source_mode=rank,
        )

    textual = pmap(one, list(enumerate(protos)), jobs)
    return build_bank([(concept.name, textual)], world.config.seed)
