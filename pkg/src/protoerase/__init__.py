"""Concept erasure via multi-mode concept prototypes, on a synthetic diffusion world.

Pipeline: build a seeded semantic world with an analytic denoiser, extract
multi-mode concept prototypes from contrastive embedding differences,
transfer them to soft prompts by cosine ascent, and apply the best-matching
prototype as negative guidance during reverse diffusion. Every stage has an
independent oracle, so the whole thing is verifiable on a desk.
"""

from .semworld import (
    ConceptSpec,
    Prompt,
    World,
    WorldConfig,
    build_world,
    contains_concept,
    contrastive_prompt,
    ground_truth_semantics,
    load_world,
    sample_concept_prompts,
    sample_neutral_prompts,
    save_world,
)
from .encoders import SoftPrompt, cosine, embed_tokens, encode_prompt, image_encoder, text_encoder
from .guidance import (
    Condition,
    GuidanceConfig,
    LatentState,
    NoiseSchedule,
    condition_from_prompt,
    denoise_cond,
    denoise_uncond,
    guided_epsilon,
    make_schedule,
    reverse_step,
    sample,
)
from .protolab import (
    ImagePrototype,
    PipelineConfig,
    PrototypeBank,
    TextualPrototype,
    build_bank,
    build_concept_bank,
    cluster_prototypes,
    embedding_differences,
    generate_pairs,
    merge_banks,
    optimize_textual_prototype,
)
from .erasure import (
    ErasureSession,
    GenerationRecord,
    calibrate_tau,
    erase_and_generate,
    load_bank,
    make_session,
    read_records,
    save_bank,
    select_prototype,
    write_records,
)
from .evalkit import (
    AblationResult,
    DetectorConfig,
    EvalReport,
    ablation_k,
    calibrate_detector,
    context_alignment,
    emit_report,
    flagged,
    flagged_rate,
    nearest_images,
    nearest_tokens,
    rescore_records,
)

__version__ = "0.1.0"
