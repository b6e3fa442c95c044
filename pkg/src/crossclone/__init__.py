"""Zero-shot cross-language code clone retrieval.

Pipeline: snippet-contrast pre-training builds language-wise embedding
structure, then adversarial fine-tuning (clone objective + reversed-gradient
domain classifier + cycle-consistency mappers) aligns the languages; clones
are retrieved by cosine similarity and scored with MAP.
"""

__version__ = "0.1.0"

from .cloneloss import LossWeights, clone_loss, total_loss
from .corpus import (
    CloneExample,
    Program,
    SnippetText,
    SnippetWindow,
    gen_synthetic,
    load_corpus,
    make_windows,
    sample_clone_batch,
    save_corpus,
    segment,
)
from .csp import CspBatch, LanguageQueue, csp_loss, queue_push, sample_negatives
from .cycle import CycleMapper, build_mapper, cycle_loss, map_apply
from .adversarial import (
    DomainHead,
    GrlConfig,
    domain_logits,
    domain_loss,
    grl_apply,
    grl_lambda,
)
from .encoder import (
    EncoderConfig,
    SnippetEncoder,
    Vocabulary,
    build_encoder,
    cosine,
    cosine_matrix,
    encode_batch,
    encode_one,
    tokenize,
)
from .retrieval import (
    OneHotProblemEncoder,
    RetrievalRun,
    average_precision,
    evaluate,
    export_embeddings,
    load_embeddings,
    map_score,
    rank,
)
from .trainer import (
    ScheduleConfig,
    TrainState,
    checkpoint_load,
    checkpoint_save,
    run_adversarial_stage,
    run_csp_stage,
    run_training,
)
