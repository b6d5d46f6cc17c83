"""Entity disambiguation at desk scale.

Three linker families over one knowledge-base model: exact alias
tables, a string-similarity fallback, and a trainable bi-encoder with
hard-negative mining over a maximum-inner-product index, plus the
recall evaluation harness tying them together.
"""

from .aliases import AliasTable, build_alias_table, fold_case, link_alias
from .encoder import EncoderParams, embed, embed_backward, load_embeddings, save_embeddings
from .evaluator import EvalReport, evaluate, recall_at_k
from .kb import (
    Entity,
    KnowledgeBase,
    Mention,
    MentionCounts,
    entity_set_intersection,
    extract_mentions,
    load_kb,
    recall_upper_bound,
    select_description_language,
)
from .stringsim import indel_distance, link_by_similarity, normalized_indel
from .tokenizer import TokenizedDoc, Vocabulary, compose_description, extract_mention_window, tokenize
from .trainer import (
    AdamState,
    TrainConfig,
    TrainingBatch,
    build_batch,
    run_finetuning,
    scaled_softmax_xent,
    similarity_matrix,
    train_step,
)
from .vindex import SearchHit, SearchIndex, build_index, query_negatives, search

__version__ = "0.1.0"
