"""Compose pools of LoRA adapter updates for unseen tasks."""

from .aggregate import ViewRecord, aggregate_records, oracle_select, reliability_weights, score_answers, select_answer
from .evaluation import audit, exact_match, flip_counts, normalize_answer, paired_permutation_test, stratified_bootstrap_ci
from .lasrc import BlockComposition, LasrcConfig, gamma_schedule, lasrc_merge
from .merge import MergeConfig, dare_merge, linear_merge, merge, ties_merge
from .retrieval import PoolManifest, build_support, cosine_topk, load_manifest, retrieve_view
from .sdp import SdpConfig, apply_sdp, sample_mask, sdp_bundle
from .tensor_store import AdapterBundle, LowRankPair, TensorBlob, block_vector, effective_update, load_bundle, save_bundle
from .weight_search import WeightVector, search_weights

__version__ = "0.1.0"
