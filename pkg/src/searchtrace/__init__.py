"""Toolkit for collecting and analyzing agentic search traces."""

from .trace import Frame, Trace, TraceStatus, THOUGHT, REFINEMENT
from .store import TraceStore, escape_field, unescape_field
from .tagparser import StreamTagParser, TagEvent, TagKind, extract_single
from .retrieval import (Document, Index, Retriever, RetrieverConfig, bm25_score,
                        build_index, format_information_block, load_corpus,
                        rerank_hook, search, tokenize)
from .protocol import (GenerateReply, GenerateRequest, MockGenerator, MockScript,
                       MockScriptEntry, SubprocessGenerator, TcpGenerator,
                       decode_message, encode_message)
from .orchestrator import AgentProfile, RunOutcome, build_prompt, run_arun, run_batch
from .analysis import (ReformulationState, TextStats, TraceStats, TransitionMatrix,
                       build_transition_matrix, classify_state, exact_repeat_rate,
                       hapax_ratio, per_iteration_distributions, trace_stats,
                       trace_transitions, text_stats, wh_word_rate,
                       within_trace_jaccard)

__all__ = [name for name in dir() if not name.startswith("_")]
