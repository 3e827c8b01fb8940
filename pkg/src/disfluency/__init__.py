"""Disfluency detection: noisy-channel n-best analyses reranked with LM features."""
from .corpus import Label, Token, Utterance, CorpusSplit, parse_annotated, normalize, make_folds, synthesize_corpus
from .channel import ChannelModel, Analysis, CandidateList, train_channel, score_channel, nbest, brute_force_nbest
from .ngram import NgramModel, train_ngram
from .lstm import LstmConfig, LstmModel, Direction, train_lstm, lstm_logprob, check_gradients
from .reranker import RerankerModel, train_reranker, predict
from .evaluate import EvalReport, score
from .pipeline import PipelineConfig, run_pipeline, ablation_matrix

__version__ = "0.1.0"
