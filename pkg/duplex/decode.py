"""
Frame-synchronous beam search over the HAT decoder with shallow fusion.

A hypothesis scores ``am + alpha * elm - beta * ilm``, where ``am`` is the
transducer log-probability summed over every alignment that reaches the same
label prefix at the same frame, and ``elm``/``ilm`` are the external and
internal language model log-probabilities of the prefix. Both LM terms are
accumulated label by label, so pruning already sees the fused score; they
are stored separately so hypotheses can be rescored with other weights.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from duplex.corpus.vocabulary import TokenSequence
from duplex.hat import HatDecoder, PredictionState
from duplex.models.lm import ElmScorer

log = logging.getLogger(__name__)


class DecodeInputError(ValueError):
    """Raised when there is nothing to decode."""

    pass


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.0
    beta: float = 0.0
    beam_size: int = 8
    max_symbols_per_frame: int = 4

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"Fusion weights must be non-negative, got alpha={self.alpha} beta={self.beta}")
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be at least 1, got {self.beam_size}")
        if self.max_symbols_per_frame < 1:
            raise ValueError("max_symbols_per_frame must be at least 1")


def fused_score(am: float, elm: float, ilm: float, cfg: FusionConfig) -> float:
    return am + cfg.alpha * elm - cfg.beta * ilm


@dataclass(frozen=True)
class Hypothesis:
    tokens: TokenSequence
    am_logprob: float
    elm_logprob: float
    ilm_logprob: float
    pred_state: Optional[PredictionState]
    fused_score: float

    def to_record(self, utt_id: str) -> dict:
        return {
            "id": utt_id,
            "hyp_tokens": list(self.tokens),
            "am": self.am_logprob,
            "elm": self.elm_logprob,
            "ilm": self.ilm_logprob,
            "score": self.fused_score,
        }


def _make(tokens, am, elm, ilm, state, cfg) -> Hypothesis:
    return Hypothesis(tokens, am, elm, ilm, state, fused_score(am, elm, ilm, cfg))


def _merge(pool: dict, hyp: Hypothesis, cfg: FusionConfig) -> None:
    """Add ``hyp`` to ``pool``, summing acoustic probability with an equal-prefix entry."""
    existing = pool.get(hyp.tokens)
    if existing is None:
        pool[hyp.tokens] = hyp
        return
    am = float(np.logaddexp(existing.am_logprob, hyp.am_logprob))
    pool[hyp.tokens] = _make(hyp.tokens, am, existing.elm_logprob, existing.ilm_logprob, existing.pred_state, cfg)


def _prune(hyps, beam_size: int) -> list:
    return sorted(hyps, key=lambda h: h.fused_score, reverse=True)[:beam_size]


def beam_search(
    hat: HatDecoder,
    enc: np.ndarray,
    cfg: FusionConfig,
    elm: Optional[ElmScorer] = None,
) -> list:
    """
    Decode one encoded utterance.

    Within a frame, hypotheses are expanded in order of increasing length so
    that label expansions merge with equal prefixes before those are
    expanded in turn. Each hypothesis may emit at most
    ``cfg.max_symbols_per_frame`` labels per frame. The final frontier is
    returned sorted by descending fused score.

    Raises:
        DecodeInputError: If ``enc`` has no frames.
    """
    enc = np.asarray(enc, dtype=np.float64)
    if enc.ndim != 2 or enc.shape[0] == 0:
        raise DecodeInputError(f"Cannot decode an empty encoder output (shape {enc.shape})")
    if cfg.alpha > 0 and elm is None:
        log.debug("alpha > 0 without an external LM; the ELM term is zero")
    acoustic = hat.project_encoder(enc)
    silent_cache: dict = {}

    def ilm_next(state: PredictionState) -> np.ndarray:
        if state.context not in silent_cache:
            silent_cache[state.context] = hat.ilm_next_logprobs(state)
        return silent_cache[state.context]

    frontier = {(): _make((), 0.0, 0.0, 0.0, hat.initial_state(), cfg)}
    for t in range(acoustic.shape[0]):
        joint_cache: dict = {}
        next_frontier: dict = {}
        pool: dict = {tokens: (hyp, 0) for tokens, hyp in frontier.items()}
        while pool:
            length = min(len(tokens) for tokens in pool)
            level = {tokens: entry for tokens, entry in pool.items() if len(tokens) == length}
            for tokens in level:
                del pool[tokens]
            keep = _prune([hyp for hyp, _ in level.values()], cfg.beam_size)
            for hyp in keep:
                emitted = level[hyp.tokens][1]
                state = hyp.pred_state
                if state.context not in joint_cache:
                    joint_cache[state.context] = hat.joint_scores(acoustic[t], state)
                log_blank, log_stay, labels = joint_cache[state.context]
                blank = _make(hyp.tokens, hyp.am_logprob + log_blank, hyp.elm_logprob, hyp.ilm_logprob, state, cfg)
                _merge(next_frontier, blank, cfg)
                if emitted >= cfg.max_symbols_per_frame:
                    continue

                am_inc = log_stay + labels
                ilm_inc = ilm_next(state)
                elm_inc = elm.next_logprobs(hyp.tokens) if elm is not None else np.zeros_like(labels)
                fused_inc = am_inc + cfg.alpha * elm_inc - cfg.beta * ilm_inc
                order = np.argsort(-fused_inc, kind="stable")[: cfg.beam_size]
                for k in order:
                    label = int(k) + 1
                    extended = _make(
                        hyp.tokens + (label,),
                        hyp.am_logprob + float(am_inc[k]),
                        hyp.elm_logprob + float(elm_inc[k]),
                        hyp.ilm_logprob + float(ilm_inc[k]),
                        hat.step_prediction(state, label),
                        cfg,
                    )
                    previous = pool.get(extended.tokens)
                    if previous is None:
                        pool[extended.tokens] = (extended, emitted + 1)
                    else:
                        # equal prefixes merge; the merged entry keeps the smaller per-frame label count
                        merged = {extended.tokens: previous[0]}
                        _merge(merged, extended, cfg)
                        pool[extended.tokens] = (merged[extended.tokens], min(previous[1], emitted + 1))
        frontier = {hyp.tokens: hyp for hyp in _prune(next_frontier.values(), cfg.beam_size)}
    return _prune(frontier.values(), len(frontier))


def rescore(hyps: list, cfg: FusionConfig) -> list:
    """Recompute fused scores with new weights and re-rank; stored components are unchanged."""
    rescored = [replace(h, fused_score=fused_score(h.am_logprob, h.elm_logprob, h.ilm_logprob, cfg)) for h in hyps]
    return sorted(rescored, key=lambda h: h.fused_score, reverse=True)


def greedy_decode(hat: HatDecoder, enc: np.ndarray) -> TokenSequence:
    return beam_search(hat, enc, FusionConfig(alpha=0.0, beta=0.0, beam_size=1))[0].tokens
