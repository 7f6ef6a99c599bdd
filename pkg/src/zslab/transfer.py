"""Two-phase transfer protocol and decoding.

Phase 1 pretrains the shared encoder with masked prediction over the source
and pivot monolingual streams; phase 2 optionally continues with a parallel
objective (tlm / brlm_ha / brlm_sa) from phase 1's final parameters. The
parent translation model is then trained on pivot->target data with the
first k encoder layers (and optionally the embeddings) frozen, and the very
same checkpoint decodes the zero-shot source->target direction.

Stopping everywhere is patience-based on a held-out metric with the best
checkpoint restored, since desk-scale corpora converge at unpredictable step
counts.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

from .bpe import BOS, EOS, BpeModel
from .corpus import Batch, ParallelCorpus, SentencePair, batch_iterator, pad_batch, pair_batch_iterator
from .model import (
    MaskingPolicy,
    ModelConfig,
    brlm_ha_loss,
    brlm_sa_loss,
    decode_states,
    encode,
    frozen_param_names,
    init_decoder_params,
    init_encoder_params,
    mlm_loss,
    nmt_loss,
    objective_accuracy,
    tlm_loss,
)
from .optim import AdamHyper, AdamState, adam_step
from .tensor import Tape, Tensor, backward, checkpoint_checksums, load_checkpoint, save_checkpoint

PHASE2_OBJECTIVES = ("none", "tlm", "brlm_ha", "brlm_sa")


@dataclass
class StopRule:
    eval_every: int = 50
    patience: int = 5
    max_steps: int = 1500
    heldout_fraction: float = 0.1
    eval_cap: int = 400  # held-out items used per evaluation


@dataclass
class PretrainSchedule:
    phase2: str = "brlm_sa"  # one of PHASE2_OBJECTIVES
    phase1_stop: StopRule = field(default_factory=StopRule)
    phase2_stop: StopRule = field(default_factory=StopRule)
    batch_tokens: int = 2000
    policy: MaskingPolicy = field(default_factory=MaskingPolicy)

    def __post_init__(self):
        if self.phase2 not in PHASE2_OBJECTIVES:
            raise ValueError(f"unknown phase-2 objective '{self.phase2}'")


@dataclass
class DecodeConfig:
    beam_size: int = 1
    length_penalty_alpha: float = 1.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


@dataclass
class TransferConfig:
    freeze_layers: int = 1
    freeze_embeddings: bool = True
    stop: StopRule = field(default_factory=StopRule)
    batch_tokens: int = 2000
    decode: DecodeConfig = field(default_factory=DecodeConfig)


@dataclass
class TrainingLog:
    rows: list[tuple[str, int, str, float]] = field(default_factory=list)

    def add(self, phase: str, step: int, metric: str, value: float) -> None:
        self.rows.append((phase, step, metric, float(value)))

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "step", "metric_name", "value"])
            w.writerows(self.rows)

    def series(self, phase: str, metric: str) -> list[tuple[int, float]]:
        return [(s, v) for p, s, m, v in self.rows if p == phase and m == metric]


@dataclass
class NmtModel:
    enc_params: dict[str, Tensor]
    dec_params: dict[str, Tensor]
    cfg: ModelConfig

    def all_params(self) -> dict[str, Tensor]:
        return {**self.enc_params, **self.dec_params}


def save_model(path, params: dict[str, Tensor], cfg: ModelConfig, meta: Optional[dict] = None):
    save_checkpoint(path, params)
    info = {"model_config": dict(cfg.__dict__), "meta": meta or {}}
    Path(str(path) + ".meta.yaml").write_text(yaml.safe_dump(info, sort_keys=True))


def load_model_params(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    params = load_checkpoint(path)
    info = yaml.safe_load(Path(str(path) + ".meta.yaml").read_text())
    cfg = ModelConfig(**info["model_config"])
    return params, cfg, info.get("meta", {})


def load_nmt_model(path) -> NmtModel:
    params, cfg, _ = load_model_params(path)
    enc = {n: t for n, t in params.items() if n.startswith("enc.")}
    dec = {n: t for n, t in params.items() if n.startswith("dec.")}
    return NmtModel(enc, dec, cfg)


# ---------------------------------------------------------------------------
# Generic patience-trained loop
# ---------------------------------------------------------------------------


def _heldout_split(items: list, fraction: float, seed: int) -> tuple[list, list]:
    order = np.random.default_rng(seed).permutation(len(items))
    n_held = max(1, int(round(len(items) * fraction)))
    held = [items[int(i)] for i in order[:n_held]]
    train = [items[int(i)] for i in order[n_held:]]
    return train, held


def _train_with_patience(
    phase: str,
    trainable: dict[str, Tensor],
    batches_for_epoch: Callable[[int], Sequence],
    loss_for_batch: Callable[[object, int], Tensor],
    eval_metric: Callable[[], float],
    stop: StopRule,
    hyper: AdamHyper,
    log: TrainingLog,
) -> None:
    """Adam-train until the held-out metric (higher is better) stops improving
    for `patience` evaluations or max_steps is hit; restores the best state."""
    state = AdamState(hyper=hyper)
    best_metric = -np.inf
    best_snapshot: Optional[dict[str, np.ndarray]] = None
    bad_evals = 0
    step = 0
    t0 = time.perf_counter()

    def evaluate() -> bool:
        nonlocal best_metric, best_snapshot, bad_evals
        metric = eval_metric()
        log.add(phase, step, "heldout_metric", metric)
        if metric > best_metric:
            best_metric = metric
            best_snapshot = {n: t.data.copy() for n, t in trainable.items()}
            bad_evals = 0
        else:
            bad_evals += 1
        return bad_evals >= stop.patience

    done = False
    epoch = 0
    while not done:
        for batch in batches_for_epoch(epoch):
            step += 1
            with Tape() as tape:
                tape.watch(*trainable.values())
                loss = loss_for_batch(batch, step)
                backward(tape, loss)
            grads = {n: t.grad for n, t in trainable.items()}
            adam_step(trainable, grads, state)
            if step % 25 == 0:
                log.add(phase, step, "train_loss", loss.item())
            if step % stop.eval_every == 0 and evaluate():
                done = True
                break
            if step >= stop.max_steps:
                done = True
                break
        epoch += 1
        if step == 0:
            raise ValueError(f"phase '{phase}' received no batches")
    if step % stop.eval_every != 0:
        evaluate()
    if best_snapshot is not None:
        for n, t in trainable.items():
            t.data[...] = best_snapshot[n]
    log.add(phase, step, "best_heldout_metric", best_metric)
    log.add(phase, step, "wall_seconds", time.perf_counter() - t0)


def _mask_seed_for_step(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def pretrain(
    schedule: PretrainSchedule,
    mono_sentences: list[list[int]],
    parallel_pairs: Optional[list[SentencePair]],
    cfg: ModelConfig,
    hyper: AdamHyper,
    seed: int,
    log: Optional[TrainingLog] = None,
    init_params: Optional[dict[str, Tensor]] = None,
) -> tuple[dict[str, Tensor], TrainingLog]:
    """Phase 1: masked-token pretraining over the interleaved monolingual
    streams. Phase 2 (optional) continues from phase 1's parameters on
    parallel data. Held-out masked accuracy is the stopping metric."""
    log = log if log is not None else TrainingLog()
    rng = np.random.default_rng(seed)
    params = init_params if init_params is not None else init_encoder_params(cfg, rng)
    dropout_rng = np.random.default_rng(seed + 101)

    train_mono, held_mono = _heldout_split(mono_sentences, schedule.phase1_stop.heldout_fraction, seed)
    held_mono = held_mono[: schedule.phase1_stop.eval_cap]

    def mono_batches(epoch: int):
        return batch_iterator(
            train_mono, schedule.batch_tokens, seed=seed + epoch, shuffle=True,
            length_limit=cfg.max_positions - 1,
        )

    def mlm_batch_loss(batch: Batch, step: int) -> Tensor:
        sents = [train_mono[r] for r in batch.rows]
        return mlm_loss(
            params, cfg, sents, mask_seed=_mask_seed_for_step(seed, step),
            rng=dropout_rng, train=True, policy=schedule.policy,
        )

    def mlm_eval() -> float:
        c, t = objective_accuracy("mlm", params, cfg, held_mono, mask_seed=seed)
        return c / t

    _train_with_patience(
        "phase1_mlm", params, mono_batches, mlm_batch_loss, mlm_eval,
        schedule.phase1_stop, hyper, log,
    )

    if schedule.phase2 == "none":
        return params, log

    if not parallel_pairs:
        raise ValueError(f"phase-2 objective '{schedule.phase2}' needs parallel data")
    loss_fn = {"tlm": tlm_loss, "brlm_ha": brlm_ha_loss, "brlm_sa": brlm_sa_loss}[schedule.phase2]
    train_pairs, held_pairs = _heldout_split(
        parallel_pairs, schedule.phase2_stop.heldout_fraction, seed + 1
    )
    held_pairs = held_pairs[: schedule.phase2_stop.eval_cap]

    def pair_batches(epoch: int):
        return pair_batch_iterator(
            train_pairs, schedule.batch_tokens, seed=seed + 31 + epoch, shuffle=True,
            length_limit=cfg.max_positions - 1,
        )

    def pair_batch_loss(pairs: list[SentencePair], step: int) -> Tensor:
        return loss_fn(
            params, cfg, pairs, mask_seed=_mask_seed_for_step(seed + 7, step),
            rng=dropout_rng, train=True, policy=schedule.policy,
        )

    def pair_eval() -> float:
        if schedule.phase2 == "tlm":
            c, t = objective_accuracy("tlm", params, cfg, held_pairs, mask_seed=seed)
        else:
            c, t = objective_accuracy(
                schedule.phase2, params, cfg, held_pairs, mask_seed=seed,
                directions=("fwd", "rev"),
            )
        return c / t

    _train_with_patience(
        f"phase2_{schedule.phase2}", params, pair_batches, pair_batch_loss, pair_eval,
        schedule.phase2_stop, hyper, log,
    )
    return params, log


# ---------------------------------------------------------------------------
# Parent training with freezing
# ---------------------------------------------------------------------------


def train_parent(
    enc_params: dict[str, Tensor],
    pairs: list[SentencePair],
    cfg: ModelConfig,
    transfer_cfg: TransferConfig,
    hyper: AdamHyper,
    seed: int,
    log: Optional[TrainingLog] = None,
    dec_params: Optional[dict[str, Tensor]] = None,
    phase: str = "parent",
) -> tuple[NmtModel, TrainingLog]:
    """Train the translation model on supervised pairs, freezing the first k
    encoder layers (and optionally embeddings). Frozen parameters are audited
    by checksum to be bitwise unchanged. Pass dec_params to resume training
    an existing model instead of initializing a fresh decoder."""
    if transfer_cfg.freeze_layers > cfg.layers:
        raise ValueError(
            f"freeze_layers {transfer_cfg.freeze_layers} > encoder layers {cfg.layers}"
        )
    log = log if log is not None else TrainingLog()
    enc = {n: t for n, t in enc_params.items() if n.startswith("enc.")}
    if dec_params is None:
        dec_params = init_decoder_params(cfg, np.random.default_rng(seed + 17))
    model = NmtModel(enc, dec_params, cfg)

    frozen = frozen_param_names(enc, transfer_cfg.freeze_layers,
                                transfer_cfg.freeze_embeddings, cfg.layers)
    frozen_before = checkpoint_checksums({n: enc[n] for n in frozen})
    trainable = {n: t for n, t in model.all_params().items() if n not in frozen}

    train_pairs, held_pairs = _heldout_split(pairs, transfer_cfg.stop.heldout_fraction, seed + 2)
    held_pairs = held_pairs[: transfer_cfg.stop.eval_cap]
    dropout_rng = np.random.default_rng(seed + 301)

    def batches(epoch: int):
        return pair_batch_iterator(
            train_pairs, transfer_cfg.batch_tokens, seed=seed + 61 + epoch, shuffle=True,
            length_limit=cfg.max_positions - 2,
        )

    def batch_loss(batch_pairs: list[SentencePair], step: int) -> Tensor:
        return nmt_loss(model.enc_params, model.dec_params, cfg, batch_pairs,
                        rng=dropout_rng, train=True)

    def eval_metric() -> float:
        loss = nmt_loss(model.enc_params, model.dec_params, cfg, held_pairs)
        return -loss.item()

    _train_with_patience(phase, trainable, batches, batch_loss, eval_metric,
                         transfer_cfg.stop, hyper, log)

    frozen_after = checkpoint_checksums({n: enc[n] for n in frozen})
    if frozen_after != frozen_before:
        changed = [n for n in frozen_before if frozen_before[n] != frozen_after[n]]
        raise AssertionError(f"frozen parameters changed during training: {changed}")
    log.add(phase, 0, "frozen_params", float(len(frozen)))
    return model, log


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def _length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _greedy_decode_batch(model: NmtModel, src_rows: list[list[int]]) -> list[list[int]]:
    sb = pad_batch([row + [EOS] for row in src_rows])
    enc_out = encode(model.enc_params, model.cfg, sb.ids, sb.mask)
    B = len(src_rows)
    caps = [min(2 * len(r) + 10, model.cfg.max_positions - 1) for r in src_rows]
    hyps: list[list[int]] = [[] for _ in range(B)]
    done = [False] * B
    dec_rows = [[BOS] for _ in range(B)]
    while not all(done):
        db = pad_batch(dec_rows)
        logits = decode_states(
            model.enc_params, model.dec_params, model.cfg, enc_out, db.ids, db.mask
        ).data
        for b in range(B):
            if done[b]:
                continue
            step_logits = logits[b, len(dec_rows[b]) - 1]
            nxt = int(step_logits.argmax())
            if nxt == EOS or len(hyps[b]) >= caps[b]:
                done[b] = True
                continue
            hyps[b].append(nxt)
            dec_rows[b].append(nxt)
    return hyps


def _log_softmax(row: np.ndarray) -> np.ndarray:
    z = row - row.max()
    return z - np.log(np.exp(z).sum())


def _beam_decode_one(model: NmtModel, src: list[int], decode_cfg: DecodeConfig) -> list[int]:
    sb = pad_batch([src + [EOS]])
    enc_out = encode(model.enc_params, model.cfg, sb.ids, sb.mask)
    cap = min(2 * len(src) + 10, model.cfg.max_positions - 1)
    beams: list[tuple[float, list[int], bool]] = [(0.0, [BOS], False)]
    width = decode_cfg.beam_size
    for _ in range(cap + 1):
        if all(done for _, _, done in beams):
            break
        candidates: list[tuple[float, list[int], bool]] = []
        for score, ids, done in beams:
            if done:
                candidates.append((score, ids, True))
                continue
            db = pad_batch([ids])
            logits = decode_states(
                model.enc_params, model.dec_params, model.cfg, enc_out, db.ids, db.mask
            ).data[0, len(ids) - 1]
            logp = _log_softmax(logits)
            if len(ids) - 1 >= cap:
                candidates.append((score + float(logp[EOS]), ids, True))
                continue
            for tok in np.argsort(logp)[::-1][:width]:
                tok = int(tok)
                if tok == EOS:
                    candidates.append((score + float(logp[tok]), ids, True))
                else:
                    candidates.append((score + float(logp[tok]), ids + [tok], False))
        candidates.sort(key=lambda c: c[0], reverse=True)
        beams = candidates[:width]
    # the length penalty only reranks completed hypotheses
    ranked = sorted(
        beams,
        key=lambda c: c[0] / _length_penalty(max(len(c[1]) - 1, 1), decode_cfg.length_penalty_alpha),
        reverse=True,
    )
    return ranked[0][1][1:]


def translate(
    model: NmtModel,
    src_sentences: list[str],
    bpe: BpeModel,
    decode_cfg: Optional[DecodeConfig] = None,
    batch_sentences: int = 64,
) -> list[str]:
    """Translate text with beam search (beam 1 decodes greedily in batches).

    The hypothesis score is log-probability normalized by
    ((5 + length) / 6) ** alpha; generation stops at EOS or at
    2 * source_length + 10 tokens."""
    decode_cfg = decode_cfg or DecodeConfig()
    out: list[Optional[str]] = [None] * len(src_sentences)
    todo = [(i, bpe.encode(s)) for i, s in enumerate(src_sentences)]
    for i, ids in todo:
        if not ids:
            out[i] = ""
    todo = [(i, ids) for i, ids in todo if ids]
    if decode_cfg.beam_size == 1:
        for start in range(0, len(todo), batch_sentences):
            chunk = todo[start : start + batch_sentences]
            hyps = _greedy_decode_batch(model, [ids for _, ids in chunk])
            for (i, _), hyp in zip(chunk, hyps):
                out[i] = bpe.decode(hyp)
    else:
        for i, ids in todo:
            out[i] = bpe.decode(_beam_decode_one(model, ids, decode_cfg))
    return [s if s is not None else "" for s in out]


class NmtTranslator:
    """Callable text-to-text wrapper around a trained model."""

    def __init__(self, model: NmtModel, bpe: BpeModel, decode_cfg: Optional[DecodeConfig] = None):
        self.model = model
        self.bpe = bpe
        self.decode_cfg = decode_cfg or DecodeConfig()

    def translate(self, sentences: list[str]) -> list[str]:
        return translate(self.model, sentences, self.bpe, self.decode_cfg)


def _run_translator(t, sentences: list[str]) -> list[str]:
    if hasattr(t, "translate"):
        return t.translate(sentences)
    return t(sentences)


def pivot_translate(first, second, src_sentences: list[str]) -> tuple[list[str], dict]:
    """Two-step decoding through the pivot; intermediate text is re-encoded
    by the second translator's own subword model."""
    t0 = time.perf_counter()
    mid = _run_translator(first, src_sentences)
    t1 = time.perf_counter()
    out = _run_translator(second, mid)
    t2 = time.perf_counter()
    timing = {"first_seconds": t1 - t0, "second_seconds": t2 - t1, "total_seconds": t2 - t0}
    return out, timing


def back_translate(reverse_translator, tgt_sentences: list[str]) -> ParallelCorpus:
    """Translate target-side monolingual text into the source side, yielding
    (pseudo-source, target) pairs flagged as pseudo data."""
    pseudo_src = _run_translator(reverse_translator, tgt_sentences)
    keep_src, keep_tgt = [], []
    for s, t in zip(pseudo_src, tgt_sentences):
        if s.strip() == "" or t.strip() == "":
            continue
        keep_src.append(s)
        keep_tgt.append(t)
    return ParallelCorpus(keep_src, keep_tgt, pseudo=[True] * len(keep_src))
