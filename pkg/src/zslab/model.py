"""Transformer encoder/decoder and the training objectives.

One parameter dict covers a model; names are hierarchical
(``enc.layer0.attn.head2.wq`` ...) and the encoder layer index in the name is
the unit of freezing during transfer. The same encoder parameters process
every language — there are no per-language weights anywhere.

Objectives:
  * ``mlm_loss``       — predict masked tokens from monolingual context.
  * ``tlm_loss``       — same, over a concatenated sentence pair whose second
                          segment restarts position numbering at zero.
  * ``brlm_ha_loss``   — masked prediction fused with the mean encoder state
                          of hard-aligned positions on the other side.
  * ``brlm_sa_loss``   — masked prediction through an extra cross-attention
                          layer (queries: masked side, keys/values: clean side).
  * ``nmt_loss``       — teacher-forced translation cross-entropy.

Masking randomness is derived per sentence from (seed, token ids), so every
loss is invariant to batch-internal sentence order and reproducible given the
seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bpe import BOS, EOS, MASK, NUM_SPECIALS, PAD, UNK
from .corpus import SentencePair, pad_batch
from .tensor import (
    Tensor,
    add,
    concat,
    cross_entropy_loss,
    dropout,
    embedding_gather,
    layer_norm,
    matmul,
    relu,
    scale,
    softmax,
)

NEG_BIAS = -1e9  # additive attention bias for excluded keys


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_positions: int = 128
    dropout: float = 0.1
    attn_dropout: float = 0.0
    tied_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _attn_block(params, prefix, cfg, rng):
    d, dk = cfg.d_model, cfg.d_head
    for h in range(cfg.heads):
        for w in ("wq", "wk", "wv"):
            params[f"{prefix}.head{h}.{w}"] = Tensor(_xavier(rng, d, dk), True)
    params[f"{prefix}.wo"] = Tensor(_xavier(rng, d, d), True)
    params[f"{prefix}.bo"] = Tensor(np.zeros(d), True)


def _ln_block(params, prefix, cfg):
    params[f"{prefix}.gain"] = Tensor(np.ones(cfg.d_model), True)
    params[f"{prefix}.bias"] = Tensor(np.zeros(cfg.d_model), True)


def _ffn_block(params, prefix, cfg, rng):
    params[f"{prefix}.w1"] = Tensor(_xavier(rng, cfg.d_model, cfg.d_ff), True)
    params[f"{prefix}.b1"] = Tensor(np.zeros(cfg.d_ff), True)
    params[f"{prefix}.w2"] = Tensor(_xavier(rng, cfg.d_ff, cfg.d_model), True)
    params[f"{prefix}.b2"] = Tensor(np.zeros(cfg.d_model), True)


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Encoder stack plus the masked-prediction head and the bridge layer."""
    p: dict[str, Tensor] = {}
    p["enc.emb.token"] = Tensor(_xavier(rng, cfg.vocab_size, cfg.d_model), True)
    p["enc.emb.pos"] = Tensor(_xavier(rng, cfg.max_positions, cfg.d_model), True)
    for i in range(cfg.layers):
        base = f"enc.layer{i}"
        _ln_block(p, f"{base}.ln1", cfg)
        _attn_block(p, f"{base}.attn", cfg, rng)
        _ln_block(p, f"{base}.ln2", cfg)
        _ffn_block(p, f"{base}.ffn", cfg, rng)
    _ln_block(p, "enc.final_ln", cfg)
    p["out.bias"] = Tensor(np.zeros(cfg.vocab_size), True)
    if not cfg.tied_embeddings:
        p["out.weight"] = Tensor(_xavier(rng, cfg.vocab_size, cfg.d_model), True)
    _attn_block(p, "bridge.attn", cfg, rng)
    _ln_block(p, "bridge.ln", cfg)
    return p


def init_decoder_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    p["dec.emb.token"] = Tensor(_xavier(rng, cfg.vocab_size, cfg.d_model), True)
    p["dec.emb.pos"] = Tensor(_xavier(rng, cfg.max_positions, cfg.d_model), True)
    for i in range(cfg.dec_layers):
        base = f"dec.layer{i}"
        _ln_block(p, f"{base}.ln1", cfg)
        _attn_block(p, f"{base}.self_attn", cfg, rng)
        _ln_block(p, f"{base}.ln_cross", cfg)
        _attn_block(p, f"{base}.cross_attn", cfg, rng)
        _ln_block(p, f"{base}.ln2", cfg)
        _ffn_block(p, f"{base}.ffn", cfg, rng)
    _ln_block(p, "dec.final_ln", cfg)
    p["dec.out.bias"] = Tensor(np.zeros(cfg.vocab_size), True)
    if not cfg.tied_embeddings:
        p["dec.out.weight"] = Tensor(_xavier(rng, cfg.vocab_size, cfg.d_model), True)
    return p


def encoder_param_names(params: dict[str, Tensor]) -> list[str]:
    return [n for n in params if n.startswith(("enc.", "out.", "bridge."))]


def frozen_param_names(
    params: dict[str, Tensor], freeze_layers: int, freeze_embeddings: bool, total_layers: int
) -> set[str]:
    """Names excluded from updates: layers 0..k-1, optionally the encoder
    embeddings, and the encoder's final norm once every layer is frozen."""
    frozen = set()
    for name in params:
        for i in range(freeze_layers):
            if name.startswith(f"enc.layer{i}."):
                frozen.add(name)
        if freeze_embeddings and name.startswith("enc.emb."):
            frozen.add(name)
        if freeze_layers >= total_layers and name.startswith("enc.final_ln."):
            frozen.add(name)
    return frozen


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------


@dataclass
class MaskingPolicy:
    select_rate: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1
    keep_prob: float = 0.1

    def __post_init__(self):
        total = self.mask_prob + self.random_prob + self.keep_prob
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"mask/random/keep probabilities sum to {total}, not 1")
        if not 0.0 < self.select_rate <= 1.0:
            raise ValueError("select_rate must be in (0, 1]")


@dataclass
class MaskingOutcome:
    corrupted_ids: list[int]
    targets: list[int]  # original id at masked positions, -1 elsewhere
    masked_positions: list[int]
    degenerate: bool = False  # nothing was maskable


# Structural specials are never selected; UNK is excluded too so masked
# targets are always real vocabulary items.
_UNMASKABLE = {PAD, BOS, EOS, MASK, UNK}


def apply_masking(
    ids: Sequence[int],
    rng: np.random.Generator,
    policy: MaskingPolicy,
    vocab_size: int,
) -> MaskingOutcome:
    """Select eligible tokens at select_rate and corrupt them 80/10/10.

    At least one token is forced when the independent draws select none; a
    sentence with no eligible token at all comes back flagged degenerate.
    """
    ids = list(ids)
    eligible = [i for i, t in enumerate(ids) if t not in _UNMASKABLE]
    if not eligible:
        return MaskingOutcome(ids, [-1] * len(ids), [], degenerate=True)
    picks = [i for i in eligible if rng.random() < policy.select_rate]
    if not picks:
        picks = [eligible[int(rng.integers(0, len(eligible)))]]
    corrupted = list(ids)
    targets = [-1] * len(ids)
    for i in picks:
        targets[i] = ids[i]
        r = rng.random()
        if r < policy.mask_prob:
            corrupted[i] = MASK
        elif r < policy.mask_prob + policy.random_prob:
            corrupted[i] = int(rng.integers(NUM_SPECIALS, vocab_size))
    return MaskingOutcome(corrupted, targets, sorted(picks))


def sentence_mask_rng(seed: int, ids: Sequence[int]) -> np.random.Generator:
    """Masking stream derived from the sentence itself, so batch order and
    padding never change which tokens are corrupted."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    h.update(np.asarray(ids, dtype=np.int64).tobytes())
    return np.random.default_rng(int.from_bytes(h.digest(), "little"))


# ---------------------------------------------------------------------------
# Encoder / decoder forward passes
# ---------------------------------------------------------------------------


@dataclass
class EncoderStates:
    layers: list[Tensor]  # residual-stream output of each layer, [B, L, D]
    final: Tensor  # post final-norm encoder output, [B, L, D]
    pad_mask: np.ndarray  # [B, L] True at real tokens

    @property
    def top(self) -> Tensor:
        return self.final


def _key_pad_bias(q_len: int, pad_mask: np.ndarray) -> Tensor:
    bias = np.where(pad_mask[:, None, :], 0.0, NEG_BIAS)
    return Tensor(np.broadcast_to(bias, (pad_mask.shape[0], q_len, pad_mask.shape[1])).copy())


def _multi_head_attention(
    params: dict[str, Tensor],
    prefix: str,
    q_in: Tensor,
    kv_in: Tensor,
    bias: Tensor,
    cfg: ModelConfig,
    rng: Optional[np.random.Generator],
    train: bool,
) -> Tensor:
    heads = []
    inv_sqrt = 1.0 / np.sqrt(cfg.d_head)
    for h in range(cfg.heads):
        q = matmul(q_in, params[f"{prefix}.head{h}.wq"])
        k = matmul(kv_in, params[f"{prefix}.head{h}.wk"])
        v = matmul(kv_in, params[f"{prefix}.head{h}.wv"])
        scores = add(scale(matmul(q, k, transpose_b=True), inv_sqrt), bias)
        attn = softmax(scores, axis=-1)
        if train and cfg.attn_dropout > 0:
            attn = dropout(attn, cfg.attn_dropout, rng)
        heads.append(matmul(attn, v))
    merged = matmul(concat(heads, axis=-1), params[f"{prefix}.wo"])
    return add(merged, params[f"{prefix}.bo"])


def _residual_dropout(x: Tensor, cfg, rng, train) -> Tensor:
    if train and cfg.dropout > 0:
        return dropout(x, cfg.dropout, rng)
    return x


def _embed(params, prefix, cfg, ids: np.ndarray, positions: np.ndarray) -> Tensor:
    if positions.max(initial=0) >= cfg.max_positions:
        raise ValueError(
            f"position overflow: {int(positions.max())} >= max_positions {cfg.max_positions}"
        )
    tok = embedding_gather(params[f"{prefix}.emb.token"], ids)
    pos = embedding_gather(params[f"{prefix}.emb.pos"], positions)
    return add(tok, pos)


def encode(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    ids: np.ndarray,
    pad_mask: np.ndarray,
    positions: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
) -> EncoderStates:
    """Pre-norm encoder stack; attention never reads PAD keys. Returns every
    layer's output (analyses need them) plus the final normalized states."""
    B, L = ids.shape
    if positions is None:
        positions = np.broadcast_to(np.arange(L), (B, L))
    x = _residual_dropout(_embed(params, "enc", cfg, ids, positions), cfg, rng, train)
    bias = _key_pad_bias(L, pad_mask)
    outputs = []
    for i in range(cfg.layers):
        base = f"enc.layer{i}"
        h = layer_norm(x, params[f"{base}.ln1.gain"], params[f"{base}.ln1.bias"])
        attn = _multi_head_attention(params, f"{base}.attn", h, h, bias, cfg, rng, train)
        x = add(x, _residual_dropout(attn, cfg, rng, train))
        h2 = layer_norm(x, params[f"{base}.ln2.gain"], params[f"{base}.ln2.bias"])
        ff = matmul(relu(add(matmul(h2, params[f"{base}.ffn.w1"]), params[f"{base}.ffn.b1"])),
                    params[f"{base}.ffn.w2"])
        ff = add(ff, params[f"{base}.ffn.b2"])
        x = add(x, _residual_dropout(ff, cfg, rng, train))
        outputs.append(x)
    final = layer_norm(x, params["enc.final_ln.gain"], params["enc.final_ln.bias"])
    return EncoderStates(layers=outputs, final=final, pad_mask=pad_mask)


def output_logits(params: dict[str, Tensor], cfg: ModelConfig, states: Tensor) -> Tensor:
    """Project hidden states to vocabulary logits with the (tied) embedding."""
    weight = params["enc.emb.token"] if cfg.tied_embeddings else params["out.weight"]
    return add(matmul(states, weight, transpose_b=True), params["out.bias"])


def decode_states(
    enc_params: dict[str, Tensor],
    dec_params: dict[str, Tensor],
    cfg: ModelConfig,
    enc_out: EncoderStates,
    dec_ids: np.ndarray,
    dec_pad_mask: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
) -> Tensor:
    B, L = dec_ids.shape
    positions = np.broadcast_to(np.arange(L), (B, L))
    x = _residual_dropout(_embed(dec_params, "dec", cfg, dec_ids, positions), cfg, rng, train)
    causal = np.triu(np.full((L, L), NEG_BIAS), k=1)
    self_bias = np.where(dec_pad_mask[:, None, :], 0.0, NEG_BIAS) + causal
    self_bias_t = Tensor(np.ascontiguousarray(np.broadcast_to(self_bias, (B, L, L))))
    cross_bias = _key_pad_bias(L, enc_out.pad_mask)
    for i in range(cfg.dec_layers):
        base = f"dec.layer{i}"
        h = layer_norm(x, dec_params[f"{base}.ln1.gain"], dec_params[f"{base}.ln1.bias"])
        attn = _multi_head_attention(
            dec_params, f"{base}.self_attn", h, h, self_bias_t, cfg, rng, train
        )
        x = add(x, _residual_dropout(attn, cfg, rng, train))
        hc = layer_norm(x, dec_params[f"{base}.ln_cross.gain"], dec_params[f"{base}.ln_cross.bias"])
        cross = _multi_head_attention(
            dec_params, f"{base}.cross_attn", hc, enc_out.final, cross_bias, cfg, rng, train
        )
        x = add(x, _residual_dropout(cross, cfg, rng, train))
        h2 = layer_norm(x, dec_params[f"{base}.ln2.gain"], dec_params[f"{base}.ln2.bias"])
        ff = matmul(relu(add(matmul(h2, dec_params[f"{base}.ffn.w1"]), dec_params[f"{base}.ffn.b1"])),
                    dec_params[f"{base}.ffn.w2"])
        ff = add(ff, dec_params[f"{base}.ffn.b2"])
        x = add(x, _residual_dropout(ff, cfg, rng, train))
    final = layer_norm(x, dec_params["dec.final_ln.gain"], dec_params["dec.final_ln.bias"])
    weight = dec_params["dec.emb.token"] if cfg.tied_embeddings else dec_params["dec.out.weight"]
    return add(matmul(final, weight, transpose_b=True), dec_params["dec.out.bias"])


# ---------------------------------------------------------------------------
# Objective builders. Each returns (logits, target matrix) so losses and
# accuracy metrics share one code path.
# ---------------------------------------------------------------------------


def with_eos(ids: Sequence[int]) -> list[int]:
    return list(ids) + [EOS]


def _mask_sentences(sentences, seed, policy, vocab_size):
    """Mask each sentence with its content-derived stream; degenerate
    sentences are dropped."""
    corrupted, targets = [], []
    for ids in sentences:
        rng = sentence_mask_rng(seed, ids)
        out = apply_masking(ids, rng, policy, vocab_size)
        if out.degenerate:
            continue
        corrupted.append(out.corrupted_ids)
        targets.append(out.targets)
    return corrupted, targets


def _pad_targets(targets: list[list[int]], width: int) -> np.ndarray:
    arr = np.full((len(targets), width), -1, dtype=np.int64)
    for r, t in enumerate(targets):
        arr[r, : len(t)] = t
    return arr


def mlm_forward(
    params, cfg, sentences: list[list[int]], mask_seed: int,
    policy: Optional[MaskingPolicy] = None, rng=None, train=False,
) -> tuple[Tensor, np.ndarray]:
    policy = policy or MaskingPolicy()
    inputs = [with_eos(s) for s in sentences]
    corrupted, targets = _mask_sentences(inputs, mask_seed, policy, cfg.vocab_size)
    if not corrupted:
        raise ValueError("no maskable sentence in batch")
    batch = pad_batch(corrupted)
    states = encode(params, cfg, batch.ids, batch.mask, rng=rng, train=train)
    logits = output_logits(params, cfg, states.final)
    return logits, _pad_targets(targets, batch.ids.shape[1])


def mlm_loss(params, cfg, sentences, mask_seed: int, rng=None, train=False,
             policy: Optional[MaskingPolicy] = None) -> Tensor:
    logits, targets = mlm_forward(params, cfg, sentences, mask_seed, policy, rng, train)
    return cross_entropy_loss(logits, targets)


def tlm_concat(src_ids: Sequence[int], piv_ids: Sequence[int]) -> tuple[list[int], list[int]]:
    """Concatenate EOS-terminated segments; the second segment's positions
    restart from zero."""
    a, b = with_eos(src_ids), with_eos(piv_ids)
    return a + b, list(range(len(a))) + list(range(len(b)))


def tlm_forward(
    params, cfg, pairs: list[SentencePair], mask_seed: int,
    policy: Optional[MaskingPolicy] = None, rng=None, train=False,
    mask_sides: tuple[str, ...] = ("src", "piv"), aux: Optional[dict] = None,
) -> tuple[Tensor, np.ndarray]:
    policy = policy or MaskingPolicy()
    rows_ids, rows_pos, rows_tgt = [], [], []
    dropped = 0
    for p in pairs:
        ids, positions = tlm_concat(p.src, p.piv)
        if len(ids) > cfg.max_positions:
            dropped += 1
            continue
        split = len(p.src) + 1
        segs = {"src": (0, split), "piv": (split, len(ids))}
        corrupted = list(ids)
        targets = [-1] * len(ids)
        for side in ("src", "piv"):
            lo, hi = segs[side]
            seg_rng = sentence_mask_rng(mask_seed, ids[lo:hi])
            out = apply_masking(ids[lo:hi], seg_rng, policy, cfg.vocab_size)
            if side not in mask_sides or out.degenerate:
                continue
            corrupted[lo:hi] = out.corrupted_ids
            targets[lo:hi] = out.targets
        if all(t == -1 for t in targets):
            dropped += 1
            continue
        rows_ids.append(corrupted)
        rows_pos.append(positions)
        rows_tgt.append(targets)
    if aux is not None:
        aux["dropped"] = dropped
    if not rows_ids:
        raise ValueError("no usable pair in batch (overlong or unmaskable)")
    batch = pad_batch(rows_ids)
    width = batch.ids.shape[1]
    pos = np.zeros((len(rows_pos), width), dtype=np.int64)
    for r, pvec in enumerate(rows_pos):
        pos[r, : len(pvec)] = pvec
    states = encode(params, cfg, batch.ids, batch.mask, positions=pos, rng=rng, train=train)
    logits = output_logits(params, cfg, states.final)
    return logits, _pad_targets(rows_tgt, width)


def tlm_loss(params, cfg, pairs, mask_seed: int, rng=None, train=False,
             policy: Optional[MaskingPolicy] = None, aux: Optional[dict] = None,
             mask_sides=("src", "piv")) -> Tensor:
    logits, targets = tlm_forward(
        params, cfg, pairs, mask_seed, policy, rng, train, mask_sides, aux
    )
    return cross_entropy_loss(logits, targets)


def _masked_pair_sides(pairs, direction: str):
    """(masked side ids, clean side ids, alignment as masked->clean) per pair."""
    out = []
    for idx, p in enumerate(pairs):
        if direction == "fwd":
            out.append((p.src, p.piv, p.gold_alignment, idx))
        else:
            rev = None
            if p.gold_alignment is not None:
                rev = {(j, i) for i, j in p.gold_alignment}
            out.append((p.piv, p.src, rev, idx))
    return out


def _encode_pair_sides(params, cfg, masked_rows, clean_rows, rng, train):
    mb = pad_batch(masked_rows)
    cb = pad_batch(clean_rows)
    masked_states = encode(params, cfg, mb.ids, mb.mask, rng=rng, train=train)
    clean_states = encode(params, cfg, cb.ids, cb.mask, rng=rng, train=train)
    return mb, cb, masked_states, clean_states


def _brlm_ha_direction(params, cfg, pairs, direction, mask_seed, policy, rng, train):
    sides = _masked_pair_sides(pairs, direction)
    masked_rows, clean_rows, fuse_rows, tgt_rows = [], [], [], []
    for m_ids, c_ids, align, idx in sides:
        if align is None:
            raise ValueError(f"pair {idx} has no alignment for hard-alignment training")
        m_in, c_in = with_eos(m_ids), with_eos(c_ids)
        out = apply_masking(m_in, sentence_mask_rng(mask_seed, m_in), policy, cfg.vocab_size)
        if out.degenerate:
            continue
        by_pos: dict[int, list[int]] = {}
        for i, j in align:
            if i >= len(m_ids) or j >= len(c_ids):
                raise ValueError(
                    f"alignment link ({i},{j}) out of range for pair {idx} "
                    f"with lengths ({len(m_ids)},{len(c_ids)})"
                )
            by_pos.setdefault(i, []).append(j)
        masked_rows.append(out.corrupted_ids)
        clean_rows.append(c_in)
        tgt_rows.append(out.targets)
        fuse_rows.append({i: by_pos[i] for i in out.masked_positions if i in by_pos})
    if not masked_rows:
        raise ValueError("no maskable pair in batch")
    mb, cb, masked_states, clean_states = _encode_pair_sides(
        params, cfg, masked_rows, clean_rows, rng, train
    )
    B, Lm = mb.ids.shape
    Lc = cb.ids.shape[1]
    fuse = np.zeros((B, Lm, Lc))
    for b, row in enumerate(fuse_rows):
        for i, js in row.items():
            fuse[b, i, js] = 1.0 / len(js)
    aligned_ctx = matmul(Tensor(fuse), clean_states.final)
    fused = add(masked_states.final, aligned_ctx)
    logits = output_logits(params, cfg, fused)
    return logits, _pad_targets(tgt_rows, Lm)


def brlm_ha_loss(params, cfg, pairs, mask_seed: int, rng=None, train=False,
                 policy: Optional[MaskingPolicy] = None,
                 directions: tuple[str, ...] = ("fwd", "rev")) -> Tensor:
    """Masked prediction fused with the mean encoder output of hard-aligned
    positions on the clean side; positions without links fall back to the
    plain masked-prediction path exactly."""
    policy = policy or MaskingPolicy()
    losses = [
        cross_entropy_loss(*_brlm_ha_direction(params, cfg, pairs, d, mask_seed, policy, rng, train))
        for d in directions
    ]
    if len(losses) == 1:
        return losses[0]
    return scale(add(losses[0], losses[1]), 0.5)


def _bridge_attention(params, cfg, queries, keys, key_pad_mask, rng, train):
    q_len = queries.data.shape[1]
    bias = _key_pad_bias(q_len, key_pad_mask)
    attn_out = _multi_head_attention(
        params, "bridge.attn", queries, keys, bias, cfg, rng, train
    )
    if not key_pad_mask.any(axis=1).all():
        # rows whose key side is entirely PAD fall back to the residual path
        gate = np.zeros((key_pad_mask.shape[0], q_len, q_len))
        for b in range(key_pad_mask.shape[0]):
            if key_pad_mask[b].any():
                gate[b] = np.eye(q_len)
        attn_out = matmul(Tensor(gate), attn_out)
    bridged = layer_norm(
        add(queries, attn_out), params["bridge.ln.gain"], params["bridge.ln.bias"]
    )
    return bridged


def _brlm_sa_direction(params, cfg, pairs, direction, mask_seed, policy, rng, train):
    sides = _masked_pair_sides(pairs, direction)
    masked_rows, clean_rows, tgt_rows = [], [], []
    for m_ids, c_ids, _align, _idx in sides:
        m_in, c_in = with_eos(m_ids), with_eos(c_ids)
        out = apply_masking(m_in, sentence_mask_rng(mask_seed, m_in), policy, cfg.vocab_size)
        if out.degenerate:
            continue
        masked_rows.append(out.corrupted_ids)
        clean_rows.append(c_in)
        tgt_rows.append(out.targets)
    if not masked_rows:
        raise ValueError("no maskable pair in batch")
    mb, cb, masked_states, clean_states = _encode_pair_sides(
        params, cfg, masked_rows, clean_rows, rng, train
    )
    bridged = _bridge_attention(
        params, cfg, masked_states.final, clean_states.final, cb.mask, rng, train
    )
    logits = output_logits(params, cfg, bridged)
    return logits, _pad_targets(tgt_rows, mb.ids.shape[1])


def brlm_sa_loss(params, cfg, pairs, mask_seed: int, rng=None, train=False,
                 policy: Optional[MaskingPolicy] = None,
                 directions: tuple[str, ...] = ("fwd", "rev")) -> Tensor:
    """Masked prediction through a learned cross-attention layer over the
    clean side's encoder states (residual + layer norm on top)."""
    policy = policy or MaskingPolicy()
    losses = [
        cross_entropy_loss(*_brlm_sa_direction(params, cfg, pairs, d, mask_seed, policy, rng, train))
        for d in directions
    ]
    if len(losses) == 1:
        return losses[0]
    return scale(add(losses[0], losses[1]), 0.5)


def bridge_attention_weights(params, cfg, masked_ids, clean_ids) -> np.ndarray:
    """Head-averaged bridge attention [len_masked, len_clean] for one pair,
    computed in inference mode (no masking applied here)."""
    m_in, c_in = with_eos(masked_ids), with_eos(clean_ids)
    mb = pad_batch([m_in])
    cb = pad_batch([c_in])
    m_states = encode(params, cfg, mb.ids, mb.mask)
    c_states = encode(params, cfg, cb.ids, cb.mask)
    q_in, kv_in = m_states.final, c_states.final
    weights = []
    inv_sqrt = 1.0 / np.sqrt(cfg.d_head)
    for h in range(cfg.heads):
        q = matmul(q_in, params[f"bridge.attn.head{h}.wq"])
        k = matmul(kv_in, params[f"bridge.attn.head{h}.wk"])
        scores = scale(matmul(q, k, transpose_b=True), inv_sqrt)
        weights.append(softmax(scores, axis=-1).data[0])
    return np.mean(weights, axis=0)[: len(masked_ids), : len(clean_ids)]


def nmt_forward(
    enc_params, dec_params, cfg, pairs: list[SentencePair],
    rng=None, train=False, aux: Optional[dict] = None,
) -> tuple[Tensor, np.ndarray]:
    """Teacher-forced translation: encoder reads src+EOS, decoder predicts
    tgt+EOS from BOS-shifted inputs. Pairs with an empty target are skipped."""
    src_rows, dec_rows, tgt_rows = [], [], []
    skipped = 0
    for p in pairs:
        if len(p.piv) == 0:
            skipped += 1
            continue
        src_rows.append(with_eos(p.src))
        dec_rows.append([BOS] + list(p.piv))
        tgt_rows.append(list(p.piv) + [EOS])
    if aux is not None:
        aux["skipped"] = skipped
    if not src_rows:
        raise ValueError("no usable pair in batch (all targets empty)")
    sb = pad_batch(src_rows)
    db = pad_batch(dec_rows)
    enc_out = encode(enc_params, cfg, sb.ids, sb.mask, rng=rng, train=train)
    logits = decode_states(enc_params, dec_params, cfg, enc_out, db.ids, db.mask, rng, train)
    return logits, _pad_targets(tgt_rows, db.ids.shape[1])


def nmt_loss(enc_params, dec_params, cfg, pairs, rng=None, train=False,
             aux: Optional[dict] = None) -> Tensor:
    logits, targets = nmt_forward(enc_params, dec_params, cfg, pairs, rng, train, aux)
    return cross_entropy_loss(logits, targets)


# ---------------------------------------------------------------------------
# Accuracy through each objective's own prediction path
# ---------------------------------------------------------------------------


def _argmax_accuracy(
    logits: Tensor, targets: np.ndarray, content_only: bool = True
) -> tuple[int, int]:
    """Masked objectives predict over real vocabulary ids only (targets are
    never specials); translation accuracy keeps the full vocabulary because
    EOS must be predictable."""
    scores = logits.data
    if content_only:
        scores = scores.copy()
        scores[..., :NUM_SPECIALS] = -np.inf
    pred = scores.argmax(axis=-1)
    valid = targets != -1
    return int((pred[valid] == targets[valid]).sum()), int(valid.sum())


def objective_accuracy(
    objective: str,
    params,
    cfg,
    data,
    mask_seed: int,
    dec_params=None,
    directions: tuple[str, ...] = ("fwd",),
) -> tuple[int, int]:
    """(correct, total) argmax prediction counts on masked (or teacher-forced)
    positions, evaluated deterministically with the given seed."""
    policy = MaskingPolicy()
    if objective == "mlm":
        logits, targets = mlm_forward(params, cfg, data, mask_seed)
        return _argmax_accuracy(logits, targets)
    if objective == "tlm":
        logits, targets = tlm_forward(params, cfg, data, mask_seed)
        return _argmax_accuracy(logits, targets)
    if objective in ("brlm_ha", "brlm_sa"):
        correct = total = 0
        build = _brlm_ha_direction if objective == "brlm_ha" else _brlm_sa_direction
        for d in directions:
            logits, targets = build(params, cfg, data, d, mask_seed, policy, None, False)
            c, t = _argmax_accuracy(logits, targets)
            correct += c
            total += t
        return correct, total
    if objective == "nmt":
        logits, targets = nmt_forward(params, dec_params, cfg, data)
        return _argmax_accuracy(logits, targets, content_only=False)
    raise ValueError(f"unknown objective '{objective}'")
