"""Tokenization and the small transformer language models.

The encoder is a BERT-layout bidirectional transformer, domain-adapted with a
masked-LM objective.  The decoder is the same stack under a causal mask,
trained on next-token prediction and used only as a source of embeddings.
"""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor, no_grad
from .checkpoint import read_checkpoint, write_checkpoint
from .exceptions import CompatibilityError, ConfigError, ContractError
from .optim import Adam

SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
PAD, CLS, SEP, MASK, UNK = range(len(SPECIAL_TOKENS))

# special tokens, then single digits, letter runs, and single punctuation marks
_TOKEN_RE = re.compile(r"\[(?:PAD|CLS|SEP|MASK|UNK)\]|\d|[^\W\d_]+|[^\w\s]|_")


def tokenize(text):
    return _TOKEN_RE.findall(text)


class Vocab:
    """Token <-> id map; ids are contiguous and the special tokens come first."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ContractError(f"vocab must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocab tokens must be unique")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts, min_freq=1):
        texts = list(texts)
        if not texts:
            raise ContractError("cannot build a vocabulary from an empty corpus")
        counts = Counter(tok for text in texts for tok in tokenize(text)
                         if tok not in SPECIAL_TOKENS)
        kept = sorted((t for t, n in counts.items() if n >= min_freq),
                      key=lambda t: (-counts[t], t))
        return cls(SPECIAL_TOKENS + tuple(kept))

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, text):
        return [self.stoi.get(tok, UNK) for tok in tokenize(text)]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    @property
    def hash(self):
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(fh.read().splitlines())


def build_vocab(texts, min_freq=1):
    return Vocab.build(texts, min_freq)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    attention_mask: tuple

    def __post_init__(self):
        if len(self.ids) != len(self.attention_mask):
            raise ContractError("ids and attention_mask differ in length")

    def __len__(self):
        return len(self.ids)


def encode_pair(question_text, choice_text, vocab, max_len=None):
    """``[CLS] question [SEP] choice [SEP]``, question truncated first, padded to ``max_len``."""
    q = vocab.encode(question_text)
    c = vocab.encode(choice_text)
    if max_len is not None:
        if max_len < 4:
            raise ContractError(f"max_len must be >= 4, got {max_len}")
        room = max_len - 3
        if len(q) + len(c) > room:
            c = c[:room]
            q = q[:room - len(c)]
    ids = [CLS] + q + [SEP] + c + [SEP]
    mask = [1] * len(ids)
    if max_len is not None:
        pad = max_len - len(ids)
        ids += [PAD] * pad
        mask += [0] * pad
    return TokenSequence(tuple(ids), tuple(mask))


def encode_text(text, vocab, max_len=None, keep="head"):
    """``[CLS] text [SEP]``; when too long keep the ``head`` or the ``tail`` of the text."""
    toks = vocab.encode(text)
    if max_len is not None and len(toks) + 2 > max_len:
        room = max_len - 2
        toks = toks[:room] if keep == "head" else toks[len(toks) - room:]
    ids = [CLS] + toks + [SEP]
    return TokenSequence(tuple(ids), (1,) * len(ids))


def pad_batch(sequences, length=None):
    """Stack token id lists into ``(ids, mask)`` int arrays padded with [PAD]."""
    seqs = [s.ids if isinstance(s, TokenSequence) else tuple(s) for s in sequences]
    masks = [s.attention_mask if isinstance(s, TokenSequence) else (1,) * len(s) for s in sequences]
    length = length or max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=np.int64)
    for i, (s, m) in enumerate(zip(seqs, masks)):
        ids[i, :len(s)] = s
        mask[i, :len(m)] = m
    return ids, mask


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_size: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_size: int = 256
    max_positions: int = 128
    dropout_rate: float = 0.1

    def validate(self):
        errors = []
        if self.vocab_size <= len(SPECIAL_TOKENS):
            errors.append("vocab_size: must exceed the number of special tokens")
        for name in ("hidden_size", "n_layers", "n_heads", "ffn_size", "max_positions"):
            if getattr(self, name) < 1:
                errors.append(f"{name}: must be >= 1")
        if self.n_heads >= 1 and self.hidden_size % self.n_heads:
            errors.append("hidden_size: must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            errors.append("dropout_rate: must be in [0, 1)")
        if errors:
            raise ConfigError(errors)
        return self

    def to_dict(self):
        return asdict(self)


class TextEncoder(nn.Module):
    """Token + learned position embeddings, embedding LayerNorm, transformer blocks."""

    def __init__(self, config, rng, causal=False):
        config.validate()
        self.config = config
        self.causal = causal
        self.tok_emb = nn.Embedding(config.vocab_size, config.hidden_size, rng)
        self.pos_emb = nn.Embedding(config.max_positions, config.hidden_size, rng)
        self.emb_ln = nn.LayerNorm(config.hidden_size)
        self.blocks = [nn.TransformerBlock(config.hidden_size, config.n_heads, config.ffn_size, rng,
                                           causal=causal, dropout=config.dropout_rate)
                       for _ in range(config.n_layers)]

    def forward(self, ids, mask=None, input_offset=None, rng=None, return_all=False):
        """Hidden states ``(B, T, H)`` for integer ``ids`` ``(B, T)``.

        ``input_offset`` (broadcastable to ``(B, T, H)``) is added to the
        token + position embeddings before normalization.  With
        ``return_all`` the list ``[embeddings, block_1, ..., block_n]`` is
        returned instead.
        """
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
            mask = None if mask is None else np.asarray(mask)[None]
        t = ids.shape[1]
        if t > self.config.max_positions:
            raise ContractError(f"sequence length {t} exceeds max_positions "
                                f"{self.config.max_positions}")
        x = self.tok_emb(ids) + self.pos_emb(np.arange(t))
        if input_offset is not None:
            x = x + input_offset
        x = self.emb_ln(x)
        if rng is not None:
            x = ag.dropout(x, self.config.dropout_rate, rng, self.training)
        states = [x]
        for block in self.blocks:
            x = block(x, mask, rng)
            states.append(x)
        return states if return_all else x


def encoder_forward(encoder, seq):
    """Per-token hidden states ``(len, H)`` for a single :class:`TokenSequence`."""
    with no_grad():
        out = encoder.eval()(np.array([seq.ids]), np.array([seq.attention_mask]))
    return out.data[0]


class MaskedLMHead(nn.Module):
    def __init__(self, hidden, vocab_size, rng):
        self.dense = nn.Linear(hidden, hidden, rng)
        self.ln = nn.LayerNorm(hidden)
        self.decoder = nn.Linear(hidden, vocab_size, rng)

    def forward(self, h):
        return self.decoder(self.ln(ag.gelu(self.dense(h))))


class CausalLM(nn.Module):
    """Causal transformer with a next-token head; exposes every layer's states."""

    def __init__(self, config, rng):
        self.body = TextEncoder(config, rng, causal=True)
        self.lm_head = nn.Linear(config.hidden_size, config.vocab_size, rng)

    @property
    def config(self):
        return self.body.config

    def forward(self, ids, mask=None, rng=None):
        return self.lm_head(self.body(ids, mask, rng=rng))

    def hidden_states(self, ids, mask=None):
        """``[embeddings, block_1, ..., block_n]``; index ``-2`` is the penultimate layer."""
        return self.body(ids, mask, return_all=True)


@dataclass
class PretrainResult:
    model: nn.Module
    head: nn.Module | None
    losses: list


def _check_mask_prob(mask_prob):
    if not 0.0 < mask_prob < 1.0:
        raise ConfigError(f"mask_prob: must be in (0, 1), got {mask_prob}")


def _mask_batch(ids, mask, mask_prob, vocab_size, rng):
    """BERT-style corruption; returns corrupted ids, flat positions and targets."""
    maskable = (mask > 0) & (ids != CLS) & (ids != SEP)
    chosen = maskable & (rng.random(ids.shape) < mask_prob)
    for row in np.flatnonzero(~chosen.any(axis=1) & maskable.any(axis=1)):
        cols = np.flatnonzero(maskable[row])
        chosen[row, cols[rng.integers(len(cols))]] = True
    corrupted = ids.copy()
    roll = rng.random(ids.shape)
    corrupted[chosen & (roll < 0.8)] = MASK
    swap = chosen & (roll >= 0.8) & (roll < 0.9)
    corrupted[swap] = rng.integers(len(SPECIAL_TOKENS), vocab_size, size=int(swap.sum()))
    flat = np.flatnonzero(chosen.reshape(-1))
    return corrupted, flat, ids.reshape(-1)[flat]


def mlm_pretrain(encoder, texts, vocab, mask_prob=0.15, epochs=10, lr=1e-3, batch_size=32,
                 seed=0, head=None, clip_norm=1.0):
    """Masked-token pretraining; returns the encoder, its MLM head and per-epoch mean loss."""
    _check_mask_prob(mask_prob)
    rng = np.random.default_rng(seed)
    max_len = encoder.config.max_positions
    seqs = [encode_text(t, vocab, max_len) for t in texts]
    seqs = [s for s in seqs if len(s) > 2]
    if not seqs:
        raise ContractError("no non-empty texts to pretrain on")
    head = head or MaskedLMHead(encoder.config.hidden_size, len(vocab), rng)
    params = {**encoder.named_parameters("encoder."), **head.named_parameters("head.")}
    opt = Adam(params, lr=lr, clip_norm=clip_norm)
    encoder.train()
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(seqs))
        total = count = 0
        for start in range(0, len(seqs), batch_size):
            ids, mask = pad_batch([seqs[i] for i in order[start:start + batch_size]])
            corrupted, flat, targets = _mask_batch(ids, mask, mask_prob, len(vocab), rng)
            hidden = encoder(corrupted, mask, rng=rng)
            picked = hidden.reshape(-1, hidden.shape[-1])[flat]
            loss = ag.cross_entropy(head(picked), targets)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(flat)
            count += len(flat)
        losses.append(total / count)
    encoder.eval()
    return PretrainResult(encoder, head, losses)


def mlm_accuracy(encoder, head, texts, vocab, mask_prob=0.15, seed=0, batch_size=64):
    """Fraction of masked positions whose original token is the argmax prediction."""
    _check_mask_prob(mask_prob)
    rng = np.random.default_rng(seed)
    seqs = [encode_text(t, vocab, encoder.config.max_positions) for t in texts]
    hits = total = 0
    with no_grad():
        encoder.eval()
        for start in range(0, len(seqs), batch_size):
            ids, mask = pad_batch(seqs[start:start + batch_size])
            maskable = (mask > 0) & (ids != CLS) & (ids != SEP)
            chosen = maskable & (rng.random(ids.shape) < mask_prob)
            corrupted = np.where(chosen, MASK, ids)
            hidden = encoder(corrupted, mask).data.reshape(-1, encoder.config.hidden_size)
            flat = np.flatnonzero(chosen.reshape(-1))
            pred = head(Tensor(hidden[flat])).data.argmax(axis=1)
            hits += int((pred == ids.reshape(-1)[flat]).sum())
            total += len(flat)
    return hits / max(total, 1)


def _chunks(ids, size):
    if len(ids) <= size:
        return [ids]
    return [ids[i:i + size] for i in range(0, len(ids) - 1, size - 1)]


def clm_pretrain(decoder, texts, vocab, epochs=10, lr=1e-3, batch_size=16, seed=0, clip_norm=1.0):
    """Next-token pretraining of a :class:`CausalLM`; returns per-epoch mean loss."""
    if epochs < 1:
        raise ConfigError("epochs: must be >= 1")
    rng = np.random.default_rng(seed)
    size = decoder.config.max_positions
    seqs = []
    for text in texts:
        ids = [CLS] + vocab.encode(text) + [SEP]
        seqs.extend(c for c in _chunks(ids, size) if len(c) > 1)
    if not seqs:
        raise ContractError("no non-empty texts to pretrain on")
    opt = Adam(decoder.named_parameters(), lr=lr, clip_norm=clip_norm)
    decoder.train()
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(seqs))
        total = count = 0
        for start in range(0, len(seqs), batch_size):
            ids, mask = pad_batch([seqs[i] for i in order[start:start + batch_size]])
            logits = decoder(ids[:, :-1], mask[:, :-1], rng=rng)
            valid = np.flatnonzero(mask[:, 1:].reshape(-1))
            flat_logits = logits.reshape(-1, logits.shape[-1])[valid]
            loss = ag.cross_entropy(flat_logits, ids[:, 1:].reshape(-1)[valid])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(valid)
            count += len(valid)
        losses.append(total / count)
    decoder.eval()
    return PretrainResult(decoder, None, losses)


# -- persistence -------------------------------------------------------------

def save_language_model(model, path, vocab, extra=None):
    """Write a TextEncoder or CausalLM checkpoint tied to ``vocab``."""
    kind = "causal_lm" if isinstance(model, CausalLM) else "text_encoder"
    meta = {"kind": kind, "encoder_config": model.config.to_dict(), "vocab_hash": vocab.hash,
            **(extra or {})}
    write_checkpoint(path, model.state_dict(), meta)


def load_language_model(path, vocab, kind=None):
    params, meta = read_checkpoint(path)
    if meta.get("vocab_hash") != vocab.hash:
        raise CompatibilityError(f"{path}: checkpoint vocabulary hash does not match {vocab.hash}")
    if meta.get("kind") not in ("causal_lm", "text_encoder") or \
            (kind is not None and meta["kind"] != kind):
        raise CompatibilityError(f"{path}: holds a {meta.get('kind')} checkpoint, expected "
                                 f"{kind or 'a language model'}")
    cfg = EncoderConfig(**meta["encoder_config"])
    rng = np.random.default_rng(0)
    model = CausalLM(cfg, rng) if meta["kind"] == "causal_lm" else TextEncoder(cfg, rng)
    model.load_state_dict(params)
    return model.eval()
