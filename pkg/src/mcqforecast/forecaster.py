"""Correct-answer classifier and the student-aware forecasters built on it.

``McqBert`` scores one (question, choice) pair from the encoder's [CLS]
state with a single linear head.  ``StudentForecaster`` adds a student
embedding, either concatenated to [CLS] ("cat") or projected and added to
every input token embedding ("sum"), followed by a two-layer ReLU head.
Embeddings are standardized with training-set statistics first; an all-zero
row (a student without history) stays zero.
"""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from . import nn
from .autograd import Tensor, no_grad
from .checkpoint import read_checkpoint, write_checkpoint
from .corpus import QUESTION_EXCLUSIVE, STUDENT_TASK, BinaryInstance
from .exceptions import CompatibilityError, ConfigError, ContractError, ShapeError
from .metrics import ConfusionCounts, accuracy, f1_macro, mcc
from .optim import Adam
from .text import EncoderConfig, TextEncoder, encode_pair, pad_batch

STRATEGIES = ("cat", "sum")
THRESHOLD = 0.5


class McqBert(nn.Module):
    def __init__(self, encoder, rng, zero_init_head=False):
        self.encoder = encoder
        self.head = nn.Linear(encoder.config.hidden_size, 1, rng, zero_init=zero_init_head)

    def forward(self, ids, mask, rng=None):
        h = self.encoder(ids, mask, rng=rng)
        return self.head_logits(h[:, 0, :])

    def head_logits(self, cls):
        return self.head(cls).reshape(-1)


class StudentForecaster(nn.Module):
    def __init__(self, encoder, strategy, embedding_dim, rng):
        if strategy not in STRATEGIES:
            raise ConfigError(f"strategy: must be one of {STRATEGIES}, got {strategy!r}")
        hidden = encoder.config.hidden_size
        self.strategy = strategy
        self.embedding_dim = embedding_dim
        self.encoder = encoder
        self.projection = nn.Linear(embedding_dim, hidden, rng, bias=False)
        self.head1 = nn.Linear(2 * hidden if strategy == "cat" else hidden, hidden, rng)
        self.head2 = nn.Linear(hidden, 1, rng)
        self.embedding_center = np.zeros(embedding_dim)
        self.embedding_scale = np.ones(embedding_dim)

    def fit_embedding_scaler(self, embeddings):
        """Per-dimension mean and scale over the rows that are not all zero."""
        rows = self._check(embeddings, standardize=False)
        rows = rows[np.any(rows != 0, axis=1)]
        if len(rows):
            scaler = StandardScaler().fit(rows)
            self.embedding_center, self.embedding_scale = scaler.mean_, scaler.scale_
        return self

    def _check(self, embeddings, standardize=True):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[1] != self.embedding_dim:
            raise ShapeError(f"expected embeddings of width {self.embedding_dim}, "
                             f"got shape {embeddings.shape}")
        if not standardize:
            return embeddings
        live = np.any(embeddings != 0, axis=1, keepdims=True)
        return np.where(live, (embeddings - self.embedding_center) / self.embedding_scale, 0.0)

    def forward(self, ids, mask, embeddings, rng=None):
        if self.strategy == "sum":
            proj = self.projection(Tensor(self._check(embeddings)))
            h = self.encoder(ids, mask, input_offset=proj.reshape(proj.shape[0], 1, -1), rng=rng)
            z = h[:, 0, :]
            return self.head2(ag.relu(self.head1(z))).reshape(-1)
        h = self.encoder(ids, mask, rng=rng)
        return self.head_logits(h[:, 0, :], embeddings)

    def head_logits(self, cls, embeddings):
        """Cat only: the logit from a precomputed [CLS] state."""
        if self.strategy != "cat":
            raise ContractError("head_logits needs the cat strategy")
        proj = self.projection(Tensor(self._check(embeddings)))
        z = ag.concat([cls if isinstance(cls, Tensor) else Tensor(cls), proj], axis=1)
        return self.head2(ag.relu(self.head1(z))).reshape(-1)

    def base_logit(self, ids, mask):
        """The logit with the student pathway removed (encoder + head only)."""
        if self.strategy != "sum":
            raise ContractError("base_logit is defined for the sum strategy only")
        h = self.encoder(ids, mask)
        return self.head2(ag.relu(self.head1(h[:, 0, :]))).reshape(-1)


# -- batching ----------------------------------------------------------------

class PairEncoder:
    """Caches token sequences of (question, choice) text pairs."""

    def __init__(self, vocab, max_len):
        self.vocab = vocab
        self.max_len = max_len
        self._cache = {}

    def __call__(self, question_text, choice_text):
        key = (question_text, choice_text)
        seq = self._cache.get(key)
        if seq is None:
            seq = encode_pair(question_text, choice_text, self.vocab)
            if len(seq) > self.max_len:
                seq = encode_pair(question_text, choice_text, self.vocab, self.max_len)
            self._cache[key] = seq
        return seq

    def batch(self, pairs):
        return pad_batch([self(q, c) for q, c in pairs])


def _pairs(instances):
    return [(i.question_text, i.choice_text) for i in instances]


def _labels(instances):
    return np.array([i.label for i in instances], dtype=np.int64)


def _cacheable(model):
    return isinstance(model, McqBert) or getattr(model, "strategy", None) == "cat"


def _cls_states(encoder, pairs, pair_encoder, batch_size=256):
    """[CLS] state of every distinct pair in ``pairs`` (eval mode), plus each row's index."""
    uniq = list(dict.fromkeys(pairs))
    where = {p: k for k, p in enumerate(uniq)}
    lengths = np.array([len(pair_encoder(q, c)) for q, c in uniq])
    states = np.empty((len(uniq), encoder.config.hidden_size))
    was_training = encoder.training
    encoder.eval()
    with no_grad():
        for length in np.unique(lengths):
            idx = np.flatnonzero(lengths == length)
            for start in range(0, len(idx), batch_size):
                chunk = idx[start:start + batch_size]
                ids, mask = pair_encoder.batch([uniq[i] for i in chunk])
                states[chunk] = encoder(ids, mask).data[:, 0, :]
    encoder.train(was_training)
    return states, np.array([where[p] for p in pairs], dtype=np.int64)


def _head_logits(model, cls, embeddings=None):
    args = () if embeddings is None else (embeddings,)
    return model.head_logits(cls if isinstance(cls, Tensor) else Tensor(cls), *args)


def _logits(model, pairs, pair_encoder, embeddings=None, batch_size=256):
    """Logits for many pairs.

    Models whose encoder never sees the embedding run the encoder once per
    distinct pair.  Otherwise batches are grouped by length so padding never
    enters.
    """
    if _cacheable(model):
        states, rows = _cls_states(model.encoder, pairs, pair_encoder, batch_size)
        model.eval()
        with no_grad():
            return _head_logits(model, states[rows], embeddings).data.copy()
    lengths = np.array([len(pair_encoder(q, c)) for q, c in pairs])
    out = np.empty(len(pairs))
    model.eval()
    with no_grad():
        for length in np.unique(lengths):
            idx = np.flatnonzero(lengths == length)
            for start in range(0, len(idx), batch_size):
                chunk = idx[start:start + batch_size]
                ids, mask = pair_encoder.batch([pairs[i] for i in chunk])
                if embeddings is None:
                    out[chunk] = model(ids, mask).data
                else:
                    out[chunk] = model(ids, mask, embeddings[chunk]).data
    return out


def sigmoid(x):
    return ag._sigmoid(np.asarray(x, dtype=np.float64))


# -- training ----------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_mcc: float
    val_f1: float
    val_accuracy: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    chosen_epoch: int = 0
    batch_losses: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            cols = list(EpochStats.__dataclass_fields__)
            writer.writerow(cols + ["chosen"])
            for s in self.epochs:
                row = asdict(s)
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                                 for c in cols] + [int(s.epoch == self.chosen_epoch)])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    lr: float = 5e-4
    batch_size: int = 32
    max_len: int = 64
    seed: int = 0
    pos_weight: float | None = None
    freeze_encoder: bool = False
    clip_norm: float = 1.0
    # "pair": each step takes ``batch_size`` distinct (question, choice) pairs and every
    # training instance built on them, so the encoder runs once per pair
    batching: str = "instance"
    # student forecasters only: z-score embeddings with training statistics
    standardize_embeddings: bool = True

    def validate(self):
        errors = []
        if self.epochs < 1:
            errors.append("epochs: must be >= 1")
        if not self.lr > 0:
            errors.append("lr: must be > 0")
        if self.batch_size < 1:
            errors.append("batch_size: must be >= 1")
        if self.max_len < 4:
            errors.append("max_len: must be >= 4")
        if self.pos_weight is not None and not self.pos_weight > 0:
            errors.append("pos_weight: must be > 0")
        for name in ("freeze_encoder", "standardize_embeddings"):
            if not isinstance(getattr(self, name), bool):
                errors.append(f"{name}: must be true or false")
        if self.batching not in ("instance", "pair"):
            errors.append(f"batching: must be 'instance' or 'pair', got {self.batching!r}")
        if errors:
            raise ConfigError(errors)
        return self


def _train_batches(model, cfg, rng, train_pairs, train_emb, cached, pair_encoder, by_pair):
    """Yield ``(instance indices, logits)`` for one epoch."""
    if by_pair is not None:
        perm = rng.permutation(len(by_pair))
        for start in range(0, len(perm), cfg.batch_size):
            chosen = perm[start:start + cfg.batch_size]
            idx = np.concatenate([by_pair[k] for k in chosen])
            local = np.repeat(np.arange(len(chosen)), [len(by_pair[k]) for k in chosen])
            ids, mask = pair_encoder.batch([train_pairs[by_pair[k][0]] for k in chosen])
            cls = model.encoder(ids, mask, rng=rng)[:, 0, :]
            emb = None if train_emb is None else train_emb[idx]
            yield idx, _head_logits(model, cls[local], emb)
        return
    order = rng.permutation(len(train_pairs))
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        emb = None if train_emb is None else train_emb[idx]
        if cached is not None:
            yield idx, _head_logits(model, cached[idx], emb)
        else:
            ids, mask = pair_encoder.batch([train_pairs[i] for i in idx])
            args = () if emb is None else (emb,)
            yield idx, model(ids, mask, *args, rng=rng)


def _fit(model, train, val, cfg, pair_encoder, train_emb=None, val_emb=None):
    """Shared loop: BCE, Adam, per-epoch validation, best epoch by validation MCC."""
    cfg.validate()
    if not train:
        raise ContractError("empty training set")
    val = val or train
    if val_emb is None and train_emb is not None and val is train:
        val_emb = train_emb
    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters()
    if cfg.freeze_encoder:
        params = {k: v for k, v in params.items() if not k.startswith("encoder.")}
    opt = Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    train_pairs, y = _pairs(train), _labels(train)
    val_pairs, y_val = _pairs(val), _labels(val)
    cached = None
    if cfg.freeze_encoder and _cacheable(model):
        # the frozen encoder runs once per distinct pair, in eval mode
        states, rows = _cls_states(model.encoder, train_pairs, pair_encoder)
        cached = states[rows]
    by_pair = None
    if cfg.batching == "pair" and cached is None:
        if not _cacheable(model):
            raise ConfigError("batching: 'pair' needs a model whose encoder ignores the "
                              "student embedding (mcqbert or cat)")
        uniq = list(dict.fromkeys(train_pairs))
        where = {p: k for k, p in enumerate(uniq)}
        pair_of = np.array([where[p] for p in train_pairs], dtype=np.int64)
        order_ = np.argsort(pair_of, kind="stable")
        by_pair = np.split(order_, np.cumsum(np.bincount(pair_of, minlength=len(uniq)))[:-1])
    report = TrainReport()
    best_state, best_mcc = None, -math.inf
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        total = 0.0
        for idx, logits in _train_batches(model, cfg, rng, train_pairs, train_emb, cached,
                                          pair_encoder, by_pair):
            weights = None
            if cfg.pos_weight is not None:
                weights = np.where(y[idx] == 1, cfg.pos_weight, 1.0)
            loss = ag.bce_with_logits(logits, y[idx], weights)
            opt.zero_grad()
            for p in model.parameters():
                p.grad = None
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            report.batch_losses.append(loss.item())
        logits = _logits(model, val_pairs, pair_encoder, val_emb)
        counts = ConfusionCounts.from_labels(y_val, logits > 0)
        val_loss = ag.bce_with_logits(Tensor(logits), y_val).item()
        stats = EpochStats(epoch, total / len(train), val_loss, mcc(counts), f1_macro(counts),
                           accuracy(counts))
        report.epochs.append(stats)
        if stats.val_mcc > best_mcc:
            best_mcc, best_state = stats.val_mcc, model.state_dict()
            report.chosen_epoch = epoch
    model.load_state_dict(best_state)
    model.eval()
    return report


def new_mcqbert(encoder_config, seed=0, encoder=None, zero_init_head=False):
    rng = np.random.default_rng(seed)
    encoder = copy.deepcopy(encoder) if encoder is not None else TextEncoder(encoder_config, rng)
    return McqBert(encoder, rng, zero_init_head)


def train_mcqbert(instances, vocab, encoder, split=None, config=TrainConfig(),
                  zero_init_head=False):
    """Fine-tune a copy of ``encoder`` on correct-answer instances.

    With a question-exclusive ``split`` the model trains on ``split.train``
    and selects its epoch on ``split.val``; without one it trains on every
    instance and is validated on the same set (retention mode).
    """
    if split is not None:
        if split.policy != QUESTION_EXCLUSIVE:
            raise ContractError(f"train_mcqbert needs a {QUESTION_EXCLUSIVE} split, "
                                f"got {split.policy}")
        train, val = list(split.train), list(split.val)
    else:
        train = val = list(instances)
    if any(i.user_id is not None for i in train):
        raise ContractError("train_mcqbert expects correct_answer-task instances")
    model = new_mcqbert(encoder.config, config.seed, encoder, zero_init_head)
    report = _fit(model, train, val, config, PairEncoder(vocab, config.max_len))
    return model, report


def new_student_forecaster(base, strategy, embedding_dim, seed=0):
    """Student model whose encoder starts from ``base`` (an McqBert); heads are fresh."""
    rng = np.random.default_rng(seed)
    return StudentForecaster(copy.deepcopy(base.encoder), strategy, embedding_dim, rng)


def train_student_forecaster(strategy, base, instances_train, emb_train, instances_val, emb_val,
                             vocab, config=TrainConfig(epochs=3), split_policy=STUDENT_TASK):
    """Fine-tune a student forecaster; embeddings are row-aligned with the instances."""
    if split_policy != STUDENT_TASK:
        raise ContractError(f"student forecasting needs a {STUDENT_TASK} split, got {split_policy}")
    emb_train = np.asarray(emb_train, dtype=np.float64)
    emb_val = np.asarray(emb_val, dtype=np.float64)
    if len(emb_train) != len(instances_train) or len(emb_val) != len(instances_val):
        raise ShapeError("embedding rows must align with instances")
    model = new_student_forecaster(base, strategy, emb_train.shape[1], config.seed)
    if config.standardize_embeddings:
        model.fit_embedding_scaler(emb_train)
    report = _fit(model, list(instances_train), list(instances_val), config,
                  PairEncoder(vocab, config.max_len), emb_train, emb_val)
    return model, report


# -- scoring -----------------------------------------------------------------

def score_choice(model, question_text, choice_text, vocab, max_len=64):
    """Probability that ``choice_text`` is correct for ``question_text``; one forward pass."""
    seq = PairEncoder(vocab, max_len)(question_text, choice_text)
    with no_grad():
        logit = model.eval()(np.array([seq.ids]), np.array([seq.attention_mask])).data[0]
    return float(sigmoid(logit))


def score_question(model, question, vocab, max_len=64):
    """Scores for every choice of ``question``, each from its own forward pass."""
    return {c.id: score_choice(model, question.text, c.text, vocab, max_len)
            for c in question.choices}


def forecast_student_choice(model, question_text, choice_text, embedding, vocab, max_len=64):
    """Probability that the student with ``embedding`` selects ``choice_text``."""
    vec = getattr(embedding, "vector", embedding)
    vec = np.asarray(vec, dtype=np.float64).reshape(1, -1)
    seq = PairEncoder(vocab, max_len)(question_text, choice_text)
    with no_grad():
        logit = model.eval()(np.array([seq.ids]), np.array([seq.attention_mask]), vec).data[0]
    return float(sigmoid(logit))


def predict_logits(model, instances, vocab, embeddings=None, max_len=64):
    embeddings = None if embeddings is None else np.asarray(embeddings, dtype=np.float64)
    return _logits(model, _pairs(instances), PairEncoder(vocab, max_len), embeddings)


# -- checkpoints -------------------------------------------------------------

def save_model(model, path, vocab, embedder=None, extra=None):
    meta = {"kind": "mcqbert" if isinstance(model, McqBert) else "student_forecaster",
            "encoder_config": model.encoder.config.to_dict(), "vocab_hash": vocab.hash,
            **(extra or {})}
    if isinstance(model, StudentForecaster):
        meta.update(strategy=model.strategy, embedding_dim=model.embedding_dim,
                    embedder=embedder, embedding_center=model.embedding_center.tolist(),
                    embedding_scale=model.embedding_scale.tolist())
    write_checkpoint(path, model.state_dict(), meta)


def load_model(path, vocab, strategy=None):
    """Rebuild a saved model; ``strategy`` ("mcqbert", "cat" or "sum") is enforced when given."""
    params, meta = read_checkpoint(path)
    if meta.get("vocab_hash") != vocab.hash:
        raise CompatibilityError(f"{path}: checkpoint vocabulary hash {meta.get('vocab_hash')} "
                                 f"does not match {vocab.hash}")
    kind = meta.get("kind")
    found = "mcqbert" if kind == "mcqbert" else meta.get("strategy")
    if strategy is not None and strategy != found:
        raise CompatibilityError(f"{path}: checkpoint holds a {found} model, expected {strategy}")
    cfg = EncoderConfig(**meta["encoder_config"])
    rng = np.random.default_rng(0)
    encoder = TextEncoder(cfg, rng)
    if kind == "mcqbert":
        model = McqBert(encoder, rng)
    elif kind == "student_forecaster":
        model = StudentForecaster(encoder, meta["strategy"], meta["embedding_dim"], rng)
        model.embedding_center = np.array(meta["embedding_center"], dtype=np.float64)
        model.embedding_scale = np.array(meta["embedding_scale"], dtype=np.float64)
    else:
        raise CompatibilityError(f"{path}: unknown model kind {kind!r}")
    model.load_state_dict(params)
    return model.eval(), meta


# -- sklearn-style estimators -----------------------------------------------

def _as_instances(X):
    out = []
    for x in X:
        if isinstance(x, BinaryInstance):
            out.append(x)
        elif isinstance(x, (tuple, list)) and len(x) == 2:
            out.append(BinaryInstance(None, "", "", str(x[0]), str(x[1]), 0))
        else:
            raise ContractError(f"expected BinaryInstance or (question, choice) pair, got {x!r}")
    if not out:
        raise ContractError("empty input")
    return out


def _with_labels(instances, y):
    if y is None:
        return instances
    y = np.asarray(y).astype(int)
    if len(y) != len(instances):
        raise ShapeError(f"{len(instances)} instances but {len(y)} labels")
    if not set(np.unique(y)) <= {0, 1}:
        raise ContractError("labels must be 0 or 1")
    return [BinaryInstance(i.user_id, i.question_id, i.choice_id, i.question_text,
                           i.choice_text, int(v), i.history_cutoff, i.interaction_key)
            for i, v in zip(instances, y)]


class McqBertClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: ``X`` holds BinaryInstances or (question, choice) text pairs."""

    def __init__(self, vocab=None, encoder=None, epochs=1, lr=5e-4, batch_size=32, max_len=64,
                 seed=0, zero_init_head=False):
        self.vocab = vocab
        self.encoder = encoder
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.max_len = max_len
        self.seed = seed
        self.zero_init_head = zero_init_head

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           max_len=self.max_len, seed=self.seed)

    def fit(self, X, y=None):
        if self.vocab is None or self.encoder is None:
            raise ContractError("McqBertClassifier needs a vocab and a (pretrained) encoder")
        instances = _with_labels(_as_instances(X), y)
        self.model_, self.report_ = train_mcqbert(instances, self.vocab, self.encoder,
                                                  config=self._train_config(),
                                                  zero_init_head=self.zero_init_head)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, _as_instances(X), self.vocab, max_len=self.max_len)

    def predict_proba(self, X):
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > THRESHOLD).astype(int)


class StudentForecasterClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper; ``embeddings`` rows align with ``X`` in fit and predict."""

    def __init__(self, vocab=None, base=None, strategy="cat", epochs=3, lr=5e-4, batch_size=32,
                 max_len=64, seed=0, freeze_encoder=False, pos_weight=None,
                 standardize_embeddings=True):
        self.vocab = vocab
        self.base = base
        self.strategy = strategy
        self.standardize_embeddings = standardize_embeddings
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.max_len = max_len
        self.seed = seed
        self.freeze_encoder = freeze_encoder
        self.pos_weight = pos_weight

    def fit(self, X, y=None, embeddings=None, X_val=None, embeddings_val=None):
        if self.vocab is None or self.base is None:
            raise ContractError("StudentForecasterClassifier needs a vocab and a base McqBert")
        if embeddings is None:
            raise ContractError("fit needs student embeddings aligned with X")
        train = _with_labels(_as_instances(X), y)
        val = train if X_val is None else _as_instances(X_val)
        emb_val = embeddings if X_val is None else embeddings_val
        cfg = TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                          max_len=self.max_len, seed=self.seed, pos_weight=self.pos_weight,
                          freeze_encoder=self.freeze_encoder,
                          standardize_embeddings=self.standardize_embeddings)
        self.model_, self.report_ = train_student_forecaster(
            self.strategy, self.base, train, embeddings, val, emb_val, self.vocab, cfg)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X, embeddings=None):
        check_is_fitted(self, "model_")
        if embeddings is None:
            raise ContractError("scoring needs student embeddings aligned with X")
        return predict_logits(self.model_, _as_instances(X), self.vocab, embeddings, self.max_len)

    def predict_proba(self, X, embeddings=None):
        p = sigmoid(self.decision_function(X, embeddings))
        return np.column_stack([1.0 - p, p])

    def predict(self, X, embeddings=None):
        return (self.predict_proba(X, embeddings)[:, 1] > THRESHOLD).astype(int)
