"""Student embeddings from answering histories.

Four families:

* ``mlp_ae``       bottleneck of an MLP autoencoder over an engineered
                   history feature vector;
* ``lstm_ae``      final hidden state of an LSTM autoencoder over the last
                   ``L`` interactions, one compact feature row each;
* ``encoder_pool`` mean of the final-layer encoder states over the serialized
                   last 10 interactions;
* ``clm_pool``     mean of the penultimate-layer causal LM states over the
                   serialized last ``L`` interactions.

Every embedding "as of" a cutoff uses only interactions strictly before the
cutoff; an empty history embeds to the zero vector.

History feature vector layout (width ``Q * (2 + C) + 2 + T``)::

    per question, in bank order:  attempted, correct, selected one-hot (C)
    aggregate:                    attempts / Q, overall accuracy,
                                  per-topic accuracy (T)

Repeated attempts keep the latest answer in the question block.  LSTM rows
are ``correct, choice one-hot (C), topic one-hot (T), gap bucket (5)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.decomposition import PCA
from sklearn.utils.validation import check_array, check_is_fitted

from . import autograd as ag
from . import nn
from .autograd import Tensor, no_grad
from .checkpoint import read_checkpoint, write_checkpoint
from .exceptions import CompatibilityError, ConfigError, ContractError, DependencyError, ReferentialError
from .optim import Adam
from .text import encode_text, pad_batch

FAMILIES = ("mlp_ae", "lstm_ae", "encoder_pool", "clm_pool")
SEQUENCE_LENGTHS = (10, 20, 30, 40)
LSTM_DEPTHS = (1, 2, 3, 4)
ENCODER_POOL_LENGTH = 10
# gap to the previous interaction: first, < 2 min, < 1 h, < 1 day, longer
GAP_EDGES_MS = (120_000, 3_600_000, 86_400_000)
N_GAP_BUCKETS = len(GAP_EDGES_MS) + 2
SERIALIZATION_MARKERS = "Q : A : , CORRECT WRONG"


# -- configs -----------------------------------------------------------------

@dataclass(frozen=True)
class EmbedderConfig:
    family: str
    sequence_length: int | None = None
    lstm_layers: int | None = None
    embedding_dim: int = 32

    def validate(self):
        errors = []
        if self.family not in FAMILIES:
            errors.append(f"family: must be one of {FAMILIES}, got {self.family!r}")
        if self.family in ("lstm_ae", "clm_pool") and self.sequence_length not in SEQUENCE_LENGTHS:
            errors.append(f"sequence_length: must be one of {SEQUENCE_LENGTHS}")
        if self.family == "encoder_pool" and self.sequence_length != ENCODER_POOL_LENGTH:
            errors.append(f"sequence_length: encoder_pool uses {ENCODER_POOL_LENGTH}")
        if self.family == "mlp_ae" and self.sequence_length is not None:
            errors.append("sequence_length: not used by mlp_ae")
        if self.family == "lstm_ae" and self.lstm_layers not in LSTM_DEPTHS:
            errors.append(f"lstm_layers: must be one of {LSTM_DEPTHS}")
        if self.family != "lstm_ae" and self.lstm_layers is not None:
            errors.append("lstm_layers: only used by lstm_ae")
        if self.embedding_dim < 1:
            errors.append("embedding_dim: must be >= 1")
        if errors:
            raise ConfigError(errors)
        return self

    @property
    def config_id(self):
        if self.family == "mlp_ae":
            return "mlp_ae"
        if self.family == "lstm_ae":
            return f"lstm_ae-L{self.sequence_length}-n{self.lstm_layers}"
        return f"{self.family}-L{self.sequence_length}"


def embedder_registry(embedding_dim=32):
    """All 22 embedder configurations, in a fixed order."""
    out = [EmbedderConfig("mlp_ae", embedding_dim=embedding_dim)]
    out += [EmbedderConfig("lstm_ae", L, n, embedding_dim)
            for L in SEQUENCE_LENGTHS for n in LSTM_DEPTHS]
    out.append(EmbedderConfig("encoder_pool", ENCODER_POOL_LENGTH, embedding_dim=embedding_dim))
    out += [EmbedderConfig("clm_pool", L, embedding_dim=embedding_dim) for L in SEQUENCE_LENGTHS]
    return out


def config_from_id(config_id, embedding_dim=32):
    for cfg in embedder_registry(embedding_dim):
        if cfg.config_id == config_id:
            return cfg
    raise ConfigError(f"unknown embedder config id {config_id!r}")


# -- features ------------------------------------------------------------------

class QuestionBank:
    """Fixed question and topic ordering that defines feature layouts."""

    def __init__(self, questions, topics=None):
        self.questions = list(questions)
        self.index = {q.id: i for i, q in enumerate(self.questions)}
        self.by_id = {q.id: q for q in self.questions}
        topic_ids = sorted({q.topic_id for q in self.questions} |
                           {t.id for t in (topics or ())})
        self.topic_index = {t: i for i, t in enumerate(topic_ids)}
        self.n_choices = max(len(q.choices) for q in self.questions)

    @classmethod
    def from_corpus(cls, corpus):
        return cls(corpus.questions, corpus.topics)

    @property
    def n_questions(self):
        return len(self.questions)

    @property
    def n_topics(self):
        return len(self.topic_index)

    @property
    def feature_width(self):
        return self.n_questions * (2 + self.n_choices) + 2 + self.n_topics

    @property
    def row_width(self):
        return 1 + self.n_choices + self.n_topics + N_GAP_BUCKETS

    def question(self, question_id):
        q = self.by_id.get(question_id)
        if q is None:
            raise ReferentialError(f"unknown question id {question_id!r} in history")
        return q


def _history(record, cutoff):
    return record.interactions if cutoff is None else record.history_before(cutoff)


def history_feature_vector(record, cutoff, bank):
    """Engineered feature vector of the interactions strictly before ``cutoff``."""
    return _features(_history(record, cutoff), bank)


def _features(history, bank):
    c = bank.n_choices
    block = 2 + c
    v = np.zeros(bank.feature_width)
    t_right = np.zeros(bank.n_topics)
    t_seen = np.zeros(bank.n_topics)
    n_right = 0
    for it in history:
        q = bank.question(it.question_id)
        b = bank.index[q.id] * block
        v[b:b + block] = 0.0
        v[b] = 1.0
        v[b + 1] = float(it.is_correct)
        for sel in it.selected_choice_ids:
            v[b + 2 + q.choice_index(sel)] = 1.0
        t = bank.topic_index[q.topic_id]
        t_seen[t] += 1
        t_right[t] += it.is_correct
        n_right += it.is_correct
    n = len(history)
    if n:
        agg = bank.n_questions * block
        v[agg] = n / bank.n_questions
        v[agg + 1] = n_right / n
        v[agg + 2:] = np.divide(t_right, t_seen, out=np.zeros_like(t_right), where=t_seen > 0)
    return v


def _gap_bucket(gap_ms):
    if gap_ms is None:
        return 0
    return 1 + int(np.searchsorted(GAP_EDGES_MS, gap_ms, side="right"))


def interaction_rows(history, bank):
    """One compact feature row per interaction, oldest first."""
    rows = np.zeros((len(history), bank.row_width))
    c, t = bank.n_choices, bank.n_topics
    prev = None
    for r, it in enumerate(history):
        q = bank.question(it.question_id)
        rows[r, 0] = float(it.is_correct)
        for sel in it.selected_choice_ids:
            rows[r, 1 + q.choice_index(sel)] = 1.0
        rows[r, 1 + c + bank.topic_index[q.topic_id]] = 1.0
        gap = None if prev is None else it.timestamp - prev
        rows[r, 1 + c + t + _gap_bucket(gap)] = 1.0
        prev = it.timestamp
    return rows


def sequence_window(history, bank, length):
    """The last ``length`` rows, left-padded with zero rows."""
    rows = interaction_rows(history[-length:], bank)
    out = np.zeros((length, bank.row_width))
    if len(rows):
        out[length - len(rows):] = rows
    return out


def _segment(it, bank):
    q = bank.question(it.question_id)
    chosen = ", ".join(q.choice(c).text for c in sorted(it.selected_choice_ids, key=q.choice_index))
    return f"Q: {q.text} A: {chosen} {'CORRECT' if it.is_correct else 'WRONG'}"


def serialize_history(record, cutoff, length, bank):
    """Last ``length`` interactions before ``cutoff`` as text, oldest first, [SEP]-joined."""
    if length < 1:
        raise ContractError(f"sequence length must be >= 1, got {length}")
    return _serialize(_history(record, cutoff)[-length:], bank)


def _serialize(history, bank):
    return " [SEP] ".join(_segment(it, bank) for it in history)


# -- autoencoders ----------------------------------------------------------------

@dataclass
class AEDiagnostics:
    """Loss curves (index 0 = before training) and reconstruction norms on validation data."""
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    input_norm: float = math.nan
    diff_norm: float = math.nan

    @property
    def ratio(self):
        return self.diff_norm / self.input_norm if self.input_norm > 0 else math.nan


class _MLPNet(nn.Module):
    def __init__(self, n_features, hidden, dim, rng):
        self.enc1 = nn.Linear(n_features, hidden, rng)
        self.enc2 = nn.Linear(hidden, dim, rng)
        self.dec1 = nn.Linear(dim, hidden, rng)
        self.dec2 = nn.Linear(hidden, n_features, rng)

    def encode(self, x):
        return self.enc2(ag.relu(self.enc1(x)))

    def forward(self, x):
        return self.dec2(ag.relu(self.dec1(self.encode(x))))


class _LSTMNet(nn.Module):
    def __init__(self, n_features, dim, layers, rng):
        self.encoder = nn.LSTM(n_features, dim, layers, rng)
        self.decoder = nn.LSTM(dim, dim, layers, rng)
        self.out = nn.Linear(dim, n_features, rng)

    def encode(self, x):
        return self.encoder(x)[1]

    def forward(self, x):
        code = self.encode(x)
        steps = x.shape[1]
        repeated = ag.stack([code] * steps, axis=1)
        return self.out(self.decoder(repeated)[0])


def _norms(x, y):
    axes = tuple(range(1, x.ndim))
    diff = np.sqrt(((x - y) ** 2).sum(axis=axes)).mean()
    return float(np.sqrt((x ** 2).sum(axis=axes)).mean()), float(diff)


class _AutoencoderBase(TransformerMixin, BaseEstimator):
    def _build(self, n_features, rng):
        raise NotImplementedError

    def _check(self, X):
        raise NotImplementedError

    def fit(self, X, y=None, X_val=None):
        X = self._check(X)
        if len(X) == 0:
            raise ContractError("autoencoder needs a non-empty training set")
        n_features = X.shape[-1]
        width = int(np.prod(X.shape[1:]))
        if self.embedding_dim >= width:
            raise ConfigError(f"embedding_dim: bottleneck {self.embedding_dim} must be smaller "
                              f"than the input width {width}")
        X_val = X if X_val is None else self._check(X_val)
        rng = np.random.default_rng(self.seed)
        self.net_ = self._build(n_features, rng)
        self.n_features_in_ = n_features
        opt = Adam(self.net_.named_parameters(), lr=self.lr)
        diag = AEDiagnostics()
        diag.train_losses.append(self._loss(X))
        diag.val_losses.append(self._loss(X_val))
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            for start in range(0, len(X), self.batch_size):
                batch = X[order[start:start + self.batch_size]]
                loss = ag.mse(self.net_(Tensor(batch)), batch)
                opt.zero_grad()
                loss.backward()
                opt.step()
            diag.train_losses.append(self._loss(X))
            diag.val_losses.append(self._loss(X_val))
        diag.input_norm, diag.diff_norm = _norms(X_val, self.reconstruct(X_val))
        self.diagnostics_ = diag
        return self

    def _apply(self, X, fn):
        out = []
        with no_grad():
            for start in range(0, len(X), 1024):
                out.append(fn(Tensor(X[start:start + 1024])).data)
        return np.concatenate(out) if out else np.zeros((0,))

    def _loss(self, X):
        return float(((self._apply(X, self.net_) - X) ** 2).mean())

    def transform(self, X):
        check_is_fitted(self, "net_")
        return self._apply(self._check(X), self.net_.encode)

    def reconstruct(self, X):
        check_is_fitted(self, "net_")
        return self._apply(self._check(X), self.net_)

    def state_dict(self):
        return self.net_.state_dict()

    def load_state(self, n_features, state):
        """Rebuild the fitted network from ``state_dict()`` output."""
        self.net_ = self._build(n_features, np.random.default_rng(self.seed))
        self.net_.load_state_dict(state)
        self.n_features_in_ = n_features
        return self


class MLPAutoencoder(_AutoencoderBase):
    """``F -> hidden -> E -> hidden -> F`` with ReLU, MSE loss; ``transform`` gives the E-code."""

    def __init__(self, embedding_dim=32, hidden_size=256, epochs=20, lr=1e-3, batch_size=128,
                 seed=0):
        self.embedding_dim = embedding_dim
        self.hidden_size = hidden_size
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _check(self, X):
        return check_array(X, dtype=np.float64)

    def _build(self, n_features, rng):
        return _MLPNet(n_features, self.hidden_size, self.embedding_dim, rng)


class LSTMAutoencoder(_AutoencoderBase):
    """Sequence autoencoder over ``(N, L, F)`` windows; the code is the last encoder state."""

    def __init__(self, embedding_dim=32, num_layers=1, epochs=10, lr=3e-3, batch_size=128, seed=0):
        self.embedding_dim = embedding_dim
        self.num_layers = num_layers
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _check(self, X):
        X = check_array(X, dtype=np.float64, allow_nd=True, ensure_min_features=1)
        if X.ndim != 3:
            raise ContractError(f"expected (N, L, F) sequences, got shape {X.shape}")
        return X

    def _build(self, n_features, rng):
        return _LSTMNet(n_features, self.embedding_dim, self.num_layers, rng)


_AUTOENCODERS = {"MLPAutoencoder": MLPAutoencoder, "LSTMAutoencoder": LSTMAutoencoder}


def save_autoencoder(model, path, config_id):
    check_is_fitted(model, "net_")
    meta = {"kind": "autoencoder", "class": type(model).__name__, "config_id": config_id,
            "params": model.get_params(), "n_features": int(model.n_features_in_)}
    write_checkpoint(path, model.state_dict(), meta)


def load_autoencoder(path, config_id=None):
    params, meta = read_checkpoint(path)
    if meta.get("kind") != "autoencoder" or meta.get("class") not in _AUTOENCODERS:
        raise CompatibilityError(f"{path}: not an autoencoder checkpoint")
    if config_id is not None and meta.get("config_id") != config_id:
        raise CompatibilityError(f"{path}: holds {meta.get('config_id')}, expected {config_id}")
    model = _AUTOENCODERS[meta["class"]](**meta["params"])
    return model.load_state(meta["n_features"], params)


def _user_holdout(records, fraction, seed):
    users = sorted(r.user_id for r in records)
    n_val = max(1, int(round(len(users) * fraction))) if len(users) > 1 else 0
    val = set(np.random.default_rng(seed).permutation(users)[:n_val].tolist())
    return [r for r in records if r.user_id not in val], [r for r in records if r.user_id in val]


def _prefixes(records):
    for rec in records:
        for k in range(1, len(rec.interactions) + 1):
            yield rec.interactions[:k]


def autoencoder_data(family, records, bank, sequence_length=None):
    """Training matrix: one example per non-empty history prefix."""
    if family == "mlp_ae":
        rows = [_features(h, bank) for h in _prefixes(records)]
        return np.array(rows).reshape(len(rows), bank.feature_width)
    if family == "lstm_ae":
        rows = [sequence_window(h, bank, sequence_length) for h in _prefixes(records)]
        return np.array(rows).reshape(len(rows), sequence_length, bank.row_width)
    raise ConfigError(f"family: {family!r} is not an autoencoder family")


def train_autoencoder(family, config, records, bank, epochs=None, seed=0, val_fraction=0.1,
                      max_examples=None, **params):
    """Fit an autoencoder on history prefixes; validation uses held-out students."""
    if not records:
        raise ContractError("autoencoder needs a non-empty training set")
    train_recs, val_recs = _user_holdout(records, val_fraction, seed)
    X = autoencoder_data(family, train_recs, bank, config.sequence_length)
    X_val = autoencoder_data(family, val_recs or train_recs, bank, config.sequence_length)
    if max_examples is not None and len(X) > max_examples:
        X = X[np.sort(np.random.default_rng(seed).permutation(len(X))[:max_examples])]
    kwargs = dict(embedding_dim=config.embedding_dim, seed=seed, **params)
    if epochs is not None:
        kwargs["epochs"] = epochs
    if family == "mlp_ae":
        model = MLPAutoencoder(**kwargs)
    else:
        model = LSTMAutoencoder(num_layers=config.lstm_layers, **kwargs)
    model.fit(X, X_val=X_val)
    return model, model.diagnostics_


# -- artifacts and embedding computation ---------------------------------------

@dataclass
class StudentEmbedding:
    user_id: str
    as_of: object
    vector: np.ndarray
    config_id: str


@dataclass
class EmbeddingArtifacts:
    bank: QuestionBank
    vocab: object = None
    encoder: object = None          # MLM-adapted TextEncoder (encoder_pool)
    decoder: object = None          # CausalLM (clm_pool)
    autoencoders: dict = field(default_factory=dict)   # config_id -> fitted autoencoder

    def width(self, config):
        if config.family in ("encoder_pool", "clm_pool"):
            model = self.encoder if config.family == "encoder_pool" else self.decoder
            return model.config.hidden_size
        return config.embedding_dim

    def require(self, config):
        config.validate()
        if config.family in ("mlp_ae", "lstm_ae"):
            if config.config_id not in self.autoencoders:
                raise DependencyError(config.config_id, "autoencoder has not been trained")
            return self.autoencoders[config.config_id]
        model = self.encoder if config.family == "encoder_pool" else self.decoder
        if model is None or self.vocab is None:
            raise DependencyError(config.config_id, f"{config.family} needs a trained "
                                  f"{'encoder' if config.family == 'encoder_pool' else 'decoder'}"
                                  " and a vocabulary")
        return model


def _pool_sequence(text, artifacts, config):
    if config.family == "encoder_pool":
        return encode_text(text, artifacts.vocab, artifacts.encoder.config.max_positions, "tail")
    return encode_text(text, artifacts.vocab, artifacts.decoder.config.max_positions, "tail")


def _pooled(config, artifacts, seqs):
    """Mean-pooled states for token sequences of equal length."""
    ids, mask = pad_batch(seqs)
    with no_grad():
        if config.family == "encoder_pool":
            states = artifacts.encoder.eval()(ids, mask).data
        else:
            states = artifacts.decoder.eval().hidden_states(ids, mask)[-2].data
    return states.mean(axis=1)


def _embed_histories(config, artifacts, histories):
    """Embedding rows for a list of histories (each a list of interactions)."""
    model = artifacts.require(config)
    width = artifacts.width(config)
    out = np.zeros((len(histories), width))
    live = [i for i, h in enumerate(histories) if h]
    if not live:
        return out
    bank = artifacts.bank
    if config.family == "mlp_ae":
        out[live] = model.transform(np.array([_features(histories[i], bank) for i in live]))
    elif config.family == "lstm_ae":
        out[live] = model.transform(np.array(
            [sequence_window(histories[i], bank, config.sequence_length) for i in live]))
    else:
        seqs = {i: _pool_sequence(_serialize(histories[i][-config.sequence_length:], bank),
                                  artifacts, config) for i in live}
        lengths = {}
        for i in live:
            lengths.setdefault(len(seqs[i]), []).append(i)
        for _, group in sorted(lengths.items()):
            for start in range(0, len(group), 64):
                chunk = group[start:start + 64]
                out[chunk] = _pooled(config, artifacts, [seqs[i] for i in chunk])
    return out


def compute_student_embedding(config, artifacts, record, cutoff):
    """Embedding of ``record`` as of ``cutoff`` (interactions strictly earlier)."""
    vec = _embed_histories(config, artifacts, [list(_history(record, cutoff))])[0]
    return StudentEmbedding(record.user_id, cutoff, vec, config.config_id)


def embed_cutoffs(config, artifacts, pairs):
    """Rows for ``(record, cutoff)`` pairs; equal histories are computed once."""
    histories, slot, rows = [], {}, []
    for record, cutoff in pairs:
        key = (record.user_id, cutoff)
        if key not in slot:
            slot[key] = len(histories)
            histories.append(list(_history(record, cutoff)))
        rows.append(slot[key])
    return _embed_histories(config, artifacts, histories)[rows]


def embed_instances(config, artifacts, records, instances):
    """Rows aligned with student-task instances, each as of its ``history_cutoff``."""
    by_user = {r.user_id: r for r in records}
    pairs = []
    for inst in instances:
        if inst.user_id not in by_user:
            raise ReferentialError(f"instance refers to unknown student {inst.user_id!r}")
        pairs.append((by_user[inst.user_id], inst.history_cutoff))
    return embed_cutoffs(config, artifacts, pairs)


# -- export -------------------------------------------------------------------

def export_embeddings(config, artifacts, records, out_path):
    """Write one row per (student, interaction cutoff) plus a 2-D PCA projection file.

    Returns ``(embedding_path, projection_path)``.
    """
    pairs = [(rec, it.timestamp) for rec in records for it in rec.interactions]
    matrix = embed_cutoffs(config, artifacts, pairs)
    out_path = Path(out_path)
    proj_path = out_path.with_name(out_path.stem + "_projection.csv")
    header = ["user_id", "as_of", "config_id"] + [f"v{j}" for j in range(matrix.shape[1])]
    xy = project_2d(matrix)
    try:
        for path, extra in ((out_path, None), (proj_path, xy)):
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(header + (["x", "y"] if extra is not None else []))
                for k, ((rec, cutoff), vec) in enumerate(zip(pairs, matrix)):
                    row = [rec.user_id, cutoff, config.config_id] + [repr(float(x)) for x in vec]
                    if extra is not None:
                        row += [repr(float(extra[k, 0])), repr(float(extra[k, 1]))]
                    writer.writerow(row)
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {exc.filename or out_path}: {exc.strerror}") \
            from exc
    return out_path, proj_path


def project_2d(matrix):
    """First two principal components (zero-padded when fewer are available)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    out = np.zeros((len(matrix), 2))
    k = min(2, len(matrix), matrix.shape[1] if matrix.ndim == 2 else 0)
    if k and len(matrix) > 1:
        out[:, :k] = PCA(n_components=k, svd_solver="full").fit_transform(matrix)
    return out
