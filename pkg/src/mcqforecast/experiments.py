"""Experiment runners: unseen questions, retention, and the forecasting grid."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import (CORRECT_ANSWER, STUDENT_ANSWER, StudentRecord, decompose,
                     split_question_exclusive, split_student_task)
from .embeddings import (SERIALIZATION_MARKERS, EmbeddingArtifacts, QuestionBank,
                         _serialize, embed_instances, train_autoencoder)
from .exceptions import ContractError
from .forecaster import TrainConfig, predict_logits, train_mcqbert, train_student_forecaster
from .metrics import dummy_baseline, evaluate_predictions, sort_results
from .text import CausalLM, EncoderConfig, TextEncoder, build_vocab, clm_pretrain, mlm_pretrain

log = logging.getLogger(__name__)


def corpus_vocab(corpus, min_freq=1):
    """Vocabulary over every question and choice text plus the history markers."""
    return build_vocab(corpus.texts() + [SERIALIZATION_MARKERS], min_freq)


def pretrain_encoder(corpus, vocab, config, epochs=5, lr=1e-3, batch_size=32, mask_prob=0.15,
                     seed=0):
    """Domain adaptation: masked-LM training over the question and choice texts."""
    encoder = TextEncoder(config, np.random.default_rng(seed))
    result = mlm_pretrain(encoder, corpus.texts(), vocab, mask_prob=mask_prob, epochs=epochs,
                          lr=lr, batch_size=batch_size, seed=seed)
    return encoder, result.losses


def _labels(instances):
    return np.array([i.label for i in instances])


@dataclass
class ExperimentOutput:
    results: list
    model: object = None
    report: object = None
    extra: dict = field(default_factory=dict)


def run_experiment_1(corpus, vocab, encoder, seed=0, config=None, ratios=(0.8, 0.1, 0.1)):
    """MCQBert on questions it never saw: question-exclusive split, model and dummy rows."""
    config = config or TrainConfig(epochs=1, seed=seed)
    instances = decompose(corpus.questions, corpus.records, CORRECT_ANSWER)
    split = split_question_exclusive(instances, ratios, seed)
    model, report = train_mcqbert(instances, vocab, encoder, split, config)
    y = _labels(split.test)
    logits = predict_logits(model, split.test, vocab, max_len=config.max_len)
    row = evaluate_predictions(y, logits > 0, "mcqbert", split_id=split.split_id,
                               epoch=report.chosen_epoch, seed=seed)
    dummy = dummy_baseline(y, _labels(split.train), split_id=split.split_id, seed=seed)
    return ExperimentOutput([row, dummy], model, report, {"split": split})


def run_experiment_2(corpus, vocab, encoder, seed=0, config=None):
    """Retention: train and evaluate on the complete correct-answer set."""
    config = config or TrainConfig(epochs=1, seed=seed)
    instances = decompose(corpus.questions, corpus.records, CORRECT_ANSWER)
    model, report = train_mcqbert(instances, vocab, encoder, None, config)
    y = _labels(instances)
    logits = predict_logits(model, instances, vocab, max_len=config.max_len)
    row = evaluate_predictions(y, logits > 0, "mcqbert", split_id="retention",
                               epoch=report.chosen_epoch, seed=seed)
    dummy = dummy_baseline(y, split_id="retention", seed=seed)
    return ExperimentOutput([row, dummy], model, report)


# -- forecasting ------------------------------------------------------------

def student_split(corpus, seed=0, ratios=(0.8, 0.1, 0.1), keep_repeat_trials=True):
    instances = decompose(corpus.questions, corpus.records, STUDENT_ANSWER, keep_repeat_trials)
    return split_student_task(instances, ratios, seed)


def restrict_records(records, instances):
    """Records reduced to the interactions that own at least one of ``instances``."""
    keys = {i.interaction_key for i in instances}
    out = []
    for rec in records:
        kept = [it for k, it in enumerate(rec.interactions) if f"{rec.user_id}#{k}" in keys]
        if kept:
            out.append(StudentRecord(rec.user_id, kept))
    return out


def pretrain_decoder(records, bank, vocab, config, epochs=3, lr=1e-3, batch_size=8, seed=0):
    """Causal LM over each student's serialized history."""
    decoder = CausalLM(config, np.random.default_rng(seed))
    texts = [_serialize(rec.interactions, bank) for rec in records]
    result = clm_pretrain(decoder, texts, vocab, epochs=epochs, lr=lr, batch_size=batch_size,
                          seed=seed)
    return decoder, result.losses


@dataclass(frozen=True)
class ArtifactSettings:
    decoder: EncoderConfig | None = None
    clm_epochs: int = 3
    clm_lr: float = 1e-3
    clm_batch_size: int = 8
    mlp_hidden: int = 256
    mlp_epochs: int = 20
    mlp_lr: float = 1e-3
    lstm_epochs: int = 5
    lstm_lr: float = 3e-3
    lstm_max_examples: int | None = 4000


def build_artifacts(corpus, train_records, vocab, encoder, configs, settings, seed=0):
    """Train every artifact the requested embedder configs need, on ``train_records`` only."""
    bank = QuestionBank.from_corpus(corpus)
    art = EmbeddingArtifacts(bank, vocab, encoder)
    families = {c.family for c in configs}
    diagnostics = {}
    if "clm_pool" in families:
        if settings.decoder is None:
            raise ContractError("clm_pool needs a decoder configuration")
        art.decoder, diagnostics["clm"] = pretrain_decoder(
            train_records, bank, vocab, settings.decoder, settings.clm_epochs, settings.clm_lr,
            settings.clm_batch_size, seed)
    for cfg in configs:
        if cfg.family == "mlp_ae":
            model, diag = train_autoencoder("mlp_ae", cfg, train_records, bank,
                                            epochs=settings.mlp_epochs, seed=seed,
                                            hidden_size=settings.mlp_hidden, lr=settings.mlp_lr)
        elif cfg.family == "lstm_ae":
            model, diag = train_autoencoder("lstm_ae", cfg, train_records, bank,
                                            epochs=settings.lstm_epochs, seed=seed,
                                            lr=settings.lstm_lr,
                                            max_examples=settings.lstm_max_examples)
        else:
            continue
        art.autoencoders[cfg.config_id] = model
        diagnostics[cfg.config_id] = diag
    return art, diagnostics


def _failure_row(model, strategy, embedder, seed):
    return {"model": model, "strategy": strategy, "embedder": embedder, "epoch": "failed",
            "seed": seed}


def run_forecasting_grid(corpus, split, base, artifacts, configs, strategies, config, seed=0):
    """Every (embedder, strategy) cell plus the MCQBert and dummy baselines on the test set.

    Returns ``(results, failures, models)``; a failing cell becomes a failure
    row and the grid carries on.
    """
    if split.policy != "student_task":
        raise ContractError(f"forecasting grid needs a student_task split, got {split.policy}")
    vocab = artifacts.vocab
    y_test = _labels(split.test)
    results = [
        evaluate_predictions(y_test, predict_logits(base, split.test, vocab,
                                                    max_len=config.max_len) > 0,
                             "mcqbert", split_id=split.split_id, epoch="", seed=seed),
        dummy_baseline(y_test, _labels(split.train), split_id=split.split_id, seed=seed),
    ]
    failures, models = [], {}
    for cfg in configs:
        try:
            emb = {part: embed_instances(cfg, artifacts, corpus.records, split[part])
                   for part in ("train", "val", "test")}
        except Exception as exc:  # noqa: BLE001 - recorded as failure rows
            log.warning("embedding %s failed: %s", cfg.config_id, exc)
            failures += [_failure_row(f"student_{s}", s, cfg.config_id, seed) for s in strategies]
            continue
        for strategy in strategies:
            try:
                model, report = train_student_forecaster(
                    strategy, base, split.train, emb["train"], split.val, emb["val"], vocab,
                    config)
                logits = predict_logits(model, split.test, vocab, emb["test"], config.max_len)
            except Exception as exc:  # noqa: BLE001
                log.warning("cell %s/%s failed: %s", cfg.config_id, strategy, exc)
                failures.append(_failure_row(f"student_{strategy}", strategy, cfg.config_id,
                                             seed))
                continue
            results.append(evaluate_predictions(y_test, logits > 0, f"student_{strategy}",
                                                strategy=strategy, embedder=cfg.config_id,
                                                split_id=split.split_id,
                                                epoch=report.chosen_epoch, seed=seed))
            models[(cfg.config_id, strategy)] = (model, report)
    return sort_results(results), failures, models
