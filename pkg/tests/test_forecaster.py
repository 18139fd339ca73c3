import copy

import numpy as np
import pytest
from sklearn.base import clone

from gradcheck import check_module_grads
from mcqforecast import autograd as ag
from mcqforecast.autograd import Tensor
from mcqforecast.corpus import (CORRECT_ANSWER, STUDENT_ANSWER, AnswerChoice, Question,
                                SimulatorConfig, decompose, simulate_population,
                                split_question_exclusive, split_student_task)
from mcqforecast.exceptions import (CheckpointError, CompatibilityError, ConfigError,
                                    ContractError, ShapeError)
from mcqforecast.forecaster import (McqBert, McqBertClassifier, PairEncoder, StudentForecaster,
                                    StudentForecasterClassifier, TrainConfig,
                                    forecast_student_choice, load_model, new_mcqbert,
                                    new_student_forecaster, predict_logits, save_model,
                                    score_choice, score_question, train_mcqbert,
                                    train_student_forecaster)
from mcqforecast.text import EncoderConfig, TextEncoder, build_vocab


@pytest.fixture(scope="module")
def world():
    corpus = simulate_population(SimulatorConfig(n_students=30, n_questions=20, n_topics=2,
                                                 seed=5))
    vocab = build_vocab(corpus.texts())
    cfg = EncoderConfig(vocab_size=len(vocab), hidden_size=16, n_heads=2, ffn_size=32,
                        n_layers=1, dropout_rate=0.0)
    encoder = TextEncoder(cfg, np.random.default_rng(0))
    return corpus, vocab, encoder


def batch(vocab, pairs):
    return PairEncoder(vocab, 64).batch(pairs)


def test_zero_init_head_scores_one_half(world):
    corpus, vocab, encoder = world
    model = new_mcqbert(encoder.config, encoder=encoder, zero_init_head=True)
    q = corpus.questions[0]
    assert all(s == 0.5 for s in score_question(model, q, vocab).values())


def test_new_mcqbert_does_not_share_encoder(world):
    _, _, encoder = world
    model = new_mcqbert(encoder.config, encoder=encoder)
    model.encoder.tok_emb.weight.data[0, 0] += 1.0
    assert encoder.tok_emb.weight.data[0, 0] != model.encoder.tok_emb.weight.data[0, 0]


def test_sum_with_zero_embedding_equals_base_logit(world):
    corpus, vocab, encoder = world
    model = StudentForecaster(encoder, "sum", 8, np.random.default_rng(1)).eval()
    pairs = [(q.text, c.text) for q in corpus.questions[:3] for c in q.choices]
    ids, mask = batch(vocab, pairs)
    with ag.no_grad():
        a = model(ids, mask, np.zeros((len(pairs), 8))).data
        b = model.base_logit(ids, mask).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_sum_embedding_changes_logit(world):
    corpus, vocab, encoder = world
    model = StudentForecaster(encoder, "sum", 8, np.random.default_rng(1)).eval()
    ids, mask = batch(vocab, [(corpus.questions[0].text, corpus.questions[0].choices[0].text)])
    with ag.no_grad():
        a = model(ids, mask, np.zeros((1, 8))).data
        b = model(ids, mask, np.ones((1, 8))).data
    assert a[0] != b[0]


def test_base_logit_only_for_sum(world):
    _, vocab, encoder = world
    model = StudentForecaster(encoder, "cat", 8, np.random.default_rng(1))
    with pytest.raises(ContractError):
        model.base_logit(*batch(vocab, [("a", "b")]))


def test_embedding_width_mismatch(world):
    _, vocab, encoder = world
    model = StudentForecaster(encoder, "cat", 8, np.random.default_rng(1))
    with pytest.raises(ShapeError):
        model(*batch(vocab, [("1 + 2", "3")]), np.zeros((1, 7)))


def test_unknown_strategy(world):
    with pytest.raises(ConfigError):
        StudentForecaster(world[2], "mean", 8, np.random.default_rng(0))


def test_new_choice_leaves_other_scores_bitwise_unchanged(world):
    corpus, vocab, encoder = world
    model = new_mcqbert(encoder.config, encoder=encoder)
    q = corpus.questions[0]
    before = score_question(model, q, vocab)
    extra = Question(q.id, q.topic_id, q.text, q.choices + (AnswerChoice("extra", "42"),),
                     q.correct_choice_ids)
    after = score_question(model, extra, vocab)
    assert "extra" in after
    for cid, s in before.items():
        assert np.float64(after[cid]).tobytes() == np.float64(s).tobytes()


def test_cat_cached_path_matches_full_forward(world):
    corpus, vocab, encoder = world
    model = StudentForecaster(encoder, "cat", 8, np.random.default_rng(2)).eval()
    inst = decompose(corpus.questions, corpus.records, STUDENT_ANSWER)[:40]
    emb = np.random.default_rng(3).normal(size=(len(inst), 8))
    fast = predict_logits(model, inst, vocab, emb)
    full = np.array([forecast_student_choice(model, i.question_text, i.choice_text, e, vocab)
                     for i, e in zip(inst, emb)])
    np.testing.assert_allclose(1 / (1 + np.exp(-fast)), full, rtol=0, atol=1e-12)


@pytest.mark.parametrize("strategy", ["cat", "sum"])
def test_student_model_gradients(world, strategy):
    corpus, vocab, encoder = world
    rng = np.random.default_rng(4)
    model = StudentForecaster(copy.deepcopy(encoder), strategy, 4, rng)
    # O(1) weights keep every gradient well above the finite-difference noise
    for p in model.parameters():
        p.data = rng.normal(scale=0.3, size=p.shape)
    pairs = [(q.text, q.choices[0].text) for q in corpus.questions[:2]]
    ids, mask = batch(vocab, pairs)
    emb = np.random.default_rng(5).normal(size=(2, 4))
    y = np.array([1, 0])
    params = model.named_parameters()
    # softmax ignores a shift shared by all keys, so the key bias has a zero gradient
    key_bias = {k: params.pop(k) for k in list(params) if k.endswith("attn.wk.bias")}
    errors = check_module_grads(lambda: ag.bce_with_logits(model(ids, mask, emb), y), params,
                                max_entries=6)
    assert max(errors.values()) < 1e-4, errors
    for p in key_bias.values():
        assert p.grad is None or np.max(np.abs(p.grad)) < 1e-12
    for name in ("projection.weight", "head1.weight", "head2.weight"):
        assert np.any(params[name].grad != 0)


def test_split_policy_guards(world):
    corpus, vocab, encoder = world
    ca = decompose(corpus.questions, corpus.records, CORRECT_ANSWER)
    sa = decompose(corpus.questions, corpus.records, STUDENT_ANSWER)
    with pytest.raises(ContractError):
        train_mcqbert(ca, vocab, encoder, split_student_task(sa, seed=0))
    base = new_mcqbert(encoder.config, encoder=encoder)
    with pytest.raises(ContractError):
        train_student_forecaster("cat", base, sa[:4], np.zeros((4, 3)), sa[:4],
                                 np.zeros((4, 3)), vocab, split_policy="question_exclusive")
    with pytest.raises(ContractError):
        train_mcqbert(sa, vocab, encoder)


def test_report_has_one_row_per_epoch_and_best_epoch(world, tmp_path):
    corpus, vocab, encoder = world
    ca = decompose(corpus.questions, corpus.records, CORRECT_ANSWER)
    split = split_question_exclusive(ca, seed=1)
    model, report = train_mcqbert(ca, vocab, encoder, split, TrainConfig(epochs=3, lr=1e-3))
    assert [s.epoch for s in report.epochs] == [1, 2, 3]
    best = max(report.epochs, key=lambda s: s.val_mcc)
    assert report.chosen_epoch == best.epoch
    report.to_csv(tmp_path / "r.csv")
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 4


def test_retention_loss_decreases(world):
    corpus, vocab, encoder = world
    ca = decompose(corpus.questions, corpus.records, CORRECT_ANSWER)
    _, report = train_mcqbert(ca, vocab, encoder, config=TrainConfig(epochs=6, lr=3e-3,
                                                                     batch_size=16))
    assert report.epochs[-1].train_loss < report.epochs[0].train_loss


def test_frozen_encoder_is_untouched(world):
    corpus, vocab, encoder = world
    base = new_mcqbert(encoder.config, encoder=encoder)
    sa = decompose(corpus.questions, corpus.records, STUDENT_ANSWER)[:60]
    emb = np.random.default_rng(0).normal(size=(60, 4))
    for strategy in ("cat", "sum"):
        model, _ = train_student_forecaster(strategy, base, sa, emb, sa, emb, vocab,
                                            TrainConfig(epochs=1, freeze_encoder=True))
        for name, p in model.encoder.named_parameters().items():
            assert np.array_equal(p.data, base.encoder.named_parameters()[name].data)


def test_embedding_rows_must_align(world):
    corpus, vocab, encoder = world
    base = new_mcqbert(encoder.config, encoder=encoder)
    sa = decompose(corpus.questions, corpus.records, STUDENT_ANSWER)[:8]
    with pytest.raises(ShapeError):
        train_student_forecaster("cat", base, sa, np.zeros((7, 3)), sa, np.zeros((8, 3)), vocab)


class TestEmbeddingStandardization:
    def test_stats_ignore_zero_rows_and_zero_rows_stay_zero(self, world):
        _, _, encoder = world
        model = StudentForecaster(encoder, "cat", 3, np.random.default_rng(0))
        rows = np.array([[1.0, 2.0, 3.0], [3.0, 6.0, 3.0], [0.0, 0.0, 0.0]])
        model.fit_embedding_scaler(rows)
        np.testing.assert_array_equal(model.embedding_center, [2.0, 4.0, 3.0])
        # a constant column keeps unit scale
        np.testing.assert_array_equal(model.embedding_scale, [1.0, 2.0, 1.0])
        np.testing.assert_array_equal(model._check(rows), [[-1, -1, 0], [1, 1, 0], [0, 0, 0]])

    def test_sum_zero_identity_survives_fitted_scaler(self, world):
        corpus, vocab, encoder = world
        model = StudentForecaster(encoder, "sum", 4, np.random.default_rng(2)).eval()
        model.fit_embedding_scaler(np.random.default_rng(3).normal(5.0, 2.0, size=(30, 4)))
        pairs = [(q.text, c.text) for q in corpus.questions[:2] for c in q.choices]
        ids, mask = batch(vocab, pairs)
        with ag.no_grad():
            a = model(ids, mask, np.zeros((len(pairs), 4))).data
            b = model.base_logit(ids, mask).data
        np.testing.assert_array_equal(a, b)

    def test_training_fits_scaler_unless_disabled(self, world):
        corpus, vocab, encoder = world
        base = new_mcqbert(encoder.config, encoder=encoder)
        sa = decompose(corpus.questions, corpus.records, STUDENT_ANSWER)[:16]
        emb = np.random.default_rng(4).normal(3.0, 1.0, size=(16, 3))
        on, _ = train_student_forecaster("cat", base, sa, emb, sa, emb, vocab,
                                         TrainConfig(epochs=1))
        off, _ = train_student_forecaster("cat", base, sa, emb, sa, emb, vocab,
                                          TrainConfig(epochs=1, standardize_embeddings=False))
        assert np.all(on.embedding_center != 0)
        assert np.array_equal(off.embedding_center, np.zeros(3))

    def test_flag_must_be_boolean(self):
        with pytest.raises(ConfigError):
            TrainConfig(standardize_embeddings="yes").validate()


class TestCheckpoints:
    def test_round_trip(self, world, tmp_path):
        corpus, vocab, encoder = world
        base = new_mcqbert(encoder.config, encoder=encoder)
        model = new_student_forecaster(base, "sum", 5, seed=3)
        model.fit_embedding_scaler(np.random.default_rng(1).normal(2.0, 3.0, size=(20, 5)))
        save_model(model, tmp_path / "m.ckpt", vocab, embedder="mlp_ae")
        back, meta = load_model(tmp_path / "m.ckpt", vocab, strategy="sum")
        assert meta["embedder"] == "mlp_ae" and isinstance(back, StudentForecaster)
        inst = decompose(corpus.questions, corpus.records, STUDENT_ANSWER)[:12]
        emb = np.random.default_rng(0).normal(size=(12, 5))
        assert np.array_equal(predict_logits(model.eval(), inst, vocab, emb),
                              predict_logits(back, inst, vocab, emb))

    def test_mcqbert_round_trip(self, world, tmp_path):
        corpus, vocab, encoder = world
        model = new_mcqbert(encoder.config, encoder=encoder)
        save_model(model, tmp_path / "b.ckpt", vocab)
        back, _ = load_model(tmp_path / "b.ckpt", vocab, strategy="mcqbert")
        q = corpus.questions[1]
        assert isinstance(back, McqBert)
        assert score_choice(back, q.text, q.choices[0].text, vocab) == \
            score_choice(model, q.text, q.choices[0].text, vocab)

    def test_strategy_mismatch(self, world, tmp_path):
        _, vocab, encoder = world
        model = new_student_forecaster(new_mcqbert(encoder.config, encoder=encoder), "cat", 5)
        save_model(model, tmp_path / "c.ckpt", vocab)
        with pytest.raises(CompatibilityError):
            load_model(tmp_path / "c.ckpt", vocab, strategy="sum")

    def test_vocab_mismatch(self, world, tmp_path):
        _, vocab, encoder = world
        save_model(new_mcqbert(encoder.config, encoder=encoder), tmp_path / "v.ckpt", vocab)
        with pytest.raises(CompatibilityError):
            load_model(tmp_path / "v.ckpt", build_vocab(["something else entirely"]))

    def test_truncated(self, world, tmp_path):
        _, vocab, encoder = world
        path = tmp_path / "t.ckpt"
        save_model(new_mcqbert(encoder.config, encoder=encoder), path, vocab)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_model(path, vocab)


class TestEstimators:
    def test_mcqbert_classifier(self, world):
        corpus, vocab, encoder = world
        ca = decompose(corpus.questions, corpus.records, CORRECT_ANSWER)
        clf = McqBertClassifier(vocab=vocab, encoder=encoder, epochs=1)
        assert clone(clf).get_params()["epochs"] == 1
        clf.fit(ca)
        proba = clf.predict_proba([(ca[0].question_text, ca[0].choice_text)])
        assert proba.shape == (1, 2) and abs(proba.sum() - 1) < 1e-12
        assert set(clf.predict(ca)) <= {0, 1}

    def test_labels_override(self, world):
        _, vocab, encoder = world
        clf = McqBertClassifier(vocab=vocab, encoder=encoder)
        with pytest.raises(ContractError):
            clf.fit([("1 + 1", "2")], [3])

    def test_unfitted(self, world):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            McqBertClassifier(vocab=world[1], encoder=world[2]).predict([("1", "2")])

    def test_student_classifier(self, world):
        corpus, vocab, encoder = world
        base = new_mcqbert(encoder.config, encoder=encoder)
        sa = decompose(corpus.questions, corpus.records, STUDENT_ANSWER)[:40]
        emb = np.random.default_rng(1).normal(size=(40, 3))
        clf = StudentForecasterClassifier(vocab=vocab, base=base, strategy="sum", epochs=1)
        clf.fit(sa, embeddings=emb)
        assert clf.predict(sa, embeddings=emb).shape == (40,)
        with pytest.raises(ShapeError):
            clf.predict(sa, embeddings=emb[:, :2])
