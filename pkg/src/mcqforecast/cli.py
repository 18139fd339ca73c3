"""Command-line entry point.

Every subcommand works inside a run directory named after the config hash,
so later commands reuse whatever earlier ones already produced.  Missing
inputs are built on demand: ``evaluate grid`` on a fresh directory runs the
whole pipeline.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import OUTPUT_DIR_ENV, bundled_config, validate_config
from .corpus import (CORRECT_ANSWER, decompose, load_corpus, save_corpus, simulate_population,
                     split_question_exclusive)
from .embeddings import (EmbeddingArtifacts, QuestionBank, embed_instances, export_embeddings,
                         load_autoencoder, save_autoencoder, train_autoencoder)
from .exceptions import ConfigError, MCQForecastError
from .experiments import (corpus_vocab, pretrain_decoder, pretrain_encoder, restrict_records,
                          student_split)
from .forecaster import (load_model, predict_logits, save_model, train_mcqbert,
                         train_student_forecaster)
from .metrics import dummy_baseline, evaluate_predictions, sort_results, write_results_csv
from .text import EncoderConfig, Vocab, load_language_model, save_language_model

log = logging.getLogger("mcqforecast")

MANIFEST = "manifest.json"


class StageError(MCQForecastError):
    def __init__(self, stage, cause):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _labels(instances):
    return np.array([i.label for i in instances])


class Pipeline:
    """Lazily built stage outputs for one run directory."""

    def __init__(self, config, output_dir=None):
        self.config = config
        root = Path(output_dir or os.environ.get(OUTPUT_DIR_ENV) or config["output_dir"])
        self.run_dir = root / config.hash
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.stages = []
        self._cache = {}
        (self.run_dir / "config.json").write_text(config.to_json() + "\n")

    def path(self, *parts):
        p = self.run_dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _memo(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def _stage(self, name, fn):
        try:
            out = fn()
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            raise StageError(name, exc) from exc
        if name not in self.stages:
            self.stages.append(name)
        return out

    # -- data ---------------------------------------------------------------

    @property
    def corpus(self):
        def build():
            files = self.config["corpus"].get("files")
            if files:
                return load_corpus(None, files["questions"], files["interactions"],
                                   files.get("topics"))
            target = self.run_dir / "corpus"
            if not (target / "interactions.jsonl").exists():
                save_corpus(simulate_population(self.config.simulator().validate()), target)
            return load_corpus(target)
        return self._memo("corpus", lambda: self._stage("simulate", build))

    @property
    def vocab(self):
        def build():
            path = self.path("vocab.txt")
            if path.exists():
                return Vocab.load(path)
            vocab = corpus_vocab(self.corpus, self.config["vocab"]["min_freq"])
            vocab.save(path)
            return vocab
        return self._memo("vocab", lambda: self._stage("simulate", build))

    def _lm_config(self, which):
        return EncoderConfig(vocab_size=len(self.vocab), **self.config.encoder_kwargs(which))

    # -- language models ----------------------------------------------------

    @property
    def encoder(self):
        def build():
            path = self.path("models", "encoder_mlm.ckpt")
            if path.exists():
                return load_language_model(path, self.vocab, "text_encoder")
            m = self.config["mlm"]
            encoder, losses = pretrain_encoder(self.corpus, self.vocab, self._lm_config("encoder"),
                                               m["epochs"], m["lr"], m["batch_size"],
                                               m["mask_prob"], self.config.seed)
            save_language_model(encoder, path, self.vocab, {"losses": losses})
            return encoder
        return self._memo("encoder", lambda: self._stage("pretrain mlm", build))

    def split(self, seed):
        return self._memo(("split", seed), lambda: student_split(
            self.corpus, seed, tuple(self.config["split"]["ratios"]),
            self.config["split"]["keep_repeat_trials"]))

    def train_records(self, seed):
        return self._memo(("train_records", seed),
                          lambda: restrict_records(self.corpus.records, self.split(seed).train))

    def decoder(self, seed):
        def build():
            path = self.path(f"seed{seed}", "decoder_clm.ckpt")
            if path.exists():
                return load_language_model(path, self.vocab, "causal_lm")
            c = self.config["clm"]
            decoder, losses = pretrain_decoder(self.train_records(seed), self.bank, self.vocab,
                                               self._lm_config("decoder"), c["epochs"], c["lr"],
                                               c["batch_size"], seed)
            save_language_model(decoder, path, self.vocab, {"losses": losses})
            return decoder
        return self._memo(("decoder", seed), lambda: self._stage("pretrain clm", build))

    @property
    def bank(self):
        return self._memo("bank", lambda: QuestionBank.from_corpus(self.corpus))

    # -- correct-answer models ---------------------------------------------

    def _mcqbert(self, name, stage_cfg, split):
        path = self.path("models", f"{name}.ckpt")
        if path.exists():
            return load_model(path, self.vocab, "mcqbert")[0], None
        instances = decompose(self.corpus.questions, self.corpus.records, CORRECT_ANSWER)
        model, report = train_mcqbert(instances, self.vocab, self.encoder, split,
                                      self.config.train_config(stage_cfg))
        report.to_csv(self.path("reports", f"{name}.csv"))
        save_model(model, path, self.vocab, extra={"chosen_epoch": report.chosen_epoch})
        return model, report

    def exp1_split(self):
        instances = decompose(self.corpus.questions, self.corpus.records, CORRECT_ANSWER)
        return split_question_exclusive(instances, tuple(self.config["split"]["ratios"]),
                                        self.config.seed)

    @property
    def mcqbert_exp1(self):
        return self._memo("mcqbert_exp1", lambda: self._stage(
            "train-mcqbert", lambda: self._mcqbert("mcqbert_exp1", "mcqbert",
                                                   self.exp1_split())[0]))

    @property
    def mcqbert_full(self):
        """Trained on every correct-answer instance: the retention model and forecasting base."""
        return self._memo("mcqbert_full", lambda: self._stage(
            "train-mcqbert", lambda: self._mcqbert("mcqbert_full", "retention", None)[0]))

    # -- student embeddings -------------------------------------------------

    def artifacts(self, seed):
        def build():
            art = EmbeddingArtifacts(self.bank, self.vocab, self.encoder)
            families = {c.family for c in self.config.embedder_configs()}
            if "clm_pool" in families:
                art.decoder = self.decoder(seed)
            for cfg in self.config.embedder_configs():
                if cfg.family in ("mlp_ae", "lstm_ae"):
                    art.autoencoders[cfg.config_id] = self.autoencoder(cfg, seed)
            return art
        return self._memo(("artifacts", seed), build)

    def autoencoder(self, cfg, seed):
        def build():
            path = self.path(f"seed{seed}", "autoencoders", f"{cfg.config_id}.ckpt")
            if path.exists():
                return load_autoencoder(path, cfg.config_id)
            a = self.config["autoencoders"]
            if cfg.family == "mlp_ae":
                params = dict(epochs=a["mlp"]["epochs"], hidden_size=a["mlp"]["hidden_size"],
                              lr=a["mlp"]["lr"])
            else:
                params = dict(epochs=a["lstm"]["epochs"], lr=a["lstm"]["lr"],
                              max_examples=a["lstm"]["max_examples"])
            model, diag = train_autoencoder(cfg.family, cfg, self.train_records(seed), self.bank,
                                            seed=seed, **params)
            save_autoencoder(model, path, cfg.config_id)
            _write_ae_diagnostics(self.path(f"seed{seed}", "reports",
                                            f"{cfg.config_id}_ae.csv"), diag)
            return model
        return self._memo(("ae", cfg.config_id, seed),
                          lambda: self._stage("train-embeddings", build))

    def instance_embeddings(self, cfg, seed, part):
        def build():
            path = self.path(f"seed{seed}", "embeddings", f"{cfg.config_id}_{part}.npy")
            if path.exists():
                return np.load(path)
            art = self.artifacts(seed)
            matrix = embed_instances(cfg, art, self.corpus.records, self.split(seed)[part])
            np.save(path, matrix)
            return matrix
        return self._memo(("emb", cfg.config_id, seed, part),
                          lambda: self._stage("train-embeddings", build))

    # -- forecasters --------------------------------------------------------

    def forecaster(self, cfg, strategy, seed):
        def build():
            path = self.path(f"seed{seed}", "forecasters", f"{cfg.config_id}_{strategy}.ckpt")
            if path.exists():
                model, meta = load_model(path, self.vocab, strategy)
                return model, meta.get("chosen_epoch", "")
            split = self.split(seed)
            model, report = train_student_forecaster(
                strategy, self.mcqbert_full, split.train,
                self.instance_embeddings(cfg, seed, "train"), split.val,
                self.instance_embeddings(cfg, seed, "val"), self.vocab,
                self.config.train_config("forecaster", seed))
            report.to_csv(self.path(f"seed{seed}", "reports",
                                    f"{cfg.config_id}_{strategy}.csv"))
            save_model(model, path, self.vocab, embedder=cfg.config_id,
                       extra={"chosen_epoch": report.chosen_epoch})
            return model, report.chosen_epoch
        return self._memo(("forecaster", cfg.config_id, strategy, seed), build)

    def train_forecasters(self):
        failures = {}
        for seed in self.config["grid_seeds"]:
            for cfg in self.config.embedder_configs():
                for strategy in self.config["strategies"]:
                    try:
                        self._stage("train-forecaster",
                                    lambda: self.forecaster(cfg, strategy, seed))
                    except StageError as exc:
                        log.warning("%s", exc)
                        failures[(cfg.config_id, strategy, seed)] = exc
        return failures

    # -- evaluation ---------------------------------------------------------

    def evaluate_exp1(self):
        def build():
            split = self.exp1_split()
            model = self.mcqbert_exp1
            y = _labels(split.test)
            logits = predict_logits(model, split.test, self.vocab,
                                    max_len=self.config["mcqbert"].get("max_len", 64))
            rows = [evaluate_predictions(y, logits > 0, "mcqbert", split_id=split.split_id,
                                         seed=self.config.seed),
                    dummy_baseline(y, _labels(split.train), split_id=split.split_id,
                                   seed=self.config.seed)]
            path = self.path("results", "exp1.csv")
            write_results_csv(rows, path)
            return path
        return self._stage("evaluate exp1", build)

    def evaluate_exp2(self):
        def build():
            instances = decompose(self.corpus.questions, self.corpus.records, CORRECT_ANSWER)
            y = _labels(instances)
            logits = predict_logits(self.mcqbert_full, instances, self.vocab,
                                    max_len=self.config["retention"].get("max_len", 64))
            rows = [evaluate_predictions(y, logits > 0, "mcqbert", split_id="retention",
                                         seed=self.config.seed),
                    dummy_baseline(y, split_id="retention", seed=self.config.seed)]
            path = self.path("results", "exp2.csv")
            write_results_csv(rows, path)
            return path
        return self._stage("evaluate exp2", build)

    def evaluate_grid(self):
        failures = self.train_forecasters()

        def build():
            rows, failed = [], []
            max_len = self.config["forecaster"].get("max_len", 64)
            for seed in self.config["grid_seeds"]:
                split = self.split(seed)
                y = _labels(split.test)
                base = predict_logits(self.mcqbert_full, split.test, self.vocab, max_len=max_len)
                rows.append(evaluate_predictions(y, base > 0, "mcqbert",
                                                 split_id=split.split_id, seed=seed))
                rows.append(dummy_baseline(y, _labels(split.train), split_id=split.split_id,
                                           seed=seed))
                for cfg in self.config.embedder_configs():
                    for strategy in self.config["strategies"]:
                        key = (cfg.config_id, strategy, seed)
                        if key in failures:
                            failed.append({"model": f"student_{strategy}", "strategy": strategy,
                                           "embedder": cfg.config_id, "epoch": "failed",
                                           "seed": seed})
                            continue
                        model, epoch = self.forecaster(cfg, strategy, seed)
                        logits = predict_logits(model, split.test, self.vocab,
                                                self.instance_embeddings(cfg, seed, "test"),
                                                max_len)
                        rows.append(evaluate_predictions(
                            y, logits > 0, f"student_{strategy}", strategy=strategy,
                            embedder=cfg.config_id, split_id=split.split_id, epoch=epoch,
                            seed=seed))
            path = self.path("results", "grid.csv")
            write_results_csv(sort_results(rows), path, failed)
            return path
        return self._stage("evaluate grid", build)

    def export(self, seed=None):
        def build():
            seed_ = self.config["grid_seeds"][0] if seed is None else seed
            art = self.artifacts(seed_)
            out = []
            for cfg in self.config.embedder_configs():
                out += export_embeddings(cfg, art, self.corpus.records,
                                         self.path("embeddings", f"{cfg.config_id}.csv"))
            return out
        return self._stage("export-embeddings", build)

    # -- manifest -----------------------------------------------------------

    def write_manifest(self):
        path = self.run_dir / MANIFEST
        previous = json.loads(path.read_text()) if path.exists() else {}
        stages = list(dict.fromkeys(previous.get("stages", []) + self.stages))
        files = {str(p.relative_to(self.run_dir)): _sha256(p)
                 for p in sorted(self.run_dir.rglob("*")) if p.is_file() and p.name != MANIFEST}
        manifest = {"config_hash": self.config.hash, "config_source": self.config.source,
                    "version": __version__, "stages": stages, "files": files}
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _write_ae_diagnostics(path, diag):
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{k},{t!r},{v!r}" for k, (t, v) in enumerate(zip(diag.train_losses,
                                                                 diag.val_losses))]
    lines.append(f"# reconstruction_ratio={diag.ratio!r}")
    path.write_text("\n".join(lines) + "\n")


# -- argument parsing ---------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON run config (default: the bundled demo.config)")
    common.add_argument("--output-dir", type=Path, default=None,
                        help=f"root for run directories (overrides the config and "
                             f"${OUTPUT_DIR_ENV})")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(
        prog="mcqforecast",
        description="Forecast which answer choice a student picks on a multiple-choice question.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("simulate", parents=[common], help="generate (or load) the corpus and vocab")
    p = sub.add_parser("pretrain", parents=[common], help="domain-adapt a language model")
    p.add_argument("kind", choices=("mlm", "clm"))
    sub.add_parser("train-mcqbert", parents=[common],
                   help="train the unseen-question and full-data correct-answer models")
    sub.add_parser("train-embeddings", parents=[common],
                   help="train embedding generators and embed every split")
    sub.add_parser("train-forecaster", parents=[common],
                   help="train every (embedder, strategy) student model")
    p = sub.add_parser("evaluate", parents=[common], help="write a results CSV")
    p.add_argument("experiment", choices=("exp1", "exp2", "grid"))
    p = sub.add_parser("export-embeddings", parents=[common],
                       help="write per-student embeddings and their 2-D projections")
    p.add_argument("--seed", type=int, default=None, help="grid seed whose artifacts to use")
    sub.add_parser("run", parents=[common], help="every stage and every results CSV")
    sub.add_parser("validate-config", parents=[common], help="check a config and print its hash")
    return parser


def _dispatch(args, pipe):
    cmd = args.command
    if cmd == "simulate":
        pipe.corpus, pipe.vocab
    elif cmd == "pretrain":
        if args.kind == "mlm":
            pipe.encoder
        else:
            for seed in pipe.config["grid_seeds"]:
                pipe.decoder(seed)
    elif cmd == "train-mcqbert":
        pipe.mcqbert_exp1, pipe.mcqbert_full
    elif cmd == "train-embeddings":
        for seed in pipe.config["grid_seeds"]:
            for cfg in pipe.config.embedder_configs():
                for part in ("train", "val", "test"):
                    pipe.instance_embeddings(cfg, seed, part)
    elif cmd == "train-forecaster":
        failures = pipe.train_forecasters()
        if failures:
            raise next(iter(failures.values()))
    elif cmd == "evaluate":
        print({"exp1": pipe.evaluate_exp1, "exp2": pipe.evaluate_exp2,
               "grid": pipe.evaluate_grid}[args.experiment]())
    elif cmd == "export-embeddings":
        for path in pipe.export(args.seed):
            print(path)
    elif cmd == "run":
        for path in (pipe.evaluate_exp1(), pipe.evaluate_exp2(), pipe.evaluate_grid()):
            print(path)
        pipe.export()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config_path = args.config or bundled_config()
    try:
        config = validate_config(config_path)
    except ConfigError as exc:
        print(f"invalid config {config_path}:", file=sys.stderr)
        for err in exc.errors:
            print(f"  {err}", file=sys.stderr)
        return 3
    if args.command == "validate-config":
        print(f"{config_path}: valid, hash {config.hash}")
        return 0
    pipe = Pipeline(config, args.output_dir)
    try:
        _dispatch(args, pipe)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        pipe.write_manifest()
    print(f"run directory: {pipe.run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
