import math

import numpy as np
import pytest
import torch

from src.core.encoder import count_params
from src.core.errors import ContractError, NumericError
from src.core.lora import lora_parameters
from src.core.tensor import Tensor, no_grad
from src.core.tokenizer import WhitespaceTokenizer
from src.training.callbacks import (
    LossLoggingCallback,
    StepRecord,
    TensorBoardCallback,
    TrainingCallback,
    get_training_callbacks,
)
from src.training.datasets import (
    TripletBatch,
    TripletRecord,
    iter_batches,
    load_corpus,
    load_triplets,
    save_corpus,
    save_triplets,
)
from src.training.optim import Adam, warmup_lr
from src.training.synthetic import (
    KeywordOverlapScorer,
    SyntheticTask,
    calibration_sequences,
    generate_synthetic,
)
from src.training.trainer import (
    LossTerms,
    LoraSettings,
    RetrievalTrainer,
    TrainConfig,
    retrieval_loss,
    run_training_loop,
)


def _exploding(model, batch):
    return LossTerms(total=Tensor(np.array(math.nan)))


class RecordingCallback(TrainingCallback):
    def __init__(self):
        self.events = []

    def on_train_start(self, phase, total_steps):
        self.events.append(("start", phase, total_steps))

    def on_step(self, record):
        self.events.append(("step", record.step))

    def on_train_end(self, phase):
        self.events.append(("end", phase))

    def on_train_abort(self, phase, error):
        self.events.append(("abort", phase, type(error).__name__))


class TestSyntheticTask:
    def test_deterministic(self, tiny_task):
        a, b = generate_synthetic(tiny_task), generate_synthetic(tiny_task)
        assert a.train == b.train
        assert a.eval.queries == b.eval.queries

    def test_negatives_share_no_keyword_with_positive(self, tiny_task, tiny_dataset):
        keywords = set(tiny_task.keyword_ids)
        for record in tiny_dataset.train:
            positive = keywords.intersection(record.positive)
            assert len(record.negatives) == tiny_task.n_negatives
            for negative in record.negatives:
                assert not positive.intersection(negative)

    def test_eval_targets_disjoint_from_training_positives(self, tiny_dataset):
        train_positives = {tuple(r.positive) for r in tiny_dataset.train}
        for judged in tiny_dataset.eval.qrels.values():
            for doc_id in judged:
                assert tuple(tiny_dataset.eval.documents[doc_id]) not in train_positives

    def test_oracle_ranks_positive_first(self, tiny_task, tiny_dataset):
        scorer = KeywordOverlapScorer.for_task(tiny_task)
        for record in tiny_dataset.train:
            assert record.teacher_scores[0] == scorer(record.query, record.positive) == tiny_task.keywords_per_doc
            assert max(record.teacher_scores[1:]) == 0.0

    def test_too_few_keyword_sets(self):
        task = SyntheticTask(vocab_size=64, n_docs=20, n_keywords=4, keywords_per_doc=2, n_eval_queries=2)
        with pytest.raises(ContractError, match="distinct keyword sets"):
            generate_synthetic(task)

    def test_no_filler_left(self):
        with pytest.raises(ValueError):
            SyntheticTask(vocab_size=16, n_keywords=15)

    def test_calibration_sequences(self, tiny_task):
        sequences = calibration_sequences(tiny_task, samples=5, seq_len=10, seed=2)
        assert len(sequences) == 5
        assert all(len(s) == 10 and 0 not in s for s in sequences)
        assert sequences == calibration_sequences(tiny_task, samples=5, seq_len=10, seed=2)


class TestDatasets:
    def test_triplets_survive_disk(self, tiny_dataset, tmp_path):
        save_triplets(tmp_path / "train.jsonl", tiny_dataset.train)
        assert load_triplets(tmp_path / "train.jsonl") == tiny_dataset.train

    def test_corpus_survives_disk(self, tiny_dataset, tmp_path):
        save_corpus(tmp_path / "eval", tiny_dataset.eval)
        restored = load_corpus(tmp_path / "eval")
        assert restored.documents == tiny_dataset.eval.documents
        assert restored.qrels == tiny_dataset.eval.qrels

    def test_corpus_token_ids_checked_against_vocab(self, tiny_dataset, tmp_path):
        save_corpus(tmp_path / "eval", tiny_dataset.eval)
        assert load_corpus(tmp_path / "eval", vocab_size=64).queries == tiny_dataset.eval.queries
        with pytest.raises(ContractError, match="unknown token id"):
            load_corpus(tmp_path / "eval", vocab_size=10)

    def test_tokenizer(self):
        tokenizer = WhitespaceTokenizer(vocab_size=8)
        assert tokenizer.encode(" 3 7\t1 ") == [3, 7, 1]
        assert tokenizer.decode([3, 7]) == "3 7"
        with pytest.raises(ContractError, match="<eos>"):
            tokenizer.encode("0 2")
        with pytest.raises(ContractError, match="non-integer"):
            tokenizer.encode("2 x")

    def test_bad_triplet_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"query": [1], "positive": [2], "negatives": [[3]], "teacher_scores": [1.0]}\n')
        with pytest.raises(ContractError, match="bad.jsonl:1"):
            load_triplets(path)

    def test_batches_cover_records(self, tiny_dataset):
        batches = list(iter_batches(tiny_dataset.train, 5, np.random.default_rng(0)))
        assert [b.size for b in batches] == [5, 5, 5, 1]
        assert batches[0].teacher_scores.shape == (5, 4)

    def test_ragged_negatives_rejected(self):
        records = [
            TripletRecord(query=[1], positive=[2], negatives=[[3]]),
            TripletRecord(query=[1], positive=[2], negatives=[]),
        ]
        with pytest.raises(ContractError):
            TripletBatch.from_records(records)


class TestOptimizer:
    def test_matches_torch_adam(self, rng):
        start = rng.normal(size=(3, 4))
        grads = [rng.normal(size=(3, 4)) for _ in range(4)]

        ours = Tensor(start.copy(), requires_grad=True, dtype=np.float64)
        optimizer = Adam([ours], lr=1e-2)
        reference = torch.tensor(start.copy(), requires_grad=True)
        torch_optimizer = torch.optim.Adam([reference], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
        for g in grads:
            ours.grad = g.copy()
            optimizer.step()
            reference.grad = torch.tensor(g)
            torch_optimizer.step()
        np.testing.assert_allclose(ours.data, reference.detach().numpy(), atol=1e-12)

    def test_parameters_without_gradient_stay(self):
        p = Tensor(np.ones(3), requires_grad=True)
        Adam([p], lr=0.1).step()
        np.testing.assert_array_equal(p.data, np.ones(3))

    def test_rejects_empty_parameter_list(self):
        with pytest.raises(ContractError):
            Adam([], lr=0.1)

    def test_warmup(self):
        assert [warmup_lr(1.0, s, 4) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]
        assert warmup_lr(0.3, 0, 0) == 0.3


class TestTrainer:
    def test_loss_decreases(self, tiny_model, tiny_dataset):
        config = TrainConfig(tau=0.1, learning_rate=5e-3, epochs=8, batch_size=4, warmup_steps=0)
        probe = TripletBatch.from_records(tiny_dataset.train)
        with no_grad():
            before = retrieval_loss(tiny_model, probe, tau=0.1).total.item()
        result = RetrievalTrainer(config).train(tiny_model, tiny_dataset.train)
        with no_grad():
            after = retrieval_loss(result.model, probe, tau=0.1).total.item()
        assert len(result.history) == 32
        assert after < before

    def test_input_model_untouched(self, tiny_model, tiny_dataset):
        before = tiny_model.token_embedding.data.copy()
        RetrievalTrainer(TrainConfig(max_steps=1, batch_size=4)).train(tiny_model, tiny_dataset.train)
        np.testing.assert_array_equal(tiny_model.token_embedding.data, before)

    def test_loss_terms_include_distillation(self, tiny_model, tiny_dataset):
        with no_grad():
            terms = retrieval_loss(tiny_model, TripletBatch.from_records(tiny_dataset.train[:3]), distill_weight=0.5)
        assert set(terms.as_dict()) == {"total", "infonce", "distill"}
        assert terms.as_dict()["total"] == pytest.approx(terms.components["infonce"] + 0.5 * terms.components["distill"])

    def test_lora_training_merges_back(self, tiny_model, tiny_dataset):
        lora = LoraSettings(rank=2, alpha=4.0, targets=["q_proj", "up_proj"])
        config = TrainConfig(learning_rate=1e-2, max_steps=3, batch_size=4, warmup_steps=0, lora=lora)
        result = RetrievalTrainer(config).train(tiny_model, tiny_dataset.train)

        assert result.metadata["trainable"] == "lora"
        assert result.metadata["trainable_params"] == 4 * ((32 + 32) + (32 + 64))
        assert not lora_parameters(result.model)
        assert count_params(result.model) == count_params(tiny_model)
        q_before = tiny_model.blocks[0].attn.q_proj.weight.data
        assert not np.array_equal(result.model.blocks[0].attn.q_proj.weight.data, q_before)
        np.testing.assert_array_equal(
            result.model.blocks[0].attn.k_proj.weight.data, tiny_model.blocks[0].attn.k_proj.weight.data
        )

    def test_lora_without_merge_keeps_adapters(self, tiny_model, tiny_dataset):
        lora = LoraSettings(rank=2, alpha=4.0, targets=["q_proj"], merge=False)
        result = RetrievalTrainer(TrainConfig(max_steps=1, batch_size=4, lora=lora)).train(tiny_model, tiny_dataset.train)
        assert len(lora_parameters(result.model)) == 2 * tiny_model.n_layers

    def test_non_finite_loss_aborts(self, tiny_model, tiny_dataset, tmp_path):
        recorder = RecordingCallback()
        board = TensorBoardCallback(tmp_path / "tb")
        with pytest.raises(NumericError, match="step 0"):
            run_training_loop(
                tiny_model,
                tiny_dataset.train,
                tiny_model.parameters(),
                _exploding,
                phase="train",
                learning_rate=1e-3,
                batch_size=4,
                epochs=1,
                callbacks=[recorder, board],
            )
        assert recorder.events == [("start", "train", 4), ("abort", "train", "NumericError")]
        assert board._writer is None
        assert (tmp_path / "tb" / "train").is_dir()

    def test_unbounded_run_rejected(self, tiny_model, tiny_dataset):
        with pytest.raises(ContractError):
            run_training_loop(
                tiny_model,
                tiny_dataset.train,
                tiny_model.parameters(),
                RetrievalTrainer(TrainConfig()).loss,
                phase="train",
                learning_rate=1e-3,
                batch_size=4,
                epochs=None,
            )

    def test_callbacks_see_every_step(self, tiny_model, tiny_dataset):
        recorder = RecordingCallback()
        RetrievalTrainer(TrainConfig(max_steps=3, batch_size=4), [recorder]).train(tiny_model, tiny_dataset.train)
        assert recorder.events == [("start", "train", 3), ("step", 0), ("step", 1), ("step", 2), ("end", "train")]


class TestCallbacks:
    def test_loss_logging_keeps_totals(self):
        callback = LossLoggingCallback(log_freq=2)
        callback.on_train_start("train", 2)
        callback.on_step(StepRecord(phase="train", step=0, epoch=0, lr=0.1, terms={"total": 2.0}))
        callback.on_step(StepRecord(phase="train", step=1, epoch=0, lr=0.1, terms={"total": 1.0}))
        callback.on_train_end("train")
        assert callback.totals == [2.0, 1.0]

    def test_tensorboard_only_when_enabled(self, isolated_settings, tmp_path):
        assert len(get_training_callbacks(tensorboard_dir=tmp_path)) == (2 if isolated_settings.METRICS_ENABLED else 1)
