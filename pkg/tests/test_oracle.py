import pytest
import torch

from src.core.oracle import BlackBoxOracle, agreement, distill_from_oracle
from src.core.training import TrainingSchedule
from src.watermark.keys import train_surrogate

from conftest import FixedLabelModel, labeled


def test_oracle_counts_queries_and_hides_the_model():
    oracle = BlackBoxOracle(FixedLabelModel(3))
    oracle.labels(torch.rand(5, 1, 16, 16))
    oracle.probabilities(torch.rand(2, 1, 16, 16))
    assert oracle.query_count == 7
    assert not hasattr(oracle, "model")


def test_oracle_probabilities_follow_temperature():
    oracle = BlackBoxOracle(FixedLabelModel(3))
    sharp = oracle.probabilities(torch.rand(1, 1, 16, 16), temperature=1.0)
    flat = oracle.probabilities(torch.rand(1, 1, 16, 16), temperature=8.0)
    assert sharp[0, 3] > flat[0, 3] > 0.1
    assert sharp.dtype == torch.float32


def test_unknown_label_mode():
    with pytest.raises(ValueError, match="label mode"):
        BlackBoxOracle(FixedLabelModel(3)).responses(torch.rand(1, 1, 16, 16), "logits")


def test_soft_mode_rejects_temperature_below_one(synthetic_test):
    with pytest.raises(ValueError, match="temperature"):
        distill_from_oracle(BlackBoxOracle(FixedLabelModel(1)), synthetic_test.images, "mlp",
                            TrainingSchedule(epochs=1), temperature=0.5)


def test_surrogate_imitates_the_victim(trained_model, synthetic_train, synthetic_test):
    schedule = TrainingSchedule(epochs=3, batch_size=32, seed=1)
    surrogate = train_surrogate(trained_model, synthetic_train, "naive", schedule)
    assert agreement(surrogate, trained_model, synthetic_test) >= 0.5


def test_surrogate_is_deterministic(trained_model, synthetic_train, synthetic_test):
    schedule = TrainingSchedule(epochs=1, batch_size=32, seed=1)
    a = train_surrogate(trained_model, synthetic_train, "mlp", schedule)
    b = train_surrogate(trained_model, synthetic_train, "mlp", schedule)
    batch = synthetic_test.images[:10]
    assert torch.equal(a(batch), b(batch))


def test_single_sample_transfer_set_trains(trained_model, synthetic_train):
    surrogate = train_surrogate(trained_model, synthetic_train.subset([0]), "mlp", TrainingSchedule(epochs=1))
    assert surrogate.class_count == trained_model.class_count


def test_empty_transfer_set_is_fatal(trained_model):
    with pytest.raises(ValueError, match="transfer set is empty"):
        train_surrogate(trained_model, labeled(torch.rand(0, 1, 16, 16), 0), "mlp", TrainingSchedule())
