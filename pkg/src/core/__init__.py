from .datasets import LabeledDataset, load_dataset
from .models import ClassifierModel, build_model
from .training import TrainingSchedule, train_classifier, evaluate_accuracy, predict
from .checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    'LabeledDataset', 'load_dataset', 'ClassifierModel', 'build_model',
    'TrainingSchedule', 'train_classifier', 'evaluate_accuracy', 'predict',
    'save_checkpoint', 'load_checkpoint',
]
