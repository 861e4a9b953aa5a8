from .centroids import ClassCentroidMap, extract_class_centroids, select_source_classes
from .composer import (
    WatermarkSpec, WatermarkComposer, build_watermark_dataset, select_target_label,
)
from .embedding import LossWeights, EmbeddingConfig, PhaseConfig, coupling_loss, total_loss, embed_watermark
from .keys import KeySampleSet, train_surrogate, stage1_filter, stage2_topk, generate_key_samples

__all__ = [
    'ClassCentroidMap', 'extract_class_centroids', 'select_source_classes',
    'WatermarkSpec', 'WatermarkComposer', 'build_watermark_dataset', 'select_target_label',
    'LossWeights', 'EmbeddingConfig', 'PhaseConfig', 'coupling_loss', 'total_loss', 'embed_watermark',
    'KeySampleSet', 'train_surrogate', 'stage1_filter', 'stage2_topk', 'generate_key_samples',
]
