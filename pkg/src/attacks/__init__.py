from .stealing import steal_model, jbda_augment, jbda_steal
from .removal import FINETUNE_MODES, finetune, prune_weights, quantize_weights
from .preprocess import PREPROCESS_METHODS, preprocess_inputs
from .harness import ATTACK_CATALOG, AttackResult, AttackHarness, load_attack_results

__all__ = [
    'steal_model', 'jbda_augment', 'jbda_steal',
    'FINETUNE_MODES', 'finetune', 'prune_weights', 'quantize_weights',
    'PREPROCESS_METHODS', 'preprocess_inputs',
    'ATTACK_CATALOG', 'AttackResult', 'AttackHarness', 'load_attack_results',
]
