from .ownership import (
    VerificationReport, watermark_success_rate, verify_ownership, success_rate_on_images,
)
from .guarantees import (
    false_positive_tail, false_trigger_tail, crack_probabilities, minimum_key_size,
    guarantees_table,
)

__all__ = [
    'VerificationReport', 'watermark_success_rate', 'verify_ownership', 'success_rate_on_images',
    'false_positive_tail', 'false_trigger_tail', 'crack_probabilities', 'minimum_key_size',
    'guarantees_table',
]
