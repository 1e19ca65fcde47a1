"""Video-text question answering at desk scale.

Synthetic video-text corpora with per-frame noisy OCR observations, a
greedy IoU tracker, an instance-gathering encoder-decoder that recovers
canonical transcriptions from corrupted observations, and a
trajectory-aware question-answering model.
"""

__version__ = "0.1.0"
