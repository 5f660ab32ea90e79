"""Contrastive pretraining of brain-signal encoders against audio embeddings.

Submodules
----------
dsp         pure signal-processing primitives for neural channels
features    audio-side feature pipelines (embeddings, log-mel, z-scoring)
corpus      manifests, splits, segment pairing, the arr1 file format
encoder     the trainable brain module (forward + exact reverse-mode grads)
objective   the contrastive loss and its gradients
trainer     AdamW, one-cycle schedule, pretrain/finetune loops
evaluation  retrieval ranks, Mann-Whitney U, scaling-curve fits
probes      ridge probes with grouped cross-validation
synth       synthetic ground-truth data generator (the test oracle)
cli         config-driven experiment runner
"""

__version__ = "0.1.0"
