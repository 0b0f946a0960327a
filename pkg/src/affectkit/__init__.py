"""Emotion-aware image-text alignment and masked editing on toy, fully inspectable models.

Modules:
    diffcore: reverse-mode autodiff over numpy arrays.
    embedding: encoders, embedding batches and synthetic paired data.
    contrastive: global, summary and fine-grained contrastive losses.
    transport: Sinkhorn transport and the transport-weighted loss.
    objective: the combined objective, toy training and the ablation grid.
    edit_engine: attention-blended editing over a pluggable denoiser.
    captions: structured caption parsing, taxonomy and quality filtering.
    evalkit: retrieval, classification and image metrics.
    cli: the ``affectkit`` command line.
"""

__version__ = "0.1.0"
