"""Prototype-driven online curation of paired-embedding corpora.

The engine scores samples by distance to a bank of evolving prototypes,
keeps the informative long tail, under-samples dense regions with
equipartition transport plus farthest point sampling, and emits a curated
subset suitable for contrastive training at a fraction of the original
size.  A toy InfoNCE trainer, zero-shot evaluation metrics, a density
analysis suite, and a synthetic long-tailed corpus generator make the full
loop testable end to end.
"""

__version__ = "0.1.0"
