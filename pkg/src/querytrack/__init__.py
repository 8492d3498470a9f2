"""Query-based multi-object tracking with prompt-tuned identity descriptions.

Desk-scale, numpy-only implementation: balanced label assignment for
detect/track queries, a self-attention deduplication head, contrastive
identity alignment losses with analytic gradients, synthetic benchmark
generation, and standards-conformant tracking metrics.
"""

__version__ = "0.1.0"
