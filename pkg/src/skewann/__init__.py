"""skewann: out-of-core ANN search built to minimize SSD reads under skew.

Pipeline: k-means partition -> hardware-profiled per-cluster index plan
(Flat / graph / IVF-Flat knapsack under a memory budget) -> query-aware
in-memory navigation graph -> multi-level pruning (cluster reordering,
early stop, triangle-inequality reject-before-fetch).
"""

__version__ = "0.1.0"
