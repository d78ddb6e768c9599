"""Neural ad matching at desk scale.

Trains a two-tower attentive-GRU model jointly for vector-based ad
retrieval and ad pre-ranking, exports ad vectors into a product
quantization index, and simulates a two-stage matching pipeline
(keyword + vector retrieval, then global pre-ranking).
"""

__version__ = "0.1.0"
