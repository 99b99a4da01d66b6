"""nestrec: train-once, extract-many sequential recommendation.

One training run over block-masked weights yields a ladder of independently
deployable models (widths 8, 16, ..., D). The sequence backbone is a linear
recurrent unit trained through a parallel prefix scan; item representations
fuse precomputed text and image embeddings.
"""

__version__ = "0.1.0"
