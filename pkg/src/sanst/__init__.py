"""Next point-of-interest recommendation with self-attention over check-in
sequences, grid-hash spatial embeddings, and relative-time attention."""

__version__ = "0.1.0"
