"""Desk-scale entity extraction toolkit.

Open-world extraction (per-token heads over a shared encoder, mention
clustering via Siamese link scoring and Louvain), closed-world extraction
(alias dictionary matching and feed-forward linking against a fixed
entity registry), and the labeling machinery (consensus aggregation,
broadcast sanitization, rater calibration) that produces the gold data,
behind one batch CLI and one labeling HTTP service.
"""

__version__ = "0.1.0"
