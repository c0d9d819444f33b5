"""xrgen: knee X-ray exam report generation at desk scale.

Multi-view feature extraction with max-aggregation, an LSTM language
model conditioned on the aggregated exam embedding, NLL training, and
BLEU/METEOR-lite scoring — all on a small float64 autodiff core.
"""

__version__ = "0.1.0"
