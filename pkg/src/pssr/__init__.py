"""Pixel surgery + semantic regeneration (PSSR) adversarial defense toolkit.

Subpackages: data loading (`data`), target classifiers (`models`),
attack suite (`attacks`), saliency-based pixel surgery (`surgery`),
the conditional alignment extrapolator (`cae`), defended inference
pipelines (`pipeline`), and the experiment harness (`harness`).
"""

__version__ = "0.1.0"
