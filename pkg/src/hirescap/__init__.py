"""Caption refinement for high-resolution images.

Orchestrates a captioner, a chat model, and an ensemble of open-vocabulary
object detectors to add verified-but-unmentioned objects to an image caption
and strip objects no detector can find, then evaluates the result (POPE
hallucination polling, pairwise judging, 0-1 quantitative scoring).
"""

__version__ = "0.1.0"
