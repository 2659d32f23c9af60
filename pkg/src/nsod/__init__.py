"""Few-shot object detection from a handful of labeled support images.

Pseudo-labels for an unlabeled pool come from region-to-support similarity,
are refined by a teacher classifier, and train a weakly supervised student
detector.
"""

__version__ = "0.1.0"
