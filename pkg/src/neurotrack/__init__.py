"""Neural tracking of speech features in EEG with match-mismatch classifiers."""

__version__ = "0.1.0"
