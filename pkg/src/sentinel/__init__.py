"""Plate-recognition orchestration with human-in-the-loop continual learning.

The package wires a pluggable visual-question-answering backend into a full
operational loop: multi-task dispatch, response parsing, calibrated confidence
routing, operator correction capture, replay-based incremental retraining,
statistical deployment gating, and atomic model activation with rollback.
"""

__version__ = "0.1.0"
