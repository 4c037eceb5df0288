"""Desk-scale video action recognition.

Two model families on a minimal autodiff tensor: gate-shift networks
(temporal mixing inside a 2D backbone) and attention-aggregation models
(recurrent attention plus context/object descriptors), with their training
recipes, inference protocols, and a score-averaging evaluation harness.
"""

__version__ = "0.1.0"
