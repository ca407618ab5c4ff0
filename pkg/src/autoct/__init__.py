"""Autonomous clinical-trial prediction: agents propose/plan/build tabular
features, tree search refines them, classical models predict."""

__version__ = "0.1.0"
