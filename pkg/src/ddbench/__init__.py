"""Benchmark harness for decoupled dataset distillation.

Squeeze (train teachers), recover/select/sample (synthesize a distilled set),
relabel (epoch-wise soft labels) and post-evaluate under one auditable protocol.
"""

__version__ = "0.1.0"
