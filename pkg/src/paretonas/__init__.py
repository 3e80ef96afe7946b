"""Multi-objective architecture search balancing adversarial robustness
against the latency, energy, and memory cost of a systolic-array accelerator.

The package is organised around a position-based genotype (`genotype`),
an analytical hardware cost model (`hw_model`), pluggable fitness
evaluators (`evaluator`, `toy_model`), perturbation-budget selection
(`eps_select`), and an elitist multi-objective evolutionary engine
(`nsga2`) driven from the command line (`cli`).
"""

__version__ = "0.1.0"
