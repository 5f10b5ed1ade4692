"""ICU delirium risk pipeline.

Structured EHR tables -> cohort selection and 12-hour-interval delirium
labels -> deterministic text reports -> small transformer encoder trained
in two stages (masked-token pretraining, classification fine-tuning) ->
bootstrap AUROC evaluation and section-level Shapley attribution.
"""

__version__ = "0.1.0"
