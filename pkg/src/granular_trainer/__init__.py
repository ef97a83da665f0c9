# Multi-granularity training, evaluation and hierarchy induction.
