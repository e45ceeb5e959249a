"""
ecgforge test suite.

- unit: one file per production module
- validation: finite-difference and reference-implementation oracles
- integration: CLI end-to-end runs and dataset-dependent checks
"""
