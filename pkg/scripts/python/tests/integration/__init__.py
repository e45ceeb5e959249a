"""End-to-end tests: CLI pipeline, synthetic cross-validation, optional PTB checks."""
