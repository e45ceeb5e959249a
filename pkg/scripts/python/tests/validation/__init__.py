"""Numerical oracles: finite differences, direct DFT, metric identities, wfdb."""
