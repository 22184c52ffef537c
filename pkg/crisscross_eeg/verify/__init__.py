"""Verification suites: finite-difference gradients and brute-force oracles."""
