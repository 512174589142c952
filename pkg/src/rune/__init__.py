"""Runefile compiler, rune runtime, deployment and benchmark tooling."""
