"""Hammer: target discovery, deployment and health over the HMR1 wire protocol."""
