"""Synthesis, learning, control and verification services."""
