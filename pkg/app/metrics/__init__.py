"""Prometheus metrics for zdsynth pipeline runs."""
