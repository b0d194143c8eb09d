"""Pydantic schemas for pipeline configs and run reports."""
