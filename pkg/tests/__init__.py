"""Test package for VAS backend."""


