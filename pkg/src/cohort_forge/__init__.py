"""Cohort-level QA, harmonization and normative modelling of imaging-derived metrics."""

__version__ = "0.1.0"
