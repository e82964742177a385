"""
Data models for the phantom testbed.

This module exports typed data structures shared across the pipeline.
"""

from .eval_report import EvalReport
from .sample import DatasetManifest, ManifestEntry, Sample, View

__all__ = ['DatasetManifest', 'EvalReport', 'ManifestEntry', 'Sample', 'View']
