"""
Utility modules for the phantom testbed.

This module exports reusable utilities that can be used
across the codebase.
"""

from .audit import MaskAudit, CsvLog
from .seeding import stream

__all__ = ['MaskAudit', 'CsvLog', 'stream']
