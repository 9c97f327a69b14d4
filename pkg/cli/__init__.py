"""
Command-line surface for CollapseLab.
"""

__all__ = ['runner', 'manifest', 'verify']
