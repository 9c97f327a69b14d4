"""
Core functionality for CollapseLab.
"""

__all__ = ['config', 'errors', 'fields', 'model', 'semiflat', 'ma_solver', 'collapse', 'gh_metrics',
           'hk_periods', 'io']
