"""Non-stop multi-view sensing for bin picking: depth fusion, sensing-path
planning, takt accounting, parameter tuning and a cycle simulator."""

__version__ = "0.1.0"
