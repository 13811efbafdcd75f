"""可視化モジュール"""
from .charts import ChartGenerator

__all__ = ["ChartGenerator"]
