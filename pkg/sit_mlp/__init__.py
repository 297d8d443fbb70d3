"""
SiT-MLP
Skeleton action recognition with spatial topology gating MLPs:
- Minimal reverse-mode autodiff engine on numpy
- STGU / MS-TC blocks and the full network
- Synthetic skeleton data, training, evaluation, score ensembling
- CLI and MCP tool server
"""

__version__ = "0.1.0"
