from prune_ast.core import mcp

# 导入各模块以注册工具
from prune_ast import tools  # noqa: F401
