"""
命令行入口，也允许以模块方式运行：
    python -m prune_ast infer ...
    python -m prune_ast serve      # MCP 服务
"""
from .cli import main


if __name__ == "__main__":
    main()
