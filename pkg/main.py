#!/usr/bin/env python3
"""
functional-moments
函数型数据条件矩估计的命令行工具
"""
import os
import sys

# 添加src目录到Python路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "src"))

from src.cli.app import main


if __name__ == "__main__":
    sys.exit(main())
