"""
functional-moments 核心模块
周期样条基、惩罚平滑、FoSR、得分矩回归、条件矩曲面、自助法置信带与模拟
"""
