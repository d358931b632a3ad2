"""
异常定义
库内所有可预期的失败都从 MomentRegressionError 派生，CLI 按 exit_code 退出
"""


class MomentRegressionError(RuntimeError):
    """矩回归流程的基础异常"""

    exit_code = 1


class ConfigError(MomentRegressionError):
    """配置文件或命令行参数错误"""

    exit_code = 2


class DataError(MomentRegressionError):
    """输入数据错误：维度不匹配、缺失值、非数值单元格等"""

    exit_code = 3


class RankDeficientError(DataError):
    """协变量设计矩阵列不满秩"""


class NumericError(MomentRegressionError):
    """数值失败：奇异方程组、IRLS 不收敛、分母为零等"""

    exit_code = 4
