"""
异常类型定义
"""


class StormError(Exception):
    """所有业务异常的基类"""


class ConfigError(StormError, ValueError):
    """配置文件解析失败或包含未知字段"""


class ConfigValidationError(ConfigError):
    """配置值类型错误或超出取值范围"""


class ShapeError(StormError, ValueError):
    """张量维度不匹配"""


class TrainingError(StormError, RuntimeError):
    """训练发散（损失或梯度出现非有限值）"""

    def __init__(self, message: str, param_name: str = None):
        super().__init__(message)
        self.param_name = param_name


class UsageError(StormError, RuntimeError):
    """调用方式错误（例如对已结束的状态继续 step）"""


class SpecError(StormError, ValueError):
    """任务规格无法实例化"""


class PlannerError(StormError, RuntimeError):
    """规划器参数超出允许范围"""


class NumericalError(StormError, ArithmeticError):
    """数值计算失败（例如正则化后 Fréchet 距离仍为负）"""
