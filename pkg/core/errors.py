"""项目内统一的异常类型。

每个异常带一个 ``exit_code``，命令行入口据此决定进程退出码：
0 成功，2 配置错误，3 训练发散，4 I/O 错误。
"""


class DropRegError(Exception):
    """所有业务异常的基类"""
    exit_code = 1


class ConfigError(DropRegError):
    exit_code = 2


class ShapeError(ConfigError):
    """形状不匹配，消息里同时给出两个形状"""

    def __init__(self, op: str, left, right):
        super().__init__(f"{op}: shape mismatch {tuple(left)} vs {tuple(right)}")
        self.left = tuple(left)
        self.right = tuple(right)


class InputError(ConfigError):
    pass


class ScheduleError(ConfigError):
    pass


class OptimizerError(ConfigError):
    pass


class UnsupportedOperationError(DropRegError):
    exit_code = 2


class DegenerateBatchError(DropRegError):
    exit_code = 2


class ContractViolation(DropRegError):
    exit_code = 2


class EmptyTargetError(DropRegError):
    pass


class InvalidLabelError(DropRegError):
    pass


class EvaluationError(DropRegError):
    pass


class UndefinedMetricError(EvaluationError):
    pass


class UndefinedRatioError(DropRegError):
    pass


class TrainingDivergedError(DropRegError):
    exit_code = 3

    def __init__(self, batch_index: int, loss: float):
        super().__init__(f"training diverged at batch {batch_index} (loss={loss})")
        self.batch_index = batch_index
        self.loss = loss


class DropRegIOError(DropRegError):
    exit_code = 4


class DatasetError(DropRegIOError):
    pass


class DatasetFormatError(DatasetError):
    pass
