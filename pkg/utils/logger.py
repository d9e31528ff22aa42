import logging
import threading
from pathlib import Path
from typing import Optional

from PyQt6.QtCore import QObject, pyqtSignal

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%H:%M:%S'


def setup_logging(level: int = logging.INFO, log_file: Optional[Path] = None) -> None:
    """命令行入口调用一次：根 logger 输出到终端，可选再写一份文件"""
    root = logging.getLogger()
    root.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in root.handlers):
        console = logging.StreamHandler()
        console.setFormatter(formatter)
        root.addHandler(console)
    if log_file is not None:
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)


class ThreadFilter(logging.Filter):
    """只放行创建时所在线程产生的日志（矩阵并发时各实验互不串行）"""

    def __init__(self, thread_id: Optional[int] = None):
        super().__init__()
        self.thread_id = thread_id if thread_id is not None else threading.get_ident()

    def filter(self, record: logging.LogRecord) -> bool:
        return record.thread == self.thread_id


class QtLogHandler(logging.Handler, QObject):
    """把日志行通过 Qt 信号转发出去的 Handler"""
    new_log = pyqtSignal(str)

    def __init__(self, parent=None, thread_id: Optional[int] = None):
        logging.Handler.__init__(self)
        QObject.__init__(self, parent)
        formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
        self.setFormatter(formatter)
        self.setLevel(logging.INFO)
        self.addFilter(ThreadFilter(thread_id))

    def emit(self, record):
        msg = self.format(record)
        self.new_log.emit(msg)


def attach_run_log(path: Path) -> logging.Handler:
    """给当前线程的实验挂一个 run.log，调用方负责 detach"""
    handler = logging.FileHandler(path, mode='w', encoding='utf-8')
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    handler.addFilter(ThreadFilter())
    logging.getLogger().addHandler(handler)
    return handler


def detach_handler(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()
