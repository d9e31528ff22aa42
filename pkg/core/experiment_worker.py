# core/experiment_worker.py
import logging
from pathlib import Path
from typing import List, Optional

from PyQt6.QtCore import QObject, pyqtSignal

from core.config_manager import ExperimentConfig
from core.errors import DropRegError
from core.plugin_manager import PluginManager
from core.trainer import run_experiment
from utils.logger import QtLogHandler


class ExperimentWorker(QObject):
    """在矩阵的工作线程里执行一个实验，通过信号返回结果。

    信号需在执行 run() 的同一线程里连接，回调在该线程内同步调用。
    """
    finished = pyqtSignal(object)  # 携带 ExperimentResult
    error = pyqtSignal(str)
    progress = pyqtSignal(str, int, int)

    def __init__(self, exp: ExperimentConfig, out_dir: Path, plugin_mgr: Optional[PluginManager] = None,
                 train_data=None, val_data=None):
        super().__init__()
        self.exp = exp
        self.out_dir = Path(out_dir)
        self.plugin_mgr = plugin_mgr
        self.train_data = train_data
        self.val_data = val_data
        self.log_lines: List[str] = []
        self._trainer = None
        self.failure: Optional[DropRegError] = None

    def stop(self):
        if self._trainer is not None:
            self._trainer.stop_requested = True

    def _attach(self, trainer):
        self._trainer = trainer

    def run(self):
        log_handler = QtLogHandler()
        log_handler.new_log.connect(self.log_lines.append)
        logging.getLogger().addHandler(log_handler)
        try:
            result = run_experiment(self.exp, self.out_dir, self.train_data, self.val_data,
                                    plugin_mgr=self.plugin_mgr,
                                    progress_callback=self.progress.emit,
                                    trainer_ready=self._attach)
            self.finished.emit(result)
        except DropRegError as e:
            self.failure = e
            self.error.emit(f"{self.exp.name}: {e}")
        finally:
            logging.getLogger().removeHandler(log_handler)
