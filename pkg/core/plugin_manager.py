import importlib
import inspect
import logging
import pkgutil
from typing import Dict, Optional, Type

import plugins
from core.errors import ConfigError
from plugins.base_plugin import BaseRegularizer

logger = logging.getLogger(__name__)


class PluginManager:
    """管理所有正则化插件，根据名称实例化插件"""

    def __init__(self, package=plugins):
        self.package = package
        self.plugin_classes: Dict[str, Type[BaseRegularizer]] = {}
        self.discover_plugins()

    def discover_plugins(self):
        """扫描插件包，收集所有继承 BaseRegularizer 的类"""
        for info in pkgutil.iter_modules(self.package.__path__):
            module_name = f"{self.package.__name__}.{info.name}"
            try:
                module = importlib.import_module(module_name)
            except Exception as e:
                logger.error(f"加载插件 {module_name} 失败: {e}")
                continue
            # 查找模块中继承 BaseRegularizer 的类
            for _, obj in inspect.getmembers(module, inspect.isclass):
                if issubclass(obj, BaseRegularizer) and obj is not BaseRegularizer:
                    plugin_name = getattr(obj, 'plugin_name', None) or info.name
                    self.plugin_classes[plugin_name] = obj

    def get_plugin_names(self) -> list:
        """返回所有可用插件的名称列表"""
        return sorted(self.plugin_classes.keys())

    def get_plugin(self, name: str, config: Optional[dict] = None) -> Optional[BaseRegularizer]:
        """根据名称和配置获取插件实例；"none" 返回 None"""
        if name == 'none':
            return None
        cls = self.plugin_classes.get(name)
        if cls is None:
            raise ConfigError(f"no regularizer plugin named {name!r}; available: {self.get_plugin_names()}")
        return cls(config or {})
