"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

模块系统基类
训练与评估模块共享的生命周期、状态与事件处理
"""

import logging
from abc import ABC, abstractmethod
from enum import Enum
from typing import Any, Callable, Dict, Optional, Set, Tuple

from .events import Event, EventManager, EventType


class Stage(Enum):
    """生命周期阶段（值为日志中使用的中文名称）"""
    INITIALIZE = "初始化"
    START = "启动"
    STOP = "停止"
    DESTROY = "销毁"


class BaseModule(ABC):
    """模块基类

    提供:
    1. 生命周期管理（初始化、启动、停止、销毁）
    2. 事件发布和订阅
    3. 键值状态
    4. 错误处理：阶段内的异常被记录到 last_error 并发布 ERROR_OCCURRED，方法返回 False

    也可以作为上下文管理器使用：进入时初始化（失败则抛出记录的异常），退出时销毁。
    """

    def __init__(self, name: str):
        self.name = name
        self._event_manager = EventManager()
        self._logger = logging.getLogger(f"sedsr.{name}")
        self._initialized = False
        self._running = False
        self._subscriptions: Set[Tuple[EventType, Callable]] = set()
        self._state: Dict[str, Any] = {}
        self._last_error: Optional[BaseException] = None

    def _run_stage(self, stage: Stage, action: Callable[[], bool]) -> bool:
        try:
            self._logger.info(f"正在{stage.value}模块: {self.name}")
            success = bool(action())
        except Exception as e:
            self._last_error = e
            self._logger.error(f"模块{stage.value}出错: {self.name}, 错误: {e}")
            self.publish_event(EventType.ERROR_OCCURRED,
                               {"module": self.name, "stage": stage.name.lower(), "error": str(e)})
            return False
        if success:
            self._logger.info(f"模块{stage.value}成功: {self.name}")
        else:
            self._logger.error(f"模块{stage.value}失败: {self.name}")
        return success

    def initialize(self) -> bool:
        if self._initialized:
            return True
        self._initialized = self._run_stage(Stage.INITIALIZE, self._do_initialize)
        return self._initialized

    def start(self) -> bool:
        if not self._initialized:
            self._logger.error(f"模块未初始化，无法启动: {self.name}")
            return False
        if self._running:
            return True
        self._running = self._run_stage(Stage.START, self._do_start)
        return self._running

    def stop(self) -> bool:
        if not self._running:
            return True
        if self._run_stage(Stage.STOP, self._do_stop):
            self._running = False
            return True
        return False

    def destroy(self) -> bool:
        self.stop()
        if not self._run_stage(Stage.DESTROY, self._do_destroy):
            return False
        self._initialized = False
        self._unsubscribe_all()
        return True

    def __enter__(self):
        if not self.initialize():
            raise self._last_error or RuntimeError(f"模块初始化失败: {self.name}")
        return self

    def __exit__(self, exc_type, exc, tb):
        self.destroy()
        return False

    def publish_event(self, event_type: EventType, data: Any = None):
        self._event_manager.publish(Event(event_type, data))

    def subscribe_event(self, event_type: EventType, callback: Callable, is_async: bool = False):
        """订阅事件；销毁模块时自动取消"""
        self._event_manager.subscribe(event_type, callback, is_async)
        self._subscriptions.add((event_type, callback))

    def _unsubscribe_all(self):
        for event_type, callback in self._subscriptions:
            self._event_manager.unsubscribe(event_type, callback)
        self._subscriptions.clear()

    def get_state(self, key: str, default: Any = None) -> Any:
        return self._state.get(key, default)

    def set_state(self, key: str, value: Any):
        self._state[key] = value

    def last_error(self) -> Optional[BaseException]:
        """最近一次生命周期阶段捕获的异常"""
        return self._last_error

    def is_running(self) -> bool:
        return self._running

    def is_initialized(self) -> bool:
        return self._initialized

    @abstractmethod
    def _do_initialize(self) -> bool:
        """构建模型、优化器等资源"""

    @abstractmethod
    def _do_start(self) -> bool:
        ...

    @abstractmethod
    def _do_stop(self) -> bool:
        ...

    @abstractmethod
    def _do_destroy(self) -> bool:
        """释放模型与优化器引用"""
