"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

运行事件总线
训练与评估模块在关键节点发布事件（开始、步进、检查点、报告、结束、错误），
调用方可订阅用于进度显示或外部记录，不影响训练结果。
"""

import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Any, Callable, Dict, List, Tuple

Callback = Callable[["Event"], Any]


class EventType(Enum):
    RUN_STARTED = auto()           # 训练/评估运行开始
    STEP_COMPLETED = auto()        # 单步优化完成（按日志间隔发布）
    CHECKPOINT_SAVED = auto()      # 检查点写入完成
    EVALUATION_COMPLETED = auto()  # 指标报告生成完成
    RUN_COMPLETED = auto()         # 运行结束
    ERROR_OCCURRED = auto()        # 生命周期阶段或运行失败


@dataclass
class Event:
    type: EventType
    data: Any = None
    timestamp: float = field(default_factory=time.time)


class EventManager:
    """事件管理器（进程级单例）

    所有事件进入同一个队列，由一个后台分发线程按发布顺序处理。
    同步订阅者在分发线程中依次执行；异步订阅者提交到线程池，不保证顺序。
    回调抛出的异常只记录日志，不会中断分发。
    """
    _instance = None
    _instance_lock = threading.Lock()

    def __new__(cls):
        with cls._instance_lock:
            if cls._instance is None:
                instance = super().__new__(cls)
                instance._setup()
                cls._instance = instance
            return cls._instance

    def _setup(self):
        self._logger = logging.getLogger("sedsr.events")
        # event_type -> {callback: is_async}，保持订阅顺序
        self._registry: Dict[EventType, Dict[Callback, bool]] = {}
        self._registry_lock = threading.Lock()
        self._pending: "queue.Queue[Any]" = queue.Queue()
        self._pool = ThreadPoolExecutor(max_workers=4, thread_name_prefix="sedsr-event")
        self._dispatcher = threading.Thread(target=self._dispatch_loop, name="sedsr-events", daemon=True)
        self._dispatcher.start()

    def subscribe(self, event_type: EventType, callback: Callback, is_async: bool = False):
        """订阅事件；同一回调重复订阅时以最后一次的 is_async 为准"""
        with self._registry_lock:
            self._registry.setdefault(event_type, {})[callback] = is_async

    def unsubscribe(self, event_type: EventType, callback: Callback):
        with self._registry_lock:
            self._registry.get(event_type, {}).pop(callback, None)

    def subscribers(self, event_type: EventType) -> List[Tuple[Callback, bool]]:
        """当前订阅者快照 [(callback, is_async), ...]"""
        with self._registry_lock:
            return list(self._registry.get(event_type, {}).items())

    def publish(self, event: Event):
        self._pending.put(event)

    def flush(self, timeout: float = 5.0) -> bool:
        """阻塞直到此前发布的事件都已完成同步分发

        Returns:
            bool: 是否在超时前完成
        """
        marker = threading.Event()
        self._pending.put(marker)
        return marker.wait(timeout)

    def _dispatch_loop(self):
        while True:
            item = self._pending.get()
            if isinstance(item, threading.Event):
                item.set()
                continue
            for callback, is_async in self.subscribers(item.type):
                if is_async:
                    self._pool.submit(self._invoke, callback, item)
                else:
                    self._invoke(callback, item)

    def _invoke(self, callback: Callback, event: Event):
        try:
            callback(event)
        except Exception:
            self._logger.exception(f"事件回调出错: {event.type.name} -> {getattr(callback, '__name__', callback)}")
