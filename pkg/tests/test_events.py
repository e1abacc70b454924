"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.
"""

import threading
from concurrent.futures import ThreadPoolExecutor

import pytest

from sedsr.core.events import Event, EventManager, EventType


@pytest.fixture
def bus():
    manager = EventManager()
    registered = []

    def subscribe(event_type, callback, is_async=False):
        manager.subscribe(event_type, callback, is_async)
        registered.append((event_type, callback))

    yield manager, subscribe
    for event_type, callback in registered:
        manager.unsubscribe(event_type, callback)


def test_one_manager_per_process():
    assert EventManager() is EventManager()


def test_event_timestamp_defaults():
    event = Event(EventType.CHECKPOINT_SAVED, {"path": "state.pt"})
    assert event.timestamp > 0
    assert event.data["path"] == "state.pt"


def test_run_lifecycle_event_names():
    assert [e.name for e in EventType] == [
        "RUN_STARTED", "STEP_COMPLETED", "CHECKPOINT_SAVED",
        "EVALUATION_COMPLETED", "RUN_COMPLETED", "ERROR_OCCURRED",
    ]


def test_sync_delivery_after_flush(bus):
    manager, subscribe = bus
    phases = []
    subscribe(EventType.RUN_STARTED, lambda e: phases.append(e.data["phase"]))

    manager.publish(Event(EventType.RUN_STARTED, {"phase": "psnr"}))
    manager.publish(Event(EventType.RUN_STARTED, {"phase": "gan"}))
    assert manager.flush()
    assert phases == ["psnr", "gan"]


def test_step_events_keep_publish_order(bus):
    manager, subscribe = bus
    steps = []
    subscribe(EventType.STEP_COMPLETED, lambda e: steps.append(e.data["step"]))

    for step in range(1, 51):
        manager.publish(Event(EventType.STEP_COMPLETED, {"step": step}))
    assert manager.flush()
    assert steps == list(range(1, 51))


def test_async_callback_runs_off_dispatcher(bus):
    manager, subscribe = bus
    done = threading.Event()
    seen = {}

    def on_checkpoint(event):
        seen["thread"] = threading.current_thread().name
        seen["step"] = event.data["step"]
        done.set()

    subscribe(EventType.CHECKPOINT_SAVED, on_checkpoint, is_async=True)
    manager.publish(Event(EventType.CHECKPOINT_SAVED, {"step": 200}))
    assert done.wait(2.0)
    assert seen["step"] == 200
    assert seen["thread"].startswith("sedsr-event")


def test_unsubscribed_callback_is_silent(bus):
    manager, subscribe = bus
    errors = []
    subscribe(EventType.ERROR_OCCURRED, errors.append)

    manager.publish(Event(EventType.ERROR_OCCURRED, {"error": "nan"}))
    manager.flush()
    manager.unsubscribe(EventType.ERROR_OCCURRED, errors.append)
    manager.publish(Event(EventType.ERROR_OCCURRED, {"error": "ignored"}))
    manager.flush()
    assert [e.data["error"] for e in errors] == ["nan"]


def test_failing_callback_does_not_block_others(bus):
    manager, subscribe = bus
    received = []

    def broken(event):
        raise RuntimeError("回调失败")

    subscribe(EventType.RUN_COMPLETED, broken)
    subscribe(EventType.RUN_COMPLETED, received.append)
    manager.publish(Event(EventType.RUN_COMPLETED, {"steps": 4}))
    assert manager.flush()
    assert len(received) == 1


def test_publish_from_worker_threads(bus):
    manager, subscribe = bus
    ids = []
    subscribe(EventType.EVALUATION_COMPLETED, lambda e: ids.append(e.data["image"]))

    with ThreadPoolExecutor(max_workers=4) as pool:
        for i in range(16):
            pool.submit(manager.publish, Event(EventType.EVALUATION_COMPLETED, {"image": i}))
    assert manager.flush()
    assert sorted(ids) == list(range(16))


def test_resubscribe_switches_mode(bus):
    manager, subscribe = bus

    def callback(event):
        pass

    subscribe(EventType.RUN_STARTED, callback)
    subscribe(EventType.RUN_STARTED, callback, is_async=True)
    assert (callback, True) in manager.subscribers(EventType.RUN_STARTED)
    manager.unsubscribe(EventType.RUN_STARTED, callback)
    assert all(cb is not callback for cb, _ in manager.subscribers(EventType.RUN_STARTED))
