"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

日志系统配置
全局日志（按日期滚动的文件 + 控制台）以及写入运行目录的 run.log
"""

import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional, Union

ROOT_LOGGER = "sedsr"
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
RUN_LOG_NAME = "run.log"


def _formatter() -> logging.Formatter:
    return logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)


def setup_logger(log_level=logging.INFO, log_dir: Optional[Union[str, Path]] = None) -> logging.Logger:
    """设置日志系统，重复调用不会重复添加处理器

    Args:
        log_level: 日志级别，默认为INFO
        log_dir: 日志目录，默认为 ~/SedSR/logs
    """
    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(log_level)
    if logger.handlers:
        return logger

    log_dir = Path(log_dir) if log_dir else Path.home() / "SedSR" / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / f"sedsr_{datetime.now().strftime('%Y%m%d')}.log"

    for handler in (logging.FileHandler(log_file, encoding="utf-8"), logging.StreamHandler(sys.stdout)):
        handler.setLevel(log_level)
        handler.setFormatter(_formatter())
        logger.addHandler(handler)
    return logger


def attach_run_log(out_dir: Union[str, Path], log_level=logging.INFO) -> logging.Handler:
    """把 sedsr.* 的日志同时写入 <out_dir>/run.log（追加），返回处理器以便之后移除"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / RUN_LOG_NAME, encoding="utf-8")
    handler.setLevel(log_level)
    handler.setFormatter(_formatter())
    logger = logging.getLogger(ROOT_LOGGER)
    if logger.level == logging.NOTSET or logger.level > log_level:
        logger.setLevel(log_level)
    logger.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler):
    logging.getLogger(ROOT_LOGGER).removeHandler(handler)
    handler.close()
