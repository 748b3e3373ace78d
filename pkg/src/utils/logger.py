"""
日志工具
"""
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

import colorlog

ROOT_LOGGER = "STORM"

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logger(
    name: str = ROOT_LOGGER,
    log_file: Optional[str] = "logs/storm.log",
    level: str = "INFO",
    max_bytes: int = 10485760,  # 10MB
    backup_count: int = 5
) -> logging.Logger:
    """
    设置日志记录器

    Args:
        name: 日志记录器名称，各模块使用 "STORM.<模块>" 子记录器
        log_file: 日志文件路径；为 None 时只输出到控制台
        level: 日志级别
        max_bytes: 单个日志文件最大大小
        backup_count: 保留的日志文件数量

    Returns:
        配置好的日志记录器
    """
    logger = logging.getLogger(name)
    log_level = getattr(logging, level.upper())
    logger.setLevel(log_level)

    # 避免重复添加处理器（多次调用 / 子进程复用）
    if logger.handlers:
        for handler in logger.handlers:
            handler.setLevel(log_level)
        return logger

    # 控制台处理器（带颜色）
    console_handler = colorlog.StreamHandler()
    console_handler.setLevel(log_level)
    console_handler.setFormatter(colorlog.ColoredFormatter(
        '%(log_color)s' + LOG_FORMAT,
        datefmt=DATE_FORMAT,
        log_colors={
            'DEBUG': 'cyan',
            'INFO': 'green',
            'WARNING': 'yellow',
            'ERROR': 'red',
            'CRITICAL': 'red,bg_white',
        }
    ))
    logger.addHandler(console_handler)

    # 文件处理器（轮转）
    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_path,
            maxBytes=max_bytes,
            backupCount=backup_count,
            encoding='utf-8'
        )
        file_handler.setLevel(log_level)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
        logger.addHandler(file_handler)

    logger.propagate = False
    return logger


def setup_from_config(logging_config) -> logging.Logger:
    """按 Config.logging 段配置根记录器"""
    return setup_logger(
        name=ROOT_LOGGER,
        log_file=logging_config.file,
        level=logging_config.level,
        max_bytes=logging_config.max_size,
        backup_count=logging_config.backup_count,
    )


def get_logger(area: str) -> logging.Logger:
    """获取模块子记录器，例如 get_logger("planner") -> STORM.planner"""
    return logging.getLogger(f"{ROOT_LOGGER}.{area}")
