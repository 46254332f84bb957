"""
运行日志

统一格式: [YYYY-mm-dd HH:MM:SS] [模块] 消息，flush 打印到 stdout。
[Log] to_file 打开时同一行追加到 log/<name>-YYYY-mm-dd.log（按天一个文件）。
"""
import os
from datetime import datetime

from config import config


def _now_str():
    return datetime.now().strftime('%Y-%m-%d %H:%M:%S')


def _append_file(line: str, name: str):
    log_cfg = config.get_log_config()
    if not log_cfg['to_file']:
        return
    log_dir = log_cfg['log_dir']
    try:
        os.makedirs(log_dir, exist_ok=True)
        date_str = datetime.now().strftime("%Y-%m-%d")
        with open(os.path.join(log_dir, f"{name}-{date_str}.log"), 'a', encoding='utf-8') as f:
            f.write(line + "\n")
    except OSError as e:
        print(f"[{_now_str()}] [Log] 写日志文件失败: {e}", flush=True)


def log(tag: str, message: str, name: str = "run"):
    line = f"[{_now_str()}] [{tag}] {message}"
    print(line, flush=True)
    _append_file(line, name)


def warn(tag: str, message: str, name: str = "run"):
    log(tag, f"警告: {message}", name=name)
