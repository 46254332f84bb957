import os
import configparser
from typing import Dict, Any

_ENV_PREFIX = "MAMBAHSI_"
_TRUE_VALUES = {"1", "true", "yes", "on"}


class Config:
    _instance = None
    _config = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(Config, cls).__new__(cls)
            cls._instance._load_config()
        return cls._instance

    def _load_config(self):
        """加载配置文件"""
        if self._config is None:
            BASE_DIR = os.path.dirname(os.path.abspath(__file__))
            CONFIG_PATH = os.path.join(BASE_DIR, "config.ini")

            self._config = configparser.ConfigParser()
            try:
                self._config.read(CONFIG_PATH, encoding="utf-8")
            except Exception as e:
                print(f"警告：无法读取配置文件 {CONFIG_PATH}: {e}")
                self._config = configparser.ConfigParser()

    def get(self, section: str, key: str, default: str = None) -> str:
        """获取配置值，环境变量 MAMBAHSI_<KEY> 优先于 config.ini"""
        env_value = os.getenv(f"{_ENV_PREFIX}{key.upper()}")
        if env_value is not None and env_value != "":
            return env_value
        try:
            return self._config.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError):
            return default

    def get_int(self, section: str, key: str, default: int) -> int:
        value = self.get(section, key)
        try:
            return int(value) if value is not None else default
        except ValueError:
            print(f"警告：配置 [{section}] {key}={value} 不是整数，使用默认值 {default}")
            return default

    def get_float(self, section: str, key: str, default: float) -> float:
        value = self.get(section, key)
        try:
            return float(value) if value is not None else default
        except ValueError:
            print(f"警告：配置 [{section}] {key}={value} 不是数字，使用默认值 {default}")
            return default

    def get_bool(self, section: str, key: str, default: bool = False) -> bool:
        value = self.get(section, key)
        if value is None:
            return default
        return str(value).strip().lower() in _TRUE_VALUES

    def get_model_defaults(self) -> Dict[str, Any]:
        """获取模型结构默认值（D=128, G=4）"""
        return {
            'embed_dim': self.get_int("Model", "embed_dim", 128),
            'spectral_groups': self.get_int("Model", "spectral_groups", 4),
            'encoder_depth': self.get_int("Model", "encoder_depth", 1),
            'd_state': self.get_int("Model", "d_state", 16),
            'expand': self.get_int("Model", "expand", 2),
            'd_conv': self.get_int("Model", "d_conv", 4),
            'gn_groups': self.get_int("Model", "gn_groups", 4),
            'fusion': self.get("Model", "fusion", "ssfm"),
            'branches': self.get("Model", "branches", "both"),
            'scan_mode': self.get("Model", "scan_mode", "parallel"),
        }

    def get_train_defaults(self) -> Dict[str, Any]:
        """获取训练默认值（lr=3e-4，每类 30/10 个训练/验证样本）"""
        return {
            'lr': self.get_float("Train", "lr", 3e-4),
            'epochs': self.get_int("Train", "epochs", 300),
            'seed': self.get_int("Train", "seed", 1),
            'n_train': self.get_int("Train", "n_train", 30),
            'n_val': self.get_int("Train", "n_val", 10),
        }

    def get_bench_defaults(self) -> Dict[str, Any]:
        return {
            'attention_cap': self.get_int("Bench", "attention_cap", 100),
            'repeats': self.get_int("Bench", "repeats", 5),
        }

    def debug_nan_enabled(self) -> bool:
        """非有限值陷阱开关（MAMBAHSI_DEBUG_NAN=1）"""
        return self.get_bool("Debug", "debug_nan", False)

    def get_log_config(self) -> Dict[str, Any]:
        return {
            'log_dir': self.get("Log", "log_dir", "log"),
            'to_file': self.get_bool("Log", "to_file", False),
        }


config = Config()
