import logging
import os
import random
from typing import Optional

import numpy as np

from .config import Settings, load_config

__version__ = "0.1.0"

LOG_FORMAT = "%(asctime)s [%(name)s] %(levelname)s: %(message)s"


def configure_determinism(seed: int, deterministic: bool = True) -> None:
    import tensorflow as tf

    random.seed(seed)
    np.random.seed(seed)
    tf.random.set_seed(seed)
    if deterministic:
        tf.config.experimental.enable_op_determinism()


def create_lab(deterministic: Optional[bool] = None) -> Settings:
    settings = load_config()

    # Ensure data directories exist
    os.makedirs(settings.data_dir, exist_ok=True)
    os.makedirs(settings.runs_dir, exist_ok=True)

    logging.basicConfig(level=getattr(logging, settings.log_level, logging.INFO), format=LOG_FORMAT)

    if settings.deterministic if deterministic is None else deterministic:
        configure_determinism(0, deterministic=True)

    return settings
