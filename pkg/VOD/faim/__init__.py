# -*- encoding: utf-8 -*-
from .faim import FAIM
from .utils import DEFAULT_CONFIG, RunConfig, get_logger, load_config, read_yaml
