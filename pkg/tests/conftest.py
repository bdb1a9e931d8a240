import json
from pathlib import Path

import pytest

from mfaimd import config_from_doc, load_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def config_path(name: str) -> Path:
    return CONFIG_DIR / f"{name}.json"


def read_doc(name: str) -> dict:
    return json.loads(config_path(name).read_text())


def modified(name: str, **class0_updates):
    """Shipped config with class-0 rate entries replaced."""
    doc = read_doc(name)
    doc["classes"][0].update(class0_updates)
    return config_from_doc(doc)


@pytest.fixture(scope="session")
def constant_cfg():
    return load_config(config_path("constant_rates"))


@pytest.fixture(scope="session")
def linear_cfg():
    return load_config(config_path("linear_service"))


@pytest.fixture(scope="session")
def coupled_cfg():
    return load_config(config_path("load_coupled"))


@pytest.fixture(scope="session")
def drift_cfg():
    return load_config(config_path("drift_balance"))


@pytest.fixture(scope="session")
def two_class_cfg():
    return load_config(config_path("two_class_rtt"))
