"""Shared argparse bits for the comparison scripts."""
import argparse

from longtail_lab.harness.cli import configure_logging
from longtail_lab.harness.experiments import SEEDS


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    return p


def setup() -> None:
    configure_logging()
