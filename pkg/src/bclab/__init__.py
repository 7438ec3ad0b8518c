"""Boundary-control lab exports."""

from .cli import app


def main() -> None:
    app()
