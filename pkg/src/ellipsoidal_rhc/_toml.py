"""TOML reader: stdlib ``tomllib`` on 3.11+, ``tomli`` before."""

try:
    from tomllib import TOMLDecodeError, load, loads  # noqa: F401
except ImportError:  # pragma: no cover - Python 3.10
    from tomli import TOMLDecodeError, load, loads  # noqa: F401
