"""Argument checks shared by the config dataclasses and estimators."""
from __future__ import annotations

import numbers


def check_choice(name: str, value, options) -> None:
    if value not in options:
        raise ValueError(f"{name} must be one of {tuple(options)}, got {value!r}")


def check_number(name: str, value, low=None, high=None, low_inclusive=True, high_inclusive=True,
                 integer=False) -> None:
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a real number'}, got {value!r}")
    if value != value:
        raise ValueError(f"{name} must not be NaN")
    if low is not None and (value < low or (value == low and not low_inclusive)):
        raise ValueError(f"{name} must be {'>=' if low_inclusive else '>'} {low}, got {value}")
    if high is not None and (value > high or (value == high and not high_inclusive)):
        raise ValueError(f"{name} must be {'<=' if high_inclusive else '<'} {high}, got {value}")


def check_positive(name: str, value, integer=False) -> None:
    if integer:
        check_number(name, value, low=1, integer=True)
    else:
        check_number(name, value, low=0, low_inclusive=False)
