"""Shared exception taxonomy.

Parse/format errors mean the bytes are wrong; validation errors mean the
values are wrong; data errors mean something referenced is missing; config
errors mean the run was asked for something impossible.
"""


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


class NumericError(ValueError):
    pass


class MetricError(ValueError):
    pass
