#!/usr/bin/env python3
"""
Exception hierarchy for the layerpath pipeline.

Each error class carries the process exit code the CLI returns when it
escapes a subcommand.
"""


class LayerpathError(Exception):
    """Base class for every error raised by layerpath modules."""

    exit_code = 1


class ConfigError(LayerpathError):
    """Unknown config keys, out-of-range values, bad flag values."""

    exit_code = 2


class InputError(LayerpathError, ValueError):
    """Malformed inputs: empty sequences, unknown tokens, missing files."""

    exit_code = 3


class DimensionError(InputError):
    """Operand shapes that an operation cannot combine."""


class ConstraintError(LayerpathError, ValueError):
    """An execution path that breaks one of the path rules."""

    exit_code = 3

    def __init__(self, rule, message=None):
        self.rule = rule
        super().__init__(message or f"execution path violates rule '{rule}'")


class FormatError(LayerpathError):
    """Checkpoint file with the wrong magic, version, or a truncated block."""

    exit_code = 3


class TrainingError(LayerpathError):
    """Non-finite loss during pretraining or router training."""

    exit_code = 4

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
