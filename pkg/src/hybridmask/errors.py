#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Exceptions raised by hybridmask.

Every error raised on purpose by this library derives from HybridMaskError so
that callers, and the command line in particular, can tell a reported
failure apart from a crash.
"""


class HybridMaskError(Exception):
    """Base class of all hybridmask errors."""


class DimensionError(HybridMaskError):
    """
    A tensor or volume does not have the expected shape. The message names
    the offending axis or scale.
    """


class ConfigError(HybridMaskError, ValueError):
    """An invalid configuration value or combination of values."""


class ConsistencyError(HybridMaskError):
    """
    An active coordinate set does not match the mask it must follow, or a
    mask pyramid is not consistent across scales.
    """


class DataError(HybridMaskError):
    """Invalid input data: bad crop, non-binary labels, empty data source."""


class FormatError(HybridMaskError):
    """A corrupt or unsupported file: volume, sidecar, index or checkpoint."""


class TrainingError(HybridMaskError):
    """A failure inside a training loop, tagged with the step index."""

    def __init__(self, message, step=None):
        self.step = step
        self.detail = message
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class OracleError(HybridMaskError):
    """A reference oracle received a function that returned non-finite values."""


class UsageError(HybridMaskError):
    """An API used outside of its contract, such as backward on a non-scalar."""
