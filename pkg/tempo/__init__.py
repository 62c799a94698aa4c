# SPDX-License-Identifier: Apache-2.0
"""tempo — two-stream temporal activity detection on a desk-scale corpus."""

__version__ = "1.0.0"
