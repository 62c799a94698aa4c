# SPDX-License-Identifier: Apache-2.0
"""
Entrypoint — run with: python -m tempo <command>
"""

from tempo.main import main

if __name__ == "__main__":
    raise SystemExit(main())
